"""Command-line tests: exit codes, emitted files, determinism."""

import csv
import json

import numpy as np

from structdrop.cli import main


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestSearchCommand:
    def test_degenerate_two_pattern_case(self, tmp_path, capsys):
        out = tmp_path / "dist.json"
        code = main(["search", "--target-rate", "0.5", "--dp-max", "2",
                     "--entropy-weight", "0", "--max-steps", "40000",
                     "--out", str(out), "--no-plot"])
        assert code == 0
        doc = json.loads(out.read_text())
        np.testing.assert_allclose(doc["probs"], [0.0, 1.0], atol=0.02)
        assert abs(doc["achieved_rate"] - 0.5) <= 0.01
        assert "achieved_rate" in capsys.readouterr().out

    def test_target_rate_achieved(self, tmp_path):
        out = tmp_path / "dist.json"
        assert main(["search", "--target-rate", "0.7", "--dp-max", "64",
                     "--out", str(out), "--no-plot"]) == 0
        doc = json.loads(out.read_text())
        assert abs(doc["achieved_rate"] - 0.7) <= 0.01

    def test_infeasible_rate_exits_2(self, tmp_path, capsys):
        code = main(["search", "--target-rate", "0.99", "--dp-max", "2",
                     "--out", str(tmp_path / "d.json"), "--no-plot"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_figure_rendered(self, tmp_path):
        out = tmp_path / "dist.json"
        main(["search", "--target-rate", "0.3", "--dp-max", "8", "--out", str(out)])
        assert (tmp_path / "dist.png").exists()


class TestBenchCommand:
    def test_csv_and_monotone_macs(self, tmp_path):
        out = tmp_path / "bench.csv"
        code = main(["bench-gemm", "--m", "192", "--k", "160", "--n", "96",
                     "--keep", "1.0", "0.5", "0.25", "--reps", "2",
                     "--csv", str(out), "--no-plot"])
        assert code == 0
        rows = read_csv(out)
        assert [float(r["keep_fraction"]) for r in rows] == [1.0, 0.5, 0.25]
        macs = [int(r["macs_performed"]) for r in rows]
        assert macs[0] > macs[1] > macs[2]
        assert int(rows[0]["macs_performed"]) == int(rows[0]["macs_dense"])

    def test_tile_granularity(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench-gemm", "--m", "128", "--k", "128", "--n", "64",
                     "--granularity", "tile", "--keep", "0.5", "--reps", "1",
                     "--csv", str(out), "--no-plot"]) == 0
        row = read_csv(out)[0]
        assert row["granularity"] == "tile"

    def test_bad_keep_exits_2(self, tmp_path):
        assert main(["bench-gemm", "--m", "8", "--k", "8", "--n", "8",
                     "--keep", "0.0", "--csv", str(tmp_path / "b.csv"),
                     "--no-plot"]) == 2

    def test_env_thread_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MASKGEMM_THREADS", "1")
        assert main(["bench-gemm", "--m", "64", "--k", "64", "--n", "32",
                     "--keep", "0.5", "--reps", "1",
                     "--csv", str(tmp_path / "b.csv"), "--no-plot"]) == 0


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestTrainCommand:
    def test_mlp_run_emits_artifacts(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic", "train": 600, "test": 200,
                        "noise": 0.45, "seed": 5},
            "model": {"sizes": [784, 32, 10], "dropout": "approx_row",
                      "rate": 0.5},
            "train": {"batch_size": 64, "epochs": 1, "seed": 2},
        })
        out = tmp_path / "run"
        assert main(["train", "--model", "mlp", "--config", cfg,
                     "--out-dir", str(out)]) == 0
        assert (out / "train_log.jsonl").exists()
        assert (out / "epochs.csv").exists()
        assert (out / "resolved_config.json").exists()
        assert (out / "training.png").exists()
        first = json.loads((out / "train_log.jsonl").read_text().splitlines()[0])
        assert {"epoch", "iter", "loss", "acc", "macs", "wall_ns"} <= set(first)

    def test_deterministic_outputs_modulo_timing(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic", "train": 400, "test": 100,
                        "noise": 0.45, "seed": 6},
            "model": {"sizes": [784, 24, 10], "dropout": "bernoulli", "rate": 0.5},
            "train": {"batch_size": 64, "epochs": 1, "seed": 3},
        })
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--model", "mlp", "--config", cfg,
                         "--out-dir", str(out), "--no-plot"]) == 0
            rows = [json.loads(line) for line in
                    (out / "train_log.jsonl").read_text().splitlines()]
            outs.append([{k: v for k, v in r.items() if k != "wall_ns"}
                         for r in rows])
        assert outs[0] == outs[1]

    def test_cnn_zero_schedule_matches_baseline_bytes(self, tmp_path):
        # a schedule pinned at zero reproduces the baseline training log
        # byte for byte apart from the timing column
        common = {
            "dataset": {"kind": "synthetic", "train": 400, "test": 100,
                        "noise": 0.45, "seed": 12},
            "train": {"batch_size": 64, "epochs": 1, "seed": 8},
        }
        base_cfg = write_config(tmp_path / "base.json", dict(common, model={}))
        zero_cfg = write_config(tmp_path / "zero.json", dict(
            common, model={"dropout": "rsdp"},
            schedule={"mean": 0.0, "min": 0.0, "max": 0.0, "shape": 3.0}))
        logs = []
        for name, cfg in [("base", base_cfg), ("zero", zero_cfg)]:
            out = tmp_path / name
            assert main(["train", "--model", "cnn", "--config", cfg,
                         "--out-dir", str(out), "--no-plot"]) == 0
            rows = [json.loads(line) for line in
                    (out / "train_log.jsonl").read_text().splitlines()]
            logs.append([{k: v for k, v in r.items() if k != "wall_ns"}
                         for r in rows])
        assert logs[0] == logs[1]

    def test_cnn_with_schedule(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic", "train": 400, "test": 100,
                        "noise": 0.45, "seed": 7},
            "model": {"dropout": "rsdp"},
            "train": {"batch_size": 64, "epochs": 2, "seed": 4},
            "schedule": {"mean": 0.3, "min": 0.1, "max": 0.6, "shape": 3.0},
        })
        out = tmp_path / "run"
        assert main(["train", "--model", "cnn", "--config", cfg,
                     "--out-dir", str(out), "--no-plot"]) == 0
        epochs = read_csv(out / "epochs.csv")
        assert len(epochs) == 2
        assert float(epochs[0]["dropout_ratio"]) > 0.0

    def test_lstm_run(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic-text", "length": 3000, "seed": 8},
            "model": {"hidden": 16, "dropout": "approx_row", "rate": 0.5},
            "train": {"batch_size": 8, "epochs": 1, "seed": 5},
            "sequence": {"seq_len": 12, "iters_per_epoch": 4},
        })
        out = tmp_path / "run"
        assert main(["train", "--model", "lstm", "--config", cfg,
                     "--out-dir", str(out), "--no-plot"]) == 0
        epochs = read_csv(out / "epochs.csv")
        assert "test_perplexity" in epochs[0]

    def test_idx_dataset_kind(self, tmp_path):
        from structdrop import write_synthetic_idx

        paths = write_synthetic_idx(tmp_path / "data", 300, 100, seed=9)
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": dict(kind="idx", **paths),
            "model": {"sizes": [784, 16, 10]},
            "train": {"batch_size": 50, "epochs": 1, "seed": 1},
        })
        assert main(["train", "--model", "mlp", "--config", cfg,
                     "--out-dir", str(tmp_path / "run"), "--no-plot"]) == 0

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic"},
            "model": {}, "train": {}, "typo_key": 1,
        })
        assert main(["train", "--model", "mlp", "--config", cfg,
                     "--out-dir", str(tmp_path / "run"), "--no-plot"]) == 2
        assert "typo_key" in capsys.readouterr().err

    def test_unknown_nested_key_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic", "bogus": 1},
            "model": {}, "train": {},
        })
        assert main(["train", "--model", "mlp", "--config", cfg,
                     "--out-dir", str(tmp_path / "run"), "--no-plot"]) == 2

    def test_invalid_json_exits_2(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        assert main(["train", "--model", "mlp", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "run"), "--no-plot"]) == 2


class TestAblateCommand:
    def test_magnitude_parts_sweep(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic", "train": 400, "test": 100,
                        "noise": 0.45, "seed": 10},
            "model": {}, "train": {"batch_size": 64, "epochs": 1, "seed": 6},
            "ablate": {"parts": 2, "rates": [0.4]},
        })
        out = tmp_path / "run"
        assert main(["ablate", "--mode", "magnitude-parts", "--config", cfg,
                     "--out-dir", str(out), "--no-plot"]) == 0
        rows = read_csv(out / "magnitude_parts.csv")
        assert [int(r["part"]) for r in rows] == [1, 2]

    def test_weight_vs_input(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {
            "dataset": {"kind": "synthetic", "train": 400, "test": 100,
                        "noise": 0.45, "seed": 11},
            "model": {}, "train": {"batch_size": 64, "epochs": 1, "seed": 7},
            "ablate": {"fraction": 0.4},
        })
        out = tmp_path / "run"
        assert main(["ablate", "--mode", "weight-vs-input", "--config", cfg,
                     "--out-dir", str(out), "--no-plot"]) == 0
        rows = read_csv(out / "weight_vs_input.csv")
        assert {r["target"] for r in rows} == {"weight", "input"}


class TestScheduleCommand:
    def test_table_and_figure(self, tmp_path):
        out = tmp_path / "sched.csv"
        assert main(["schedule", "--epochs", "50", "--mean", "0.25",
                     "--min", "0.1", "--max", "0.6", "--plot-csv", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 50
        ratios = np.array([float(r["ratio"]) for r in rows])
        assert abs(ratios.mean() - 0.25) <= 1e-6
        diffs = np.diff(ratios)
        signs = np.sign(diffs[diffs != 0])
        assert (np.diff(signs) != 0).sum() <= 1
        assert out.with_suffix(".png").exists()

    def test_shape_sweep_files(self, tmp_path):
        out = tmp_path / "sched.csv"
        assert main(["schedule", "--epochs", "40", "--mean", "0.2",
                     "--shape", "1", "2", "--plot-csv", str(out),
                     "--no-plot"]) == 0
        assert (tmp_path / "sched_shape1.csv").exists()
        assert (tmp_path / "sched_shape2.csv").exists()

    def test_infeasible_exits_2(self, tmp_path):
        assert main(["schedule", "--epochs", "10", "--mean", "0.9",
                     "--min", "0.1", "--max", "0.6",
                     "--plot-csv", str(tmp_path / "s.csv"), "--no-plot"]) == 2

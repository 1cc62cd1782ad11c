"""Figure rendering for CLI reports; every plot lands next to its CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distribution(dist, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    periods = np.arange(1, dist.pattern_count + 1)
    ax.bar(periods, dist.probs, width=0.9)
    ax.set_xlabel("dropout period")
    ax.set_ylabel("probability")
    ax.set_title(f"target rate {dist.target_rate:.3f}, "
                 f"achieved {dist.achieved_rate:.3f}")
    _save(fig, path)


def plot_schedule(schedules: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for label, sched in schedules.items():
        ax.plot(np.arange(1, sched.total_epochs + 1), sched.ratios, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dropout ratio")
    ax.set_ylim(bottom=0.0)
    ax.legend()
    _save(fig, path)


def plot_bench(rows: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    keeps = [r["keep_fraction"] for r in rows]
    speedups = [r["speedup"] for r in rows]
    ax.plot(keeps, speedups, "o-")
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("keep fraction")
    ax.set_ylabel("speedup vs dense")
    ax.set_title(f"{rows[0]['M']}x{rows[0]['K']}x{rows[0]['N']} "
                 f"({rows[0]['granularity']})")
    _save(fig, path)


def plot_training(logs: dict, path) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))
    for label, log in logs.items():
        epochs = [e["epoch"] for e in log.epochs]
        ax_loss.plot(epochs, [e["train_loss"] for e in log.epochs], label=label)
        metric = "test_acc" if "test_acc" in log.epochs[0] else "test_perplexity"
        ax_acc.plot(epochs, [e[metric] for e in log.epochs], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel(metric.replace("_", " "))
    ax_acc.legend()
    _save(fig, path)


def plot_part_sweep(rows: list[dict], path) -> None:
    """Final accuracy per magnitude part at each sweep rate."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    rates = sorted({r["rate"] for r in rows})
    for rate in rates:
        sel = sorted((r for r in rows if r["rate"] == rate), key=lambda r: r["part"])
        ax.plot([r["part"] for r in sel], [r["final_acc"] for r in sel],
                "o-", label=f"rate {rate}")
    ax.set_xlabel("magnitude part (1 = largest values)")
    ax.set_ylabel("final test accuracy")
    ax.legend()
    _save(fig, path)

"""Training loops for the desk-scale MLP, LSTM and CNN experiments.

One dropout pattern is sampled per masked layer per iteration and applied
to the whole batch; pattern distributions are searched once at model build
time.  Sensitivity-driven conv dropout takes its insensitive-region ratio
from a per-epoch schedule.  Runs are bit-deterministic for a fixed seed and
config: data order, weight init and every dropout draw come from separate
child streams of the config seed, so enabling a dropout path never perturbs
the others.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ImageDataset, TextDataset
from .errors import ParameterError
from .layers import (ConvLayer, DenseLayer, DropoutMode, LstmLayer, MacCounter,
                     ReluLayer, SigmoidLayer, SoftmaxCrossEntropy, StepContext,
                     TanhLayer)
from .patterns import TileConfig
from .schedule import RatioSchedule
from .search import (DEFAULT_SUPPORT_CAP, PatternDistribution, SearchConfig,
                     search_distribution)
from .sensitivity import SensitivityConfig, partition_by_magnitude
from .tensor import ConvShape, default_dtype


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # dense | conv | lstm | relu | sigmoid | tanh
    dims: tuple = ()
    mode: DropoutMode = DropoutMode.NONE
    rate: float = 0.0
    tile: tuple[int, int] = (32, 32)
    sensitivity: SensitivityConfig | None = None

    def __post_init__(self):
        if self.mode in (DropoutMode.APPROX_ROW, DropoutMode.APPROX_TILE) and \
                self.kind not in ("dense", "lstm"):
            raise ParameterError("row/tile patterns mask dense or LSTM weights only")
        if self.mode in (DropoutMode.RSDP, DropoutMode.BSDP) and self.kind != "conv":
            raise ParameterError("sensitivity dropout masks conv input matrices only")


@dataclass(frozen=True)
class ModelSpec:
    kind: str                      # mlp | lstm | cnn
    layers: tuple[LayerSpec, ...]
    support_cap: int = DEFAULT_SUPPORT_CAP


def mlp_spec(sizes, mode: DropoutMode = DropoutMode.NONE, rate: float = 0.5,
             tile: tuple[int, int] = (32, 32)) -> ModelSpec:
    """Fully connected net; dropout applies to the hidden layers only."""
    layers = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        layers.append(LayerSpec("dense", (sizes[i], sizes[i + 1]),
                                DropoutMode.NONE if last else mode,
                                0.0 if last else rate, tile))
        if not last:
            layers.append(LayerSpec("relu"))
    return ModelSpec("mlp", tuple(layers))


def lstm_spec(vocab_size: int, hidden: int, mode: DropoutMode = DropoutMode.NONE,
              rate: float = 0.5, tile: tuple[int, int] = (16, 16)) -> ModelSpec:
    return ModelSpec("lstm", (
        LayerSpec("lstm", (vocab_size, hidden), mode, rate, tile),
        LayerSpec("dense", (hidden, vocab_size)),
    ))


def cnn_spec(image=(1, 28, 28), convs=((8, 5, 2, 0), (16, 3, 2, 0)),
             hidden: int = 64, classes: int = 10,
             mode: DropoutMode = DropoutMode.NONE,
             sensitivity: SensitivityConfig | None = None,
             tile: tuple[int, int] = (32, 8)) -> ModelSpec:
    """Small conv net; each conv entry is (out_channels, kernel, stride, pad)."""
    c, h, w = image
    layers = []
    for out_c, k, s, p in convs:
        shape = ConvShape(c, h, w, out_c, k, s, p)
        layers.append(LayerSpec("conv", (c, h, w, out_c, k, s, p), mode,
                                tile=tile, sensitivity=sensitivity))
        layers.append(LayerSpec("relu"))
        c, h, w = out_c, shape.out_height, shape.out_width
    flat = c * h * w
    layers.append(LayerSpec("dense", (flat, hidden)))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", (hidden, classes)))
    return ModelSpec("cnn", tuple(layers))


class _Flatten:
    """(N, C, H, W) -> (features, batch) bridge between conv and dense."""

    def forward(self, x, ctx):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1).T

    def backward(self, d_out, ctx):
        return d_out.T.reshape(self._shape)

    def params(self):
        return []


def _layer_distribution(spec: LayerSpec, weight_dims, cap: int) -> PatternDistribution:
    from .patterns import PatternKind, pattern_space

    if spec.rate == 0.0:
        return PatternDistribution.from_probs([1.0], target_rate=0.0)
    kind = PatternKind.TILE if spec.mode is DropoutMode.APPROX_TILE else PatternKind.ROW
    rows, cols = weight_dims
    space = pattern_space(kind, rows, cols, TileConfig(*spec.tile))
    n = min(cap, space)
    return search_distribution(SearchConfig(pattern_count=n, target_rate=spec.rate))


class Model:
    """Layer stack plus a softmax cross-entropy head."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        root = np.random.SeedSequence(seed)
        init_seq, drop_seq = root.spawn(2)
        init_rngs = [np.random.Generator(np.random.PCG64(s))
                     for s in init_seq.spawn(len(spec.layers))]
        drop_rngs = [np.random.Generator(np.random.PCG64(s))
                     for s in drop_seq.spawn(len(spec.layers))]
        self.layers = []
        prev_was_conv = False
        for i, ls in enumerate(spec.layers):
            if ls.kind == "dense":
                if prev_was_conv:
                    self.layers.append(_Flatten())
                    prev_was_conv = False
                dist = None
                if ls.mode in (DropoutMode.APPROX_ROW, DropoutMode.APPROX_TILE):
                    dist = _layer_distribution(ls, (ls.dims[1], ls.dims[0]),
                                               spec.support_cap)
                self.layers.append(DenseLayer(
                    ls.dims[0], ls.dims[1], init_rngs[i], ls.mode, ls.rate,
                    dist, TileConfig(*ls.tile), drop_rngs[i]))
            elif ls.kind == "conv":
                shape = ConvShape(*ls.dims)
                self.layers.append(ConvLayer(shape, init_rngs[i], ls.mode,
                                             ls.sensitivity, TileConfig(*ls.tile),
                                             drop_rngs[i]))
                prev_was_conv = True
            elif ls.kind == "lstm":
                dist = None
                if ls.mode in (DropoutMode.APPROX_ROW, DropoutMode.APPROX_TILE):
                    dims = ((ls.dims[1], 1) if ls.mode is DropoutMode.APPROX_ROW
                            else (4 * ls.dims[1], ls.dims[0] + ls.dims[1]))
                    dist = _layer_distribution(ls, dims, spec.support_cap)
                self.layers.append(LstmLayer(
                    ls.dims[0], ls.dims[1], init_rngs[i], ls.mode, ls.rate,
                    dist, TileConfig(*ls.tile), drop_rngs[i]))
            elif ls.kind == "relu":
                self.layers.append(ReluLayer())
            elif ls.kind == "sigmoid":
                self.layers.append(SigmoidLayer())
            elif ls.kind == "tanh":
                self.layers.append(TanhLayer())
            else:
                raise ParameterError(f"unknown layer kind {ls.kind!r}")
        self.head = SoftmaxCrossEntropy()
        # hooks used by the ablation studies
        self.input_ablation = None

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def conv_layers(self):
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    def forward(self, x, ctx: StepContext):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, d_out, ctx: StepContext):
        for layer in reversed(self.layers):
            d_out = layer.backward(d_out, ctx)
        return d_out


class SgdMomentum:
    def __init__(self, params, lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p, _ in params]

    def step(self):
        for (param, grad), vel in zip(self.params, self.velocity):
            vel *= self.momentum
            vel -= self.lr * grad
            param += vel


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    _FILE_FIELDS = ("epoch", "iter", "loss", "acc", "macs", "macs_dense",
                    "wall_ns")

    def save_jsonl(self, path) -> None:
        """One JSON line per iteration.  Only the wall_ns column may differ
        between two runs of the same seeded config; the in-memory records
        additionally carry the dropout-eligible MAC split."""
        with open(path, "w") as fh:
            for row in self.iterations:
                fh.write(json.dumps({k: row[k] for k in self._FILE_FIELDS}) + "\n")

    def final_test_accuracy(self) -> float:
        if not self.epochs:
            raise ParameterError("log holds no completed epochs")
        return self.epochs[-1]["test_acc"]

    def dropout_mac_ratio(self) -> float:
        """Performed/dense MAC ratio over the dropout-eligible products."""
        performed = sum(r["macs_dropout"] for r in self.iterations)
        dense = sum(r["macs_dropout_dense"] for r in self.iterations)
        return performed / dense if dense else 1.0


def _iterate_batches(count: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(count) if rng is None else rng.permutation(count)
    for start in range(0, count - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def evaluate(model: Model, inputs: np.ndarray, labels: np.ndarray,
             batch_size: int = 256, flat: bool = False) -> tuple[float, float]:
    """(mean loss, accuracy) without dropout or gradient work."""
    total, correct, loss_sum = 0, 0, 0.0
    ctx = StepContext(training=False)
    for start in range(0, inputs.shape[0], batch_size):
        chunk = inputs[start : start + batch_size]
        y = labels[start : start + batch_size]
        x = chunk.reshape(chunk.shape[0], -1).T if flat else chunk
        loss, probs = model.head.forward(model.forward(x, ctx), y)
        pred = probs.argmax(axis=0)
        correct += int((pred == y).sum())
        loss_sum += loss * y.size
        total += y.size
    return loss_sum / total, correct / total


def _train_classifier(model: Model, cfg: TrainConfig, dataset: ImageDataset,
                      flat: bool, schedule: RatioSchedule | None = None,
                      weight_drop: float = 0.0) -> TrainLog:
    shuffle_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(cfg.seed).spawn(3)[2]))
    wdrop_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(cfg.seed).spawn(4)[3]))
    optimizer = SgdMomentum(model.params(), cfg.learning_rate, cfg.momentum)
    log = TrainLog()
    train_x = dataset.flat_train() if flat else dataset.train_x
    test_x = dataset.flat_test() if flat else dataset.test_x
    for epoch in range(1, cfg.epochs + 1):
        ratio = schedule.ratio_at(min(epoch, schedule.total_epochs)) if schedule else None
        epoch_macs = MacCounter()
        epoch_loss, epoch_correct, epoch_count = 0.0, 0, 0
        t_epoch = time.perf_counter_ns()
        for it, idx in enumerate(_iterate_batches(train_x.shape[0], cfg.batch_size,
                                                  shuffle_rng)):
            xb = train_x[idx].T if flat else train_x[idx]
            yb = dataset.train_y[idx]
            ctx = StepContext(training=True, dropout_ratio=ratio)
            t0 = time.perf_counter_ns()
            saved = None
            if weight_drop > 0.0:
                saved = []
                for param, _ in model.params():
                    if param.ndim >= 2:  # weights, not biases
                        saved.append((param, param.copy()))
                        param *= wdrop_rng.random(param.shape) >= weight_drop
            loss, probs = model.head.forward(model.forward(xb, ctx), yb)
            model.backward(model.head.backward(), ctx)
            if saved is not None:
                for param, copy in saved:
                    param[:] = copy
            optimizer.step()
            wall = time.perf_counter_ns() - t0
            acc = float((probs.argmax(axis=0) == yb).mean())
            log.iterations.append({
                "epoch": epoch, "iter": it, "loss": loss, "acc": acc,
                "macs": ctx.macs.performed, "macs_dense": ctx.macs.dense,
                "macs_dropout": ctx.macs.dropout_performed,
                "macs_dropout_dense": ctx.macs.dropout_dense,
                "wall_ns": wall,
            })
            epoch_macs.add(ctx.macs.performed, ctx.macs.dense, False)
            epoch_macs.dropout_performed += ctx.macs.dropout_performed
            epoch_macs.dropout_dense += ctx.macs.dropout_dense
            epoch_loss += loss * yb.size
            epoch_correct += int((probs.argmax(axis=0) == yb).sum())
            epoch_count += yb.size
        test_loss, test_acc = evaluate(model, test_x, dataset.test_y, flat=flat)
        log.epochs.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(epoch_count, 1),
            "train_acc": epoch_correct / max(epoch_count, 1),
            "test_loss": test_loss,
            "test_acc": test_acc,
            "dropout_ratio": ratio,
            "macs": epoch_macs.performed, "macs_dense": epoch_macs.dense,
            "macs_dropout": epoch_macs.dropout_performed,
            "macs_dropout_dense": epoch_macs.dropout_dense,
            "wall_ns": time.perf_counter_ns() - t_epoch,
        })
    return log


def train_mlp(spec: ModelSpec, cfg: TrainConfig, dataset: ImageDataset) -> TrainLog:
    if spec.kind != "mlp":
        raise ParameterError(f"expected an mlp spec, got {spec.kind!r}")
    model = Model(spec, cfg.seed)
    return _train_classifier(model, cfg, dataset, flat=True)


def train_cnn(spec: ModelSpec, cfg: TrainConfig, dataset: ImageDataset,
              schedule: RatioSchedule | None = None) -> TrainLog:
    if spec.kind != "cnn":
        raise ParameterError(f"expected a cnn spec, got {spec.kind!r}")
    model = Model(spec, cfg.seed)
    return _train_classifier(model, cfg, dataset, flat=False, schedule=schedule)


def _one_hot(ids: np.ndarray, vocab: int) -> np.ndarray:
    # ids: (seq, batch) -> (seq, vocab, batch)
    seq, batch = ids.shape
    out = np.zeros((seq, vocab, batch), dtype=default_dtype())
    out[np.arange(seq)[:, None], ids, np.arange(batch)[None, :]] = 1.0
    return out


class SequenceModel:
    """LSTM over character sequences with a per-step dense softmax head."""

    def __init__(self, spec: ModelSpec, seed: int):
        if spec.kind != "lstm" or spec.layers[0].kind != "lstm":
            raise ParameterError("sequence model needs an lstm spec")
        base = Model(spec, seed)
        self.spec = spec
        self.lstm: LstmLayer = base.layers[0]
        self.out: DenseLayer = base.layers[-1]
        self.head = SoftmaxCrossEntropy()
        self._base = base

    def params(self):
        return self._base.params()

    def forward_logits(self, x_seq: np.ndarray, ctx: StepContext) -> np.ndarray:
        h_seq = self.lstm.forward(x_seq, ctx)
        seq, hidden, batch = h_seq.shape
        self._hb = (seq, hidden, batch)
        return self.out.forward(h_seq.transpose(1, 0, 2).reshape(hidden, -1), ctx)

    def backward(self, d_logits: np.ndarray, ctx: StepContext) -> None:
        seq, hidden, batch = self._hb
        d_flat = self.out.backward(d_logits, ctx)
        self.lstm.backward(d_flat.reshape(hidden, seq, batch).transpose(1, 0, 2), ctx)


def lstm_perplexity(model: SequenceModel, ids: np.ndarray, vocab: int,
                    seq_len: int = 32, batch: int = 32) -> tuple[float, float]:
    """(perplexity, token accuracy) over a corpus slice, dropout disabled."""
    ctx = StepContext(training=False)
    batch = max(1, min(batch, (ids.size - 1) // seq_len))
    chunk = seq_len * batch
    usable = (ids.size - 1) // chunk * chunk
    if usable == 0:
        raise ParameterError("corpus slice too short for evaluation")
    x_ids = ids[:usable].reshape(-1, batch, seq_len)
    y_ids = ids[1 : usable + 1].reshape(-1, batch, seq_len)
    loss_sum, correct, total = 0.0, 0, 0
    for c in range(x_ids.shape[0]):
        xb = _one_hot(x_ids[c].T, vocab)
        yb = y_ids[c].T.ravel()
        loss, probs = model.head.forward(model.forward_logits(xb, ctx), yb)
        correct += int((probs.argmax(axis=0) == yb).sum())
        loss_sum += loss * yb.size
        total += yb.size
    mean_loss = loss_sum / total
    return float(np.exp(mean_loss)), correct / total


def train_lstm(spec: ModelSpec, cfg: TrainConfig, dataset: TextDataset,
               seq_len: int = 32, iters_per_epoch: int = 100,
               test_fraction: float = 0.1) -> TrainLog:
    """Next-character training; epoch summaries report test perplexity."""
    if spec.kind != "lstm":
        raise ParameterError(f"expected an lstm spec, got {spec.kind!r}")
    model = SequenceModel(spec, cfg.seed)
    split = int(dataset.data.size * (1.0 - test_fraction))
    train_ids, test_ids = dataset.data[:split], dataset.data[split:]
    if train_ids.size <= seq_len + 1:
        raise ParameterError("corpus too short for the sequence length")
    batch_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(cfg.seed).spawn(3)[2]))
    optimizer = SgdMomentum(model.params(), cfg.learning_rate, cfg.momentum)
    vocab = dataset.vocab_size
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        epoch_macs = MacCounter()
        epoch_loss, epoch_correct, epoch_count = 0.0, 0, 0
        t_epoch = time.perf_counter_ns()
        for it in range(iters_per_epoch):
            starts = batch_rng.integers(0, train_ids.size - seq_len - 1,
                                        size=cfg.batch_size)
            window = starts[:, None] + np.arange(seq_len + 1)
            chunk = train_ids[window]
            xb = _one_hot(chunk[:, :-1].T, vocab)
            yb = chunk[:, 1:].T.ravel()
            ctx = StepContext(training=True)
            t0 = time.perf_counter_ns()
            loss, probs = model.head.forward(model.forward_logits(xb, ctx), yb)
            model.backward(model.head.backward(), ctx)
            optimizer.step()
            wall = time.perf_counter_ns() - t0
            acc = float((probs.argmax(axis=0) == yb).mean())
            log.iterations.append({
                "epoch": epoch, "iter": it, "loss": loss, "acc": acc,
                "macs": ctx.macs.performed, "macs_dense": ctx.macs.dense,
                "macs_dropout": ctx.macs.dropout_performed,
                "macs_dropout_dense": ctx.macs.dropout_dense,
                "wall_ns": wall,
            })
            epoch_macs.add(ctx.macs.performed, ctx.macs.dense, False)
            epoch_macs.dropout_performed += ctx.macs.dropout_performed
            epoch_macs.dropout_dense += ctx.macs.dropout_dense
            epoch_loss += loss * yb.size
            epoch_correct += int((probs.argmax(axis=0) == yb).sum())
            epoch_count += yb.size
        perplexity, test_acc = lstm_perplexity(model, test_ids, vocab, seq_len)
        log.epochs.append({
            "epoch": epoch,
            "train_loss": epoch_loss / max(epoch_count, 1),
            "train_acc": epoch_correct / max(epoch_count, 1),
            "test_perplexity": perplexity,
            "test_acc": test_acc,
            "macs": epoch_macs.performed, "macs_dense": epoch_macs.dense,
            "macs_dropout": epoch_macs.dropout_performed,
            "macs_dropout_dense": epoch_macs.dropout_dense,
            "wall_ns": time.perf_counter_ns() - t_epoch,
        })
    return log


def _input_value_ablation(fraction: float):
    def mask_fn(x, rng):
        return (rng.random(x.shape) >= fraction).astype(x.dtype)

    return mask_fn


def _magnitude_part_ablation(parts: int, target_part: int, rate: float):
    def mask_fn(x, rng):
        labels = partition_by_magnitude(x, parts)
        drop = (labels == target_part) & (rng.random(x.shape) < rate)
        return (~drop).astype(x.dtype)

    return mask_fn


def ablate_weight_vs_input(spec: ModelSpec, cfg: TrainConfig,
                           dataset: ImageDataset, drop_fraction: float) -> dict:
    """Paired runs dropping (a) random weights, (b) random conv-input values
    at the same fraction each iteration; returns both logs for comparison."""
    if not 0.0 <= drop_fraction < 1.0:
        raise ParameterError("drop_fraction must lie in [0, 1)")
    flat = spec.kind == "mlp"
    weight_model = Model(spec, cfg.seed)
    weight_log = _train_classifier(weight_model, cfg, dataset, flat=flat,
                                   weight_drop=drop_fraction)
    input_model = Model(spec, cfg.seed)
    if drop_fraction > 0.0:
        for conv in input_model.conv_layers():
            conv.input_ablation = _input_value_ablation(drop_fraction)
    input_log = _train_classifier(input_model, cfg, dataset, flat=flat)
    return {"weight": weight_log, "input": input_log}


def ablate_magnitude_parts(spec: ModelSpec, cfg: TrainConfig, dataset: ImageDataset,
                           parts: int, target_part: int, rate: float) -> TrainLog:
    """Train while dropping `rate` of the conv-input values whose magnitude
    falls in `target_part` (1 = largest); the per-part accuracy comparison
    reproduces the magnitude-sensitivity study."""
    if not 1 <= target_part <= parts:
        raise ParameterError(f"target_part must lie in [1, {parts}]")
    model = Model(spec, cfg.seed)
    if rate > 0.0:
        for conv in model.conv_layers():
            conv.input_ablation = _magnitude_part_ablation(parts, target_part, rate)
    return _train_classifier(model, cfg, dataset, flat=False)

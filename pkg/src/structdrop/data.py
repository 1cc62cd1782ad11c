"""Dataset plumbing: IDX-format image/label files, synthetic stand-ins.

The synthetic image set mimics the MNIST layout (28x28 uint8 grayscale, ten
classes) so the IDX reader/writer and the training paths exercise the same
code that real files would.  Classes are smooth random prototypes with
additive noise and small translations; difficulty is controlled by the
noise level.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import default_dtype, make_rng

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


def _open(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def write_idx_images(images: np.ndarray, path) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ShapeError("images must be uint8 with shape (count, rows, cols)")
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", _IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be a flat vector")
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">II", _LABEL_MAGIC, labels.size))
        fh.write(labels.astype(np.uint8).tobytes())


def _read_header(fh, fmt, path):
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise ShapeError(f"{path}: truncated header")
    return struct.unpack(fmt, raw)


def read_idx_images(path) -> np.ndarray:
    with _open(path, "rb") as fh:
        magic, count, rows, cols = _read_header(fh, ">IIII", path)
        if magic != _IMAGE_MAGIC:
            raise ShapeError(f"{path}: bad image magic 0x{magic:08x}")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != count * rows * cols:
        raise ShapeError(f"{path}: truncated image payload")
    return data.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(path, "rb") as fh:
        magic, count = _read_header(fh, ">II", path)
        if magic != _LABEL_MAGIC:
            raise ShapeError(f"{path}: bad label magic 0x{magic:08x}")
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != count:
        raise ShapeError(f"{path}: truncated label payload")
    return data.copy()


@dataclass
class ImageDataset:
    """Train/test split with images scaled to [0, 1] floats."""

    train_x: np.ndarray  # (N, 1, H, W)
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.train_x.shape[1:]

    def flat_train(self) -> np.ndarray:
        return self.train_x.reshape(self.train_x.shape[0], -1)

    def flat_test(self) -> np.ndarray:
        return self.test_x.reshape(self.test_x.shape[0], -1)


def load_idx_dataset(train_images, train_labels, test_images, test_labels) -> ImageDataset:
    def prep(path):
        imgs = read_idx_images(path)
        return (imgs.astype(default_dtype()) / 255.0)[:, None]

    return ImageDataset(prep(train_images), read_idx_labels(train_labels).astype(np.int64),
                        prep(test_images), read_idx_labels(test_labels).astype(np.int64))


def _prototypes(rng, classes: int, side: int) -> np.ndarray:
    coarse = rng.standard_normal((classes, side // 4, side // 4))
    protos = np.kron(coarse, np.ones((4, 4)))
    # light neighbor smoothing to avoid blocky, trivially separable edges
    smooth = protos.copy()
    smooth[:, 1:] += protos[:, :-1]
    smooth[:, :-1] += protos[:, 1:]
    smooth[:, :, 1:] += protos[:, :, :-1]
    smooth[:, :, :-1] += protos[:, :, 1:]
    smooth /= 5.0
    lo = smooth.min(axis=(1, 2), keepdims=True)
    hi = smooth.max(axis=(1, 2), keepdims=True)
    return (smooth - lo) / (hi - lo)


def synthetic_images(count: int, sample_rng: np.random.Generator,
                     protos: np.ndarray, noise: float = 0.25,
                     max_shift: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Draw MNIST-layout uint8 images around the given class prototypes."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    classes = protos.shape[0]
    labels = sample_rng.integers(0, classes, size=count)
    images = protos[labels] * 0.9
    images += noise * sample_rng.standard_normal(images.shape)
    shifts = sample_rng.integers(-max_shift, max_shift + 1, size=(count, 2))
    for i in range(count):
        images[i] = np.roll(images[i], tuple(shifts[i]), axis=(0, 1))
    images = np.clip(images, 0.0, 1.0)
    return (images * 255).astype(np.uint8), labels.astype(np.uint8)


def _synthetic_splits(train_count, test_count, seed, noise, classes, side):
    # one prototype set shared by both splits; sample noise streams differ
    proto_seq, train_seq, test_seq = np.random.SeedSequence(seed).spawn(3)
    protos = _prototypes(np.random.Generator(np.random.PCG64(proto_seq)), classes, side)
    train = synthetic_images(train_count, np.random.Generator(np.random.PCG64(train_seq)),
                             protos, noise)
    test = synthetic_images(test_count, np.random.Generator(np.random.PCG64(test_seq)),
                            protos, noise)
    return train, test


def synthetic_dataset(train_count: int, test_count: int, seed: int,
                      noise: float = 0.25, classes: int = 10,
                      side: int = 28) -> ImageDataset:
    (train_imgs, train_y), (test_imgs, test_y) = _synthetic_splits(
        train_count, test_count, seed, noise, classes, side)
    dt = default_dtype()
    return ImageDataset(
        (train_imgs.astype(dt) / 255.0)[:, None], train_y.astype(np.int64),
        (test_imgs.astype(dt) / 255.0)[:, None], test_y.astype(np.int64),
    )


def write_synthetic_idx(out_dir, train_count: int, test_count: int, seed: int,
                        noise: float = 0.25) -> dict:
    """Materialize the synthetic set as four IDX files; returns their paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte",
        "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    (train_imgs, train_y), (test_imgs, test_y) = _synthetic_splits(
        train_count, test_count, seed, noise, 10, 28)
    write_idx_images(train_imgs, paths["train_images"])
    write_idx_labels(train_y, paths["train_labels"])
    write_idx_images(test_imgs, paths["test_images"])
    write_idx_labels(test_y, paths["test_labels"])
    return {k: str(v) for k, v in paths.items()}


@dataclass
class TextDataset:
    """Character corpus with a fixed vocabulary for next-char prediction."""

    data: np.ndarray        # int64 char ids
    vocab: str

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


def load_text(path) -> TextDataset:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    vocab = "".join(sorted(set(text)))
    lookup = {ch: i for i, ch in enumerate(vocab)}
    ids = np.fromiter((lookup[c] for c in text), dtype=np.int64, count=len(text))
    return TextDataset(ids, vocab)


def synthetic_text(length: int, seed: int, vocab_size: int = 24) -> TextDataset:
    """Markov-chain corpus: each symbol prefers a few successors, giving the
    model real structure to learn without any external data."""
    rng = make_rng(seed)
    vocab = "abcdefghijklmnopqrstuvwxyz .,"[:vocab_size]
    trans = np.full((vocab_size, vocab_size), 0.04)
    for i in range(vocab_size):
        favored = rng.choice(vocab_size, size=3, replace=False)
        trans[i, favored] += rng.random(3) * 4.0
    trans /= trans.sum(axis=1, keepdims=True)
    ids = np.empty(length, dtype=np.int64)
    state = int(rng.integers(vocab_size))
    for t in range(length):
        state = int(rng.choice(vocab_size, p=trans[state]))
        ids[t] = state
    return TextDataset(ids, vocab)


def save_text(dataset: TextDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(dataset.vocab[i] for i in dataset.data))

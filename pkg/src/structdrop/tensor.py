"""Dense-matrix substrate: dtype policy, GEMM, im2col, seeded RNG, matrix I/O.

Matrices are plain 2-D numpy arrays in row-major (C) order.  The element
type is a package-wide setting (float64 by default, float32 selectable)
so the numeric paths and their oracles agree on precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

_DTYPE = np.float64


def default_dtype():
    """Current element dtype for matrices created by this package."""
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Select float32 or float64 as the package-wide matrix element type."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ParameterError(f"matrix dtype must be float32 or float64, got {dt}")
    _DTYPE = dt.type


def as_matrix(a, dtype=None) -> np.ndarray:
    """Validate/convert `a` to a 2-D C-contiguous matrix of the build dtype."""
    m = np.ascontiguousarray(a, dtype=dtype or _DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix dims must be >= 1, got {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) with a platform-stable stream."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive `n` independent child generators from the current rng state."""
    root = int(rng.integers(0, 2**63 - 1))
    seqs = np.random.SeedSequence(root).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product a @ b with shape checking.

    Accumulation is delegated to the BLAS backing numpy; for a fixed build
    and thread count the result is bit-stable across calls, which the tests
    pin.  Oracle comparisons against a naive k-inner triple loop hold to
    1e-5 relative in float64.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"gemm: inner dims differ, {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class ConvShape:
    """Geometry of one convolution: C x H x W input, C_out filters of size K."""

    channels: int
    height: int
    width: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("channels", "height", "width", "out_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ParameterError(f"ConvShape.{name} must be >= 1")
        if self.padding < 0:
            raise ParameterError("ConvShape.padding must be >= 0")
        if self.out_height < 1 or self.out_width < 1:
            raise ShapeError(f"conv output dims collapse to zero for {self}")

    @property
    def out_height(self) -> int:
        return (self.height + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def patch_size(self) -> int:
        return self.channels * self.kernel * self.kernel


def im2col(x: np.ndarray, shape: ConvShape) -> np.ndarray:
    """Unroll a C x H x W tensor into an (out_h*out_w) x (C*K*K) matrix.

    Row r holds the receptive field of output position r (row-major over
    output positions).  Columns are channel-major, then kernel row, then
    kernel column; padding contributes zeros.
    """
    x = np.asarray(x, dtype=_DTYPE)
    if x.shape != (shape.channels, shape.height, shape.width):
        raise ShapeError(f"im2col: input shape {x.shape} does not match {shape}")
    return im2col_batch(x[None], shape)[0].reshape(
        shape.out_height * shape.out_width, shape.patch_size
    )


def im2col_batch(x: np.ndarray, shape: ConvShape) -> np.ndarray:
    """Batched im2col: (N, C, H, W) -> (N, out_h*out_w, C*K*K)."""
    x = np.asarray(x, dtype=_DTYPE)
    if x.ndim != 4 or x.shape[1:] != (shape.channels, shape.height, shape.width):
        raise ShapeError(f"im2col_batch: input shape {x.shape} does not match {shape}")
    n = x.shape[0]
    k, s, p = shape.kernel, shape.stride, shape.padding
    oh, ow = shape.out_height, shape.out_width
    if p > 0:
        x = np.pad(x, [(0, 0), (0, 0), (p, p), (p, p)])
    col = np.empty((n, shape.channels, k, k, oh, ow), dtype=_DTYPE)
    for ki in range(k):
        for kj in range(k):
            col[:, :, ki, kj] = x[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
    # (N, oh, ow, C, K, K) flattens to rows over positions, cols channel-major
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh * ow, shape.patch_size)


def col2im_batch(cols: np.ndarray, shape: ConvShape) -> np.ndarray:
    """Adjoint of im2col_batch: scatter-add patch rows back to (N, C, H, W)."""
    k, s, p = shape.kernel, shape.stride, shape.padding
    oh, ow = shape.out_height, shape.out_width
    n = cols.shape[0]
    if cols.shape != (n, oh * ow, shape.patch_size):
        raise ShapeError(f"col2im_batch: got {cols.shape}")
    col = cols.reshape(n, oh, ow, shape.channels, k, k).transpose(0, 3, 4, 5, 1, 2)
    hp, wp = shape.height + 2 * p, shape.width + 2 * p
    out = np.zeros((n, shape.channels, hp, wp), dtype=_DTYPE)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += col[:, :, ki, kj]
    if p > 0:
        out = out[:, :, p : p + shape.height, p : p + shape.width]
    return out


_MAGIC_HEADER = "<II"  # rows, cols as little-endian u32


def save_matrix(m: np.ndarray, path) -> None:
    """Write a matrix as little-endian f32 with an 8-byte (rows, cols) header."""
    m = as_matrix(m)
    with open(path, "wb") as fh:
        fh.write(struct.pack(_MAGIC_HEADER, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_matrix(path) -> np.ndarray:
    """Read a matrix written by save_matrix, converting to the build dtype."""
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ShapeError(f"{path}: truncated matrix header")
        rows, cols = struct.unpack(_MAGIC_HEADER, header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ShapeError(f"{path}: expected {rows * cols} values, got {data.size}")
    return data.reshape(rows, cols).astype(_DTYPE)


def load_matrix_csv(path) -> np.ndarray:
    """Read a comma-separated matrix (test fixture import path)."""
    return as_matrix(np.loadtxt(path, delimiter=",", ndmin=2))

"""Gather-compute-scatter masked matrix products with MAC accounting.

Kept rows (or tiles) of the left operand are gathered into contiguous
compact buffers, multiplied densely, and scattered back into a full-size
output whose dropped positions are zero.  Multiply-accumulate counts are
tracked so computation-reduction claims can be audited exactly.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, ParameterError, ShapeError
from .patterns import BinaryMask, PatternKind, mask_keep_fraction
from .tensor import as_matrix, default_dtype


@dataclass(frozen=True)
class CompactProduct:
    """Full-size product plus the MAC count actually performed."""

    output: np.ndarray
    macs_performed: int
    macs_dense: int

    def __post_init__(self):
        if self.macs_performed > self.macs_dense:
            raise InvariantError("performed MACs exceed the dense count")


class Workspace:
    """Grow-only scratch buffers so steady-state products stay allocation-free."""

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, name: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        size = int(np.prod(shape))
        buf = self._bufs.get(name)
        if buf is None or buf.size < size or buf.dtype != np.dtype(dtype):
            buf = np.empty(size, dtype=dtype)
            self._bufs[name] = buf
        return buf[:size].reshape(shape)


def gather_rows(a: np.ndarray, idx: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    return np.take(a, idx, axis=0, out=out)


def scatter_rows(rows: np.ndarray, idx: np.ndarray, total_rows: int,
                 out: np.ndarray | None = None) -> np.ndarray:
    if out is None:
        out = np.zeros((total_rows, rows.shape[1]), dtype=rows.dtype)
    else:
        out[:] = 0.0
    out[idx] = rows
    return out


def row_masked_matmul(weight: np.ndarray, inp: np.ndarray, mask: BinaryMask,
                      row_scale: np.ndarray | None = None,
                      workspace: Workspace | None = None) -> CompactProduct:
    """Product of `weight` (M x K) and `inp` (K x N) computing kept rows only.

    Output row i equals weight[i] @ inp for kept i and is zero otherwise.
    `row_scale`, when given, multiplies each kept row of the result (used by
    training paths for inverted-dropout scaling).
    """
    weight = as_matrix(weight)
    inp = as_matrix(inp)
    m, k = weight.shape
    if inp.shape[0] != k:
        raise ShapeError(f"inner dims differ: {weight.shape} x {inp.shape}")
    if mask.granularity is not PatternKind.ROW or mask.bits.size != m:
        raise ParameterError("mask must be row-granularity over the weight rows")
    n = inp.shape[1]
    macs_dense = m * k * n
    if mask.kept_count == m and row_scale is None:
        if workspace is not None:
            out = np.matmul(weight, inp, out=workspace.get("out", (m, n), weight.dtype))
        else:
            out = weight @ inp
        return CompactProduct(out, macs_dense, macs_dense)
    idx = mask.kept_indices()
    if workspace is not None:
        compact = gather_rows(weight, idx, workspace.get("gather", (idx.size, k), weight.dtype))
        prod = np.matmul(compact, inp, out=workspace.get("prod", (idx.size, n), weight.dtype))
    else:
        compact = gather_rows(weight, idx)
        prod = compact @ inp
    if row_scale is not None:
        prod *= np.asarray(row_scale, dtype=prod.dtype)[idx, None]
    out = workspace.get("out", (m, n), weight.dtype) if workspace is not None else None
    out = scatter_rows(prod, idx, m, out)
    return CompactProduct(out, idx.size * k * n, macs_dense)


def _tile_spans(mask: BinaryMask) -> tuple[int, int, int, int]:
    gr, gc = mask.grid_shape()
    return gr, gc, mask.tile.rows, mask.tile.cols


def tile_masked_matmul(weight: np.ndarray, other: np.ndarray, mask: BinaryMask,
                       tile_scale: np.ndarray | None = None) -> CompactProduct:
    """Product with dropped tiles of `weight` (M x Kw) treated as zero blocks.

    For each tile-row band the kept tiles are gathered into one compact
    weight slab and the matching row blocks of `other` into a compact
    operand, one dense multiply per band (tile-index ascending, pinned).
    Ragged trailing rows/columns fall outside the tile grid and always
    contribute.  `tile_scale` (flat, per tile) multiplies kept blocks.
    """
    weight = as_matrix(weight)
    other = as_matrix(other)
    m, kw = weight.shape
    if other.shape[0] != kw:
        raise ShapeError(f"inner dims differ: {weight.shape} x {other.shape}")
    if mask.granularity is not PatternKind.TILE:
        raise ParameterError("mask must be tile-granularity")
    if (mask.rows, mask.cols) != (m, kw):
        raise ShapeError(f"mask geometry {(mask.rows, mask.cols)} != weight {weight.shape}")
    n = other.shape[1]
    macs_dense = m * kw * n
    if mask.bits.size == 0:  # matrix smaller than one tile: nothing droppable
        return CompactProduct(weight @ other, macs_dense, macs_dense)
    if tile_scale is None and bool(mask.bits.all()):
        return CompactProduct(weight @ other, macs_dense, macs_dense)
    gr, gc, tr, tc = _tile_spans(mask)
    bits = mask.bits.reshape(gr, gc)
    out = np.zeros((m, n), dtype=weight.dtype)
    macs = 0
    row_edge = gr * tr   # first ragged row / col
    col_edge = gc * tc
    scale = None if tile_scale is None else np.asarray(tile_scale, dtype=weight.dtype).reshape(gr, gc)
    # bands sharing the same kept-column set (regular patterns have at most
    # `period` distinct sets) are stacked into one compact weight slab and
    # multiplied against one gathered operand, so each band costs a single
    # fat GEMM; within a band the kept tiles contribute in ascending order
    classes, inverse = np.unique(bits, axis=0, return_inverse=True)
    arange_tr = np.arange(tr)
    for ci in range(classes.shape[0]):
        kept = np.flatnonzero(classes[ci])
        if kept.size == 0:
            continue
        bands = np.flatnonzero(inverse == ci)
        rows_idx = (bands[:, None] * tr + arange_tr).ravel()
        wrows = np.take(weight, rows_idx, axis=0)
        slab = np.empty((rows_idx.size, kept.size * tc), dtype=weight.dtype)
        oth = np.empty((kept.size * tc, n), dtype=other.dtype)
        for t, j in enumerate(kept):  # contiguous block copies per kept tile
            slab[:, t * tc : (t + 1) * tc] = wrows[:, j * tc : (j + 1) * tc]
            oth[t * tc : (t + 1) * tc] = other[j * tc : (j + 1) * tc]
        if scale is not None:
            sc = np.repeat(np.repeat(scale[np.ix_(bands, kept)], tr, axis=0),
                           tc, axis=1)
            slab *= sc
        prod = slab @ oth
        for i, band in enumerate(bands):
            out[band * tr : (band + 1) * tr] = prod[i * tr : (i + 1) * tr]
        macs += bands.size * kept.size * tr * tc * n
    if col_edge < kw:  # ragged columns are always kept, all bands
        out[: gr * tr] += weight[: gr * tr, col_edge:] @ other[col_edge:]
        macs += gr * tr * (kw - col_edge) * n
    if row_edge < m:  # ragged rows are always kept, full width
        out[row_edge:] = weight[row_edge:] @ other
        macs += (m - row_edge) * kw * n
    return CompactProduct(out, macs, macs_dense)


def apply_output_pattern(compact_rows: np.ndarray, mask: BinaryMask) -> np.ndarray:
    """Scatter compact rows back to their original indices, zero elsewhere."""
    compact_rows = as_matrix(compact_rows)
    if mask.granularity is not PatternKind.ROW:
        raise ParameterError("apply_output_pattern requires a row mask")
    if compact_rows.shape[0] != mask.kept_count:
        raise ShapeError(
            f"got {compact_rows.shape[0]} compact rows for {mask.kept_count} kept slots"
        )
    return scatter_rows(compact_rows, mask.kept_indices(), mask.bits.size)


def resolve_threads(cli_value: int | None = None) -> int | None:
    """Thread count from flag, else MASKGEMM_THREADS, else library default."""
    if cli_value is not None:
        return cli_value
    env = os.environ.get("MASKGEMM_THREADS")
    return int(env) if env else None


BENCH_COLUMNS = ["M", "K", "N", "granularity", "keep_fraction", "macs_performed",
                 "macs_dense", "wall_ns_masked", "wall_ns_dense", "speedup"]


def bench_masked_matmul(m: int, k: int, n: int, mask: BinaryMask,
                        reps: int = 3, rng: np.random.Generator | None = None,
                        threads: int | None = None) -> dict:
    """Median wall time of the masked product vs. the dense product.

    Returns one CSV-ready row.  Buffers are preallocated and reused so the
    timings measure gather+multiply+scatter, not allocation.
    """
    rng = rng or np.random.default_rng(0)
    dt = default_dtype()
    weight = rng.standard_normal((m, k)).astype(dt)
    inp = rng.standard_normal((k, n)).astype(dt)
    ws = Workspace()

    def run_masked():
        if mask.granularity is PatternKind.ROW:
            return row_masked_matmul(weight, inp, mask, workspace=ws)
        return tile_masked_matmul(weight, inp, mask)

    from threadpoolctl import threadpool_limits

    dense_out = np.empty((m, n), dtype=dt)  # parity: dense path is allocation-free too
    masked_ns, dense_ns = [], []
    with threadpool_limits(limits=threads):
        run_masked()  # warm up buffers and BLAS
        np.matmul(weight, inp, out=dense_out)
        for _ in range(reps):  # interleaved so load drift hits both sides
            t0 = time.perf_counter_ns()
            product = run_masked()
            masked_ns.append(time.perf_counter_ns() - t0)
            t0 = time.perf_counter_ns()
            np.matmul(weight, inp, out=dense_out)
            dense_ns.append(time.perf_counter_ns() - t0)
    wall_masked = int(np.median(masked_ns))
    wall_dense = int(np.median(dense_ns))
    return {
        "M": m, "K": k, "N": n,
        "granularity": mask.granularity.value,
        "keep_fraction": mask_keep_fraction(mask),
        "macs_performed": product.macs_performed,
        "macs_dense": product.macs_dense,
        "wall_ns_masked": wall_masked,
        "wall_ns_dense": wall_dense,
        "speedup": wall_dense / wall_masked,
    }


def write_bench_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

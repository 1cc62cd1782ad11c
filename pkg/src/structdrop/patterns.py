"""Regular row/tile dropout patterns and the binary keep/drop masks they induce.

A pattern is (kind, period, offset): within every `period` consecutive units
(rows, or tiles in row-major grid order) exactly one is kept, selected by the
1-based `offset`.  Indexing is 1-based in the public contract; internals
convert to 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ParameterError, ShapeError


class PatternKind(str, Enum):
    ROW = "row"
    TILE = "tile"


@dataclass(frozen=True)
class TileConfig:
    """Tile geometry for tile-granularity masks; 32x32 balances sub-model
    count against the 32-lane layout the compact kernels are modeled on."""

    rows: int = 32
    cols: int = 32

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ParameterError(f"tile dims must be >= 1, got {self}")


@dataclass(frozen=True)
class DropoutPattern:
    kind: PatternKind
    period: int
    offset: int

    def __post_init__(self):
        if self.period < 1:
            raise ParameterError(f"period must be >= 1, got {self.period}")
        if not 1 <= self.offset <= self.period:
            raise ParameterError(
                f"offset must lie in [1, {self.period}], got {self.offset}"
            )


@dataclass(frozen=True)
class BinaryMask:
    """Keep/drop flags at row or tile granularity over an M x N matrix.

    `bits[i]` is True where the unit is kept.  Tile bits run row-major over
    the grid of full tiles; ragged trailing rows/columns are outside the
    grid and are always kept by the consumers of the mask.
    """

    granularity: PatternKind
    bits: np.ndarray
    rows: int
    cols: int
    tile: TileConfig | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        object.__setattr__(self, "bits", bits)
        if bits.ndim != 1:
            raise ShapeError("mask bits must be a flat vector")
        if self.granularity is PatternKind.ROW:
            expected = self.rows
        else:
            if self.tile is None:
                raise ParameterError("tile-granularity mask requires a TileConfig")
            expected = (self.rows // self.tile.rows) * (self.cols // self.tile.cols)
        if bits.size != expected:
            raise ShapeError(f"mask has {bits.size} bits, expected {expected}")
        # zero bits is legal only for a tile grid with no full tile: the whole
        # matrix is ragged edge and implicitly kept
        if bits.size > 0 and not bits.any():
            raise ParameterError("all-drop masks are rejected")

    @property
    def kept_count(self) -> int:
        return int(self.bits.sum())

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def grid_shape(self) -> tuple[int, int]:
        if self.granularity is not PatternKind.TILE:
            raise ParameterError("grid_shape is defined for tile masks only")
        return (self.rows // self.tile.rows, self.cols // self.tile.cols)


def pattern_space(kind: PatternKind, rows: int, cols: int = 1,
                  tile: TileConfig = TileConfig()) -> int:
    """Largest admissible period for a matrix of the given dims.

    Row granularity: the row count.  Tile granularity: the number of full
    tiles in the grid, clamped to >= 1 so degenerate small matrices still
    admit the identity pattern.
    """
    if rows < 1 or cols < 1:
        raise ShapeError("matrix dims must be >= 1")
    if kind is PatternKind.ROW:
        return rows
    return max(1, (rows // tile.rows) * (cols // tile.cols))


def _keep_bits(period: int, offset: int, count: int) -> np.ndarray:
    # unit i (1-based) kept iff (i - offset) mod period == 0
    idx = np.arange(1, count + 1)
    return (idx - offset) % period == 0


def row_mask(period: int, offset: int, rows: int) -> BinaryMask:
    """Keep row i (1-based) iff (i - offset) mod period == 0."""
    if not 1 <= offset <= period:
        raise ParameterError(f"offset must lie in [1, {period}], got {offset}")
    if period > rows:
        raise ParameterError(f"period {period} exceeds row count {rows}")
    return BinaryMask(PatternKind.ROW, _keep_bits(period, offset, rows), rows, 1)


def tile_mask(period: int, offset: int, rows: int, cols: int,
              tile: TileConfig = TileConfig()) -> BinaryMask:
    """Keep tile t (1-based, row-major grid order) iff (t - offset) mod period == 0."""
    if not 1 <= offset <= period:
        raise ParameterError(f"offset must lie in [1, {period}], got {offset}")
    space = pattern_space(PatternKind.TILE, rows, cols, tile)
    if period > space:
        raise ParameterError(f"period {period} exceeds tile count {space}")
    n_tiles = (rows // tile.rows) * (cols // tile.cols)
    bits = _keep_bits(period, offset, n_tiles)
    return BinaryMask(PatternKind.TILE, bits, rows, cols, tile)


def mask_from_pattern(pattern: DropoutPattern, rows: int, cols: int = 1,
                      tile: TileConfig = TileConfig()) -> BinaryMask:
    if pattern.kind is PatternKind.ROW:
        return row_mask(pattern.period, pattern.offset, rows)
    return tile_mask(pattern.period, pattern.offset, rows, cols, tile)


def mask_keep_fraction(mask: BinaryMask) -> float:
    """Fraction of units kept (1 minus the dropped proportion)."""
    if mask.bits.size == 0:
        return 1.0  # degenerate grid: no unit is droppable
    return mask.kept_count / mask.bits.size


def save_mask(mask: BinaryMask, path) -> None:
    """Bit-packed bytes at `path`, JSON geometry sidecar at `path`.json."""
    with open(path, "wb") as fh:
        fh.write(np.packbits(mask.bits).tobytes())
    sidecar = {
        "granularity": mask.granularity.value,
        "M": mask.rows,
        "N": mask.cols,
        "tile_x": mask.tile.rows if mask.tile else None,
        "tile_y": mask.tile.cols if mask.tile else None,
        "bit_count": int(mask.bits.size),
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_mask(path) -> BinaryMask:
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    with open(path, "rb") as fh:
        packed = np.frombuffer(fh.read(), dtype=np.uint8)
    bits = np.unpackbits(packed)[: meta["bit_count"]].astype(bool)
    tile = None
    if meta["tile_x"] is not None:
        tile = TileConfig(meta["tile_x"], meta["tile_y"])
    return BinaryMask(PatternKind(meta["granularity"]), bits, meta["M"], meta["N"], tile)

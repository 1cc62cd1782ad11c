"""Sensitivity-aware dropout over unrolled convolution input matrices.

The input matrix is split into regions; each region is probed by sampling a
fraction of its values against a threshold and voting, which labels it
sensitive (low drop probability) or insensitive (high drop probability).
Row- and block-level selectors then draw the actual keep/drop mask, the
block selector balancing kept blocks across row bands so parallel workers
see even workloads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .patterns import BinaryMask, PatternKind, TileConfig


@dataclass(frozen=True)
class SensitivityConfig:
    """Prediction and selection knobs; value_threshold None means the
    training path substitutes a running mean of |values| per layer."""

    region_rows: int = 8
    region_cols: int = 8
    sample_fraction: float = 0.3
    vote_threshold: float = 0.5
    value_threshold: float | None = None
    drop_prob_sensitive: float = 0.1
    drop_prob_insensitive: float = 0.5

    def __post_init__(self):
        if self.region_rows < 1 or self.region_cols < 1:
            raise ParameterError("region dims must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ParameterError("sample_fraction must lie in (0, 1]")
        if not 0.0 < self.vote_threshold <= 1.0:
            raise ParameterError("vote_threshold must lie in (0, 1]")
        for name in ("drop_prob_sensitive", "drop_prob_insensitive"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if not self.drop_prob_insensitive > self.drop_prob_sensitive:
            raise ParameterError(
                "insensitive regions must drop more often than sensitive ones"
            )


@dataclass(frozen=True)
class SensitivityMask:
    """Per-region sensitivity labels and drop probabilities for a matrix."""

    rows: int
    cols: int
    region_rows: int
    region_cols: int
    sensitive: np.ndarray    # bool, ceil(rows/region_rows) x ceil(cols/region_cols)
    drop_probs: np.ndarray   # float, same grid

    def __post_init__(self):
        sens = np.asarray(self.sensitive, dtype=bool)
        probs = np.asarray(self.drop_probs, dtype=np.float64)
        object.__setattr__(self, "sensitive", sens)
        object.__setattr__(self, "drop_probs", probs)
        grid = (math.ceil(self.rows / self.region_rows),
                math.ceil(self.cols / self.region_cols))
        if sens.shape != grid or probs.shape != grid:
            raise ShapeError(f"grid arrays must have shape {grid}")
        if (probs < 0).any() or (probs > 1).any():
            raise ParameterError("drop probabilities must lie in [0, 1]")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.sensitive.shape


def _vote_grid(vals: np.ndarray, keys: np.ndarray, x: int, y: int,
               cfg: SensitivityConfig) -> np.ndarray:
    """Sensitivity votes for a slab that tiles exactly into x-by-y regions."""
    fr, fc = vals.shape[0] // x, vals.shape[1] // y
    v = vals.reshape(fr, x, fc, y).transpose(0, 2, 1, 3).reshape(fr, fc, x * y)
    n_sample = math.ceil(cfg.sample_fraction * x * y)
    if n_sample >= x * y:
        sampled = v
    else:
        k = keys.reshape(fr, x, fc, y).transpose(0, 2, 1, 3).reshape(fr, fc, x * y)
        pick = np.argpartition(k, n_sample - 1, axis=2)[:, :, :n_sample]
        sampled = np.take_along_axis(v, pick, axis=2)
    frac_above = (sampled > cfg.value_threshold).mean(axis=2)
    return frac_above >= cfg.vote_threshold


def predict_sensitivity(matrix: np.ndarray, cfg: SensitivityConfig,
                        rng: np.random.Generator) -> SensitivityMask:
    """Label each region by sampling cfg.sample_fraction of its values.

    A region is sensitive when the sampled fraction exceeding
    cfg.value_threshold reaches cfg.vote_threshold.  Sampling is without
    replacement, realized as taking the values at the smallest entries of
    an i.i.d. uniform key matrix, so every region's draw is independent.
    Edge regions are smaller and use the same fraction.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ShapeError("sensitivity prediction requires a non-empty matrix")
    if cfg.value_threshold is None:
        raise ParameterError("prediction needs a concrete value_threshold")
    rows, cols = matrix.shape
    x, y = cfg.region_rows, cfg.region_cols
    gr, gc = math.ceil(rows / x), math.ceil(cols / y)
    keys = rng.random(matrix.shape)
    sensitive = np.zeros((gr, gc), dtype=bool)
    fr, fc = rows // x, cols // y          # full-size region counts
    rx, ry = rows - fr * x, cols - fc * y  # ragged remainders
    if fr and fc:
        sensitive[:fr, :fc] = _vote_grid(matrix[: fr * x, : fc * y],
                                         keys[: fr * x, : fc * y], x, y, cfg)
    if fr and ry:
        sensitive[:fr, fc:] = _vote_grid(matrix[: fr * x, fc * y :],
                                         keys[: fr * x, fc * y :], x, ry, cfg)
    if rx and fc:
        sensitive[fr:, :fc] = _vote_grid(matrix[fr * x :, : fc * y],
                                         keys[fr * x :, : fc * y], rx, y, cfg)
    if rx and ry:
        sensitive[fr:, fc:] = _vote_grid(matrix[fr * x :, fc * y :],
                                         keys[fr * x :, fc * y :], rx, ry, cfg)
    probs = np.where(sensitive, cfg.drop_prob_sensitive, cfg.drop_prob_insensitive)
    return SensitivityMask(rows, cols, cfg.region_rows, cfg.region_cols,
                           sensitive, probs)


def row_drop_probabilities(mask: SensitivityMask, n_rows: int) -> np.ndarray:
    """Per-row drop probability: the minimum over the regions a row crosses
    (conservative toward sensitivity when the grid does not align)."""
    if n_rows != mask.rows:
        raise ShapeError(f"mask covers {mask.rows} rows, asked for {n_rows}")
    band_probs = mask.drop_probs.min(axis=1)
    bands = np.arange(n_rows) // mask.region_rows
    return band_probs[bands]


def rsdp_select(mask: SensitivityMask, input_rows: np.ndarray,
                rng: np.random.Generator) -> BinaryMask:
    """Row-granularity keep/drop draw over the input matrix.

    Each row is dropped independently with its region-assigned probability.
    An all-drop draw is resampled once; if it recurs the largest-magnitude
    row is force-kept.
    """
    input_rows = np.asarray(input_rows)
    if input_rows.ndim != 2:
        raise ShapeError("input_rows must be the 2-D input matrix")
    n_rows = input_rows.shape[0]
    probs = row_drop_probabilities(mask, n_rows)
    keep = rng.random(n_rows) >= probs
    if not keep.any():
        keep = rng.random(n_rows) >= probs
    if not keep.any():
        keep[int(np.argmax(np.abs(input_rows).sum(axis=1)))] = True
    return BinaryMask(PatternKind.ROW, keep, n_rows, input_rows.shape[1])


def block_drop_probabilities(mask: SensitivityMask, rows: int, cols: int,
                             tile: TileConfig) -> np.ndarray:
    """Per-block drop probability over the full-tile grid; a block spanning
    several regions takes their minimum (conservative) probability."""
    gr, gc = rows // tile.rows, cols // tile.cols
    row_idx = np.arange(gr * tile.rows) // mask.region_rows
    row_min = mask.drop_probs[row_idx].reshape(gr, tile.rows, -1).min(axis=1)
    col_idx = np.arange(gc * tile.cols) // mask.region_cols
    return row_min[:, col_idx].reshape(gr, gc, tile.cols).min(axis=2)


def bsdp_select(mask: SensitivityMask, rows: int, cols: int, tile: TileConfig,
                rng: np.random.Generator) -> BinaryMask:
    """Block-granularity selection balanced across row-band groups.

    Blocks in the same tile row form a group (they feed the same output
    rows, hence the same workers).  The total keep budget is the rounded
    sum of per-block keep probabilities; it is split across groups as a
    common per-group budget +-1, extra units going to the groups with the
    most sensitive blocks.  Within a group, kept slots prefer high keep
    probability, ties broken by sampled priority.  Blocks whose drop
    probability is exactly zero are never dropped, even where that
    overflows the group budget; the overflow is then taken back from the
    lowest-priority groups so the total stays on budget.
    """
    if rows != mask.rows or cols != mask.cols:
        raise ShapeError("input dims do not match the sensitivity mask")
    gr, gc = rows // tile.rows, cols // tile.cols
    if gr * gc == 0:
        # matrix smaller than one block: nothing droppable
        return BinaryMask(PatternKind.TILE, np.ones(0, dtype=bool), rows, cols, tile)
    probs = block_drop_probabilities(mask, rows, cols, tile)
    keep_probs = 1.0 - probs
    forced = probs == 0.0
    total_budget = int(round(float(keep_probs.sum())))
    total_budget = max(1, min(total_budget, gr * gc))
    base, extra = divmod(total_budget, gr)

    # group priority: forced blocks, then mean keep probability, then rng
    tiebreak = rng.random(gr)
    priority = np.lexsort((tiebreak, keep_probs.sum(axis=1), forced.sum(axis=1)))[::-1]
    budgets = np.full(gr, base, dtype=int)
    budgets[priority[:extra]] += 1

    forced_counts = forced.sum(axis=1)
    overflow = int(np.maximum(forced_counts - budgets, 0).sum())
    budgets = np.maximum(budgets, forced_counts)
    for g in priority[::-1]:  # claw back from the lowest-priority groups
        if overflow <= 0:
            break
        reducible = budgets[g] - max(int(forced_counts[g]), 0)
        take = min(reducible, overflow)
        budgets[g] -= take
        overflow -= take

    # per-group descending order by (forced, keep probability, sampled key),
    # built from stable ascending sorts least-significant key first
    keys = rng.random((gr, gc))
    perm = np.argsort(keys, axis=1, kind="stable")
    kp = np.take_along_axis(keep_probs, perm, axis=1)
    perm = np.take_along_axis(perm, np.argsort(kp, axis=1, kind="stable"), axis=1)
    fs = np.take_along_axis(forced, perm, axis=1)
    perm = np.take_along_axis(perm, np.argsort(fs, axis=1, kind="stable"), axis=1)
    order = perm[:, ::-1]
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(gc), (gr, gc)), axis=1)
    keep = rank < budgets[:, None]
    return BinaryMask(PatternKind.TILE, keep.ravel(), rows, cols, tile)


def partition_by_magnitude(values: np.ndarray, parts: int) -> np.ndarray:
    """Label every value with its magnitude part, 1 = largest magnitudes.

    Boundaries are descending-quantile order statistics of |values|; ties
    spanning a boundary all land in the upper (more sensitive) part, so a
    constant matrix is entirely part 1.
    """
    if parts < 2:
        raise ParameterError("parts must be >= 2")
    values = np.asarray(values)
    mags = np.abs(values).ravel()
    n = mags.size
    desc = np.sort(mags)[::-1]
    labels = np.full(n, parts, dtype=np.int64)
    for j in range(parts - 1, 0, -1):
        bound = desc[math.ceil(n * j / parts) - 1]
        labels[mags >= bound] = j
    return labels.reshape(values.shape)


def save_sensitivity_mask(mask: SensitivityMask, path) -> None:
    doc = {
        "rows": mask.rows,
        "cols": mask.cols,
        "region_rows": mask.region_rows,
        "region_cols": mask.region_cols,
        "sensitive": mask.sensitive.astype(int).tolist(),
        "drop_probs": mask.drop_probs.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_sensitivity_mask(path) -> SensitivityMask:
    with open(path) as fh:
        doc = json.load(fh)
    return SensitivityMask(
        rows=doc["rows"],
        cols=doc["cols"],
        region_rows=doc["region_rows"],
        region_cols=doc["region_cols"],
        sensitive=np.asarray(doc["sensitive"], dtype=bool),
        drop_probs=np.asarray(doc["drop_probs"], dtype=np.float64),
    )

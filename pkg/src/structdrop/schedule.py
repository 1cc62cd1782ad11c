"""Skew-normal dropout-ratio schedule over training epochs.

The per-epoch ratio follows p(e) = floor + c * f(e) where f is a skew-normal
density whose mode sits inside the epoch range.  With positive shape the
curve rises quickly from the floor, peaks around 40% of training, and decays
slowly, so early feature formation and late convergence both see a low
ratio while the bulk of training runs at a high one.

Density, mean and variance:

    f(y) = (2 / sigma) * phi(z) * Phi(shape * z),      z = (y - mu) / sigma
    E[Y] = mu + m0(shape) * sigma,   m0 = sqrt(2/pi) * shape / sqrt(1 + shape^2)
    D[Y] = (1 - m0^2) * sigma^2

Phi is evaluated through the complementary error function, accurate to
better than 1e-12 absolute, so moment identities hold to quadrature
accuracy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import erfc

from .errors import ParameterError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SkewNormalParams:
    location: float
    scale: float
    shape: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ParameterError("scale must be > 0")
        if not math.isfinite(self.shape):
            raise ParameterError("shape must be finite")


def _norm_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


def _norm_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=np.float64) / _SQRT2)


def skew_pdf(y, params: SkewNormalParams):
    """Skew-normal density at y (scalar or array)."""
    z = (np.asarray(y, dtype=np.float64) - params.location) / params.scale
    return 2.0 / params.scale * _norm_pdf(z) * _norm_cdf(params.shape * z)


def _delta_terms(shape: float) -> tuple[float, float]:
    m0 = math.sqrt(2.0 / math.pi) * shape / math.sqrt(1.0 + shape * shape)
    return m0, 1.0 - m0 * m0


def skew_moments(params: SkewNormalParams) -> tuple[float, float]:
    """(mean, variance) of the skew-normal distribution."""
    m0, s0_sq = _delta_terms(params.shape)
    return (params.location + m0 * params.scale,
            s0_sq * params.scale * params.scale)


def solve_location_scale(target_mean: float, target_std: float,
                         shape: float) -> SkewNormalParams:
    """Location and scale so the distribution has the requested mean/std."""
    if not target_std > 0:
        raise ParameterError("target_std must be > 0")
    m0, s0_sq = _delta_terms(shape)
    scale = target_std / math.sqrt(s0_sq)
    return SkewNormalParams(target_mean - m0 * scale, scale, shape)


def _standard_mode(shape: float) -> float:
    """Mode of the unit skew-normal; depends on the shape only."""
    res = optimize.minimize_scalar(
        lambda z: -float(skew_pdf(z, SkewNormalParams(0.0, 1.0, shape))),
        bounds=(-3.0, 3.0), method="bounded",
        options={"xatol": 1e-12},
    )
    return float(res.x)


@dataclass(frozen=True)
class RatioSchedule:
    """Per-epoch dropout ratios p(1..E) plus how they were produced."""

    params: SkewNormalParams
    total_epochs: int
    target_mean_ratio: float
    achieved_mean_ratio: float
    floor: float
    ceiling: float
    ratios: np.ndarray
    clamped: bool

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        object.__setattr__(self, "ratios", r)
        if r.shape != (self.total_epochs,):
            raise ParameterError("ratio table must have one entry per epoch")
        if (r < 0).any() or (r > 1).any():
            raise ParameterError("ratios must lie in [0, 1]")
        if abs(float(r.mean()) - self.achieved_mean_ratio) > 1e-6:
            raise ParameterError("achieved mean inconsistent with table")

    def ratio_at(self, epoch: int) -> float:
        """Ratio for a 1-based epoch index."""
        if not 1 <= epoch <= self.total_epochs:
            raise ParameterError(f"epoch {epoch} outside 1..{self.total_epochs}")
        return float(self.ratios[epoch - 1])


# endpoint slack: schedule must start and end within 1.2x of the floor
# (plus a tiny absolute allowance so a floor of zero stays feasible)
_EDGE_FACTOR = 1.2
_EDGE_ABS = 1e-3


def build_schedule(total_epochs: int, mean_ratio: float, floor: float,
                   ceiling: float, shape: float,
                   mode_fraction: float = 0.4,
                   width_fraction: float = 0.25) -> RatioSchedule:
    """Build the epoch-indexed ratio table.

    The density mode is placed at mode_fraction * E and its scale starts at
    width_fraction * E, shrinking geometrically until the first and last
    epoch sit within 1.2x of the floor.  The amplitude c solves the mean
    constraint mean(p) = mean_ratio and is shrunk when the peak would
    exceed the ceiling, in which case the realized mean is re-reported via
    achieved_mean_ratio (and `clamped` is set).
    """
    if total_epochs < 1:
        raise ParameterError("total_epochs must be >= 1")
    if not (0.0 <= floor <= ceiling <= 1.0):
        raise ParameterError("need 0 <= floor <= ceiling <= 1")
    if mean_ratio > ceiling + 1e-12 or mean_ratio < floor - 1e-12:
        raise ParameterError(
            f"mean ratio {mean_ratio} outside [{floor}, {ceiling}]"
        )
    if not 0.0 < mode_fraction < 1.0:
        raise ParameterError("mode_fraction must lie in (0, 1)")
    epochs = np.arange(1, total_epochs + 1, dtype=np.float64)
    flat = math.isclose(mean_ratio, floor, abs_tol=1e-15)
    z_mode = _standard_mode(shape)
    scale = width_fraction * total_epochs
    params = None
    for _ in range(60):
        loc = mode_fraction * total_epochs - z_mode * scale
        params = SkewNormalParams(loc, scale, shape)
        dens = skew_pdf(epochs, params)
        if flat:
            c = 0.0
        else:
            c = (mean_ratio - floor) / max(float(dens.mean()), 1e-300)
            cap = (ceiling - floor) / max(float(dens.max()), 1e-300)
            c = min(c, cap)
        edge = c * max(dens[0], dens[-1])
        if floor + edge <= _EDGE_FACTOR * floor + _EDGE_ABS:
            break
        # schedules only a few epochs long cannot push their ends to the
        # floor; stop shrinking once the width falls below one epoch
        if scale < 1.0:
            break
        scale *= 0.85
    ratios = floor + c * dens
    clamped = not flat and abs(float(ratios.mean()) - mean_ratio) > 1e-9
    return RatioSchedule(
        params=params,
        total_epochs=total_epochs,
        target_mean_ratio=mean_ratio,
        achieved_mean_ratio=float(ratios.mean()),
        floor=floor,
        ceiling=ceiling,
        ratios=ratios,
        clamped=clamped,
    )


def save_schedule_csv(schedule: RatioSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "ratio"])
        for e, r in enumerate(schedule.ratios, start=1):
            writer.writerow([e, repr(float(r))])

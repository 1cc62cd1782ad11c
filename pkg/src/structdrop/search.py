"""Gradient-descent search for the distribution over dropout periods.

The search optimizes a probability vector d = softmax(v) so that the
expected dropped fraction sum_i d_i (i-1)/i matches a target rate, with a
negative-entropy penalty keeping the distribution spread over many periods
(more distinct sub-models).  The loss

    L(v) = (d . p_u - p)^2 - entropy_weight * H(d)

is deterministic, so plain full-batch descent applies; steps that would
increase the loss are retried with a halved step length, which makes the
accepted-loss sequence non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .patterns import DropoutPattern, PatternKind, TileConfig, pattern_space

# beyond this period the per-pattern drop fraction (i-1)/i saturates, so
# larger supports add near-total-dropout patterns of negligible value
DEFAULT_SUPPORT_CAP = 64


@dataclass(frozen=True)
class SearchConfig:
    pattern_count: int
    target_rate: float
    entropy_weight: float = 0.01
    learning_rate: float = 0.1
    max_steps: int = 10_000
    convergence_tol: float = 1e-10
    rate_tolerance: float = 0.01

    def __post_init__(self):
        if self.pattern_count < 1:
            raise ParameterError("pattern_count must be >= 1")
        if not 0.0 <= self.target_rate < 1.0:
            raise ParameterError("target_rate must lie in [0, 1)")
        if self.entropy_weight < 0:
            raise ParameterError("entropy_weight must be >= 0")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.max_steps < 1:
            raise ParameterError("max_steps must be >= 1")


@dataclass(frozen=True)
class PatternDistribution:
    """Probabilities over periods 1..N plus the rate they realize."""

    probs: np.ndarray
    target_rate: float
    achieved_rate: float
    converged: bool = True
    loss_trace: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size < 1:
            raise ParameterError("probs must be a non-empty vector")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
            raise ParameterError("probs must be a probability vector")
        expected = float(probs @ drop_rate_vector(probs.size))
        if abs(expected - self.achieved_rate) > 1e-9:
            raise ParameterError("achieved_rate inconsistent with probs")

    @classmethod
    def from_probs(cls, probs, target_rate: float | None = None) -> "PatternDistribution":
        """Build a distribution from raw probabilities; the achieved rate is
        derived so the rate invariant holds exactly."""
        probs = np.asarray(probs, dtype=np.float64)
        achieved = float(probs @ drop_rate_vector(probs.size))
        return cls(probs=probs,
                   target_rate=achieved if target_rate is None else target_rate,
                   achieved_rate=achieved)

    @property
    def pattern_count(self) -> int:
        return self.probs.size

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


def drop_rate_vector(n: int) -> np.ndarray:
    """Per-period dropped fractions [(i-1)/i for i in 1..n]."""
    if n < 1:
        raise ParameterError("pattern count must be >= 1")
    i = np.arange(1, n + 1, dtype=np.float64)
    return (i - 1.0) / i


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def _loss(v, p_u, target, w):
    d = _softmax(v)
    resid = float(d @ p_u) - target
    ent = float(-(d * np.log(np.maximum(d, 1e-300))).sum())
    return resid * resid - w * ent, d, resid


def _loss_grad(v, p_u, target, w):
    d = _softmax(v)
    resid = float(d @ p_u) - target
    g_d = 2.0 * resid * p_u + w * (np.log(np.maximum(d, 1e-300)) + 1.0)
    return d * (g_d - float(d @ g_d))


def _descend(v, p_u, cfg: SearchConfig, weight: float, trace: list) -> np.ndarray:
    loss, _, _ = _loss(v, p_u, cfg.target_rate, weight)
    for _ in range(cfg.max_steps):
        g = _loss_grad(v, p_u, cfg.target_rate, weight)
        step = cfg.learning_rate
        for _ in range(40):
            v_new = v - step * g
            loss_new, _, _ = _loss(v_new, p_u, cfg.target_rate, weight)
            if loss_new <= loss:
                break
            step *= 0.5
        if loss_new > loss:  # no acceptable step length: stationary
            break
        converged = abs(loss - loss_new) < cfg.convergence_tol
        v, loss = v_new, loss_new
        trace.append(loss)
        if converged:
            break
    return v


def search_distribution(cfg: SearchConfig, rng: np.random.Generator | None = None,
                        init_scale: float = 0.0) -> PatternDistribution:
    """Search the period distribution for cfg.target_rate.

    Starts from the uniform distribution (v = 0); `init_scale` > 0 adds a
    seeded perturbation for restarts.  If the converged solution misses the
    rate tolerance because the entropy penalty pulls it away, the penalty
    weight is annealed (quartered) and descent continues; annealing keeps
    the final entropy above the unregularized solution's while restoring
    the rate constraint.  Returns converged=False with the best solution
    found when the tolerance is still unmet after annealing.
    """
    n = cfg.pattern_count
    max_rate = (n - 1) / n
    # equality is admissible: the optimum then sits at the boundary
    # distribution concentrated on the largest period
    if cfg.target_rate > max_rate + 1e-12:
        raise ParameterError(
            f"target rate {cfg.target_rate} unreachable with {n} patterns "
            f"(max {max_rate:.6f})"
        )
    p_u = drop_rate_vector(n)
    v = np.zeros(n)
    if init_scale > 0.0 and rng is not None:
        v = v + init_scale * rng.standard_normal(n)
    trace: list[float] = []
    weight = cfg.entropy_weight
    for _ in range(12):
        v = _descend(v, p_u, cfg, weight, trace)
        _, d, resid = _loss(v, p_u, cfg.target_rate, weight)
        if abs(resid) <= 0.5 * cfg.rate_tolerance or weight == 0.0:
            break
        weight *= 0.25
        if weight < 1e-8:
            weight = 0.0
    achieved = float(d @ p_u)
    return PatternDistribution(
        probs=d,
        target_rate=cfg.target_rate,
        achieved_rate=achieved,
        converged=abs(achieved - cfg.target_rate) <= cfg.rate_tolerance,
        loss_trace=np.asarray(trace),
    )


def neuron_drop_probability(dist: PatternDistribution) -> float:
    """Per-unit drop probability sum_i k_i (i-1)/i.

    This is the same sum as the expected global dropped fraction, so it
    equals `dist.achieved_rate` exactly; both code paths share the formula.
    """
    return float(dist.probs @ drop_rate_vector(dist.pattern_count))


def sample_pattern(dist: PatternDistribution, kind: PatternKind,
                   rows: int, cols: int, tile: TileConfig,
                   rng: np.random.Generator) -> DropoutPattern:
    """Draw one pattern: period ~ dist, offset uniform on {1..period}."""
    space = pattern_space(kind, rows, cols, tile)
    if dist.pattern_count > space:
        raise ParameterError(
            f"distribution spans {dist.pattern_count} periods but the "
            f"matrix admits only {space}"
        )
    period = int(rng.choice(dist.pattern_count, p=dist.probs)) + 1
    offset = int(rng.integers(1, period + 1))
    return DropoutPattern(kind, period, offset)


def sample_pattern_arrays(dist: PatternDistribution, count: int,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sampler: arrays of periods and offsets for `count` draws."""
    periods = rng.choice(dist.pattern_count, size=count, p=dist.probs) + 1
    offsets = rng.integers(1, periods + 1)
    return periods, offsets


def save_distribution(dist: PatternDistribution, path) -> None:
    doc = {
        "target_rate": dist.target_rate,
        "probs": dist.probs.tolist(),
        "achieved_rate": dist.achieved_rate,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_distribution(path) -> PatternDistribution:
    with open(path) as fh:
        doc = json.load(fh)
    probs = np.asarray(doc["probs"], dtype=np.float64)
    return PatternDistribution(
        probs=probs,
        target_rate=float(doc["target_rate"]),
        achieved_rate=float(doc["achieved_rate"]),
    )

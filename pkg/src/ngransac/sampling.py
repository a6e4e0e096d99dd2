"""Minimal-set and hypothesis-pool sampling: uniform, guided, progressive.

All randomness comes from an explicit ``numpy.random.Generator`` backed by
the counter-based Philox bit generator; nothing touches global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateMinimalSet,
    InsufficientSupport,
    RankDeficient,
    ResampleBudgetExceeded,
)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def rng_state(rng: np.random.Generator) -> dict:
    """Serializable generator state (round-trips through ``restore_rng``)."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


@dataclass(frozen=True)
class GuidanceDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()}, expected 1")
        object.__setattr__(self, "weights", w)
        cdf = np.cumsum(w)
        cdf[-1] = 1.0
        object.__setattr__(self, "_cdf", cdf)
        object.__setattr__(self, "_support", int(np.count_nonzero(w > 0)))
        object.__setattr__(self, "_uniform", bool(np.all(w == w[0])))

    @classmethod
    def uniform(cls, n: int) -> "GuidanceDistribution":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def from_scores(cls, scores) -> "GuidanceDistribution":
        s = np.asarray(scores, dtype=np.float64)
        return cls(s / s.sum())

    def __len__(self):
        return self.weights.size

    @property
    def is_uniform(self) -> bool:
        return self._uniform

    @property
    def support(self) -> int:
        return self._support

    @property
    def cdf(self) -> np.ndarray:
        return self._cdf


@dataclass(frozen=True)
class SamplerConfig:
    pool_size: int = 100
    minimal_set_size: int = 2
    seed: int = 0
    max_resample_attempts: int = 100

    def __post_init__(self):
        if self.pool_size < 1 or self.minimal_set_size < 1:
            raise ValueError("pool_size and minimal_set_size must be >= 1")
        if self.max_resample_attempts < 1:
            raise ValueError("max_resample_attempts must be >= 1")


@dataclass
class HypothesisPool:
    """M hypotheses stored column-wise.

    ``log_probs[j]`` is the sum of log sampling weights of minimal set j;
    ``draw_counts`` accumulates how often each observation was drawn over
    the whole pool (the coefficients of d log p(pool) / d log weights).
    """

    models: np.ndarray
    minimal_sets: np.ndarray
    scores: np.ndarray
    log_probs: np.ndarray
    draw_counts: np.ndarray
    rejected: int = 0

    def __len__(self):
        return len(self.scores)

    @property
    def log_prob(self) -> float:
        return float(np.sum(self.log_probs))


def sample_minimal_set_uniform(n_observations: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """N distinct indices, every unordered set equally likely."""
    if n > n_observations:
        raise ValueError(f"cannot draw {n} distinct indices from {n_observations}")
    return rng.choice(n_observations, size=n, replace=False)


def sample_minimal_set_guided(
    dist: GuidanceDistribution,
    n: int,
    rng: np.random.Generator,
    max_resample_attempts: int = 100,
) -> np.ndarray:
    """N independent categorical draws from ``dist``; sets with duplicates are redrawn whole.

    Redrawing the whole set keeps the accepted-set probability proportional
    to the product of the weights, so log-probabilities differ from the
    independent model only by a per-set constant.
    """
    if dist.support < n:
        raise InsufficientSupport(f"{dist.support} observations with mass, need {n}")
    cdf = dist.cdf
    last = cdf.size - 1
    for _ in range(max_resample_attempts):
        idx = np.searchsorted(cdf, rng.random(n), side="right")
        idx[idx > last] = last
        if len(set(idx.tolist())) == n:
            return idx
    raise ResampleBudgetExceeded(f"{max_resample_attempts} consecutive duplicate draws")


def sample_pool(
    observations: np.ndarray,
    dist: Optional[GuidanceDistribution],
    config: SamplerConfig,
    solver,
    score_fn: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
) -> HypothesisPool:
    """Draw ``config.pool_size`` hypotheses; ``dist=None`` or a uniform dist samples uniformly.

    Minimal sets on which the solver fails are redrawn; each failure counts
    against ``max_resample_attempts`` (reset after every success).  For
    multi-solution solvers the best-scoring candidate is kept.
    """
    n_obs = observations.shape[0]
    n = config.minimal_set_size
    if n > n_obs:
        raise ValueError(f"{n_obs} observations cannot form a minimal set of {n}")
    uniform = dist is None or dist.is_uniform
    if dist is not None and len(dist) != n_obs:
        raise ValueError("distribution length differs from observation count")
    log_w = None if uniform else np.log(np.where(dist.weights > 0, dist.weights, 1.0))
    log_uniform = -math.log(n_obs)

    models, sets, scores, log_probs = [], [], [], []
    counts = np.zeros(n_obs)
    rejected = 0
    streak = 0
    while len(models) < config.pool_size:
        if uniform:
            idx = sample_minimal_set_uniform(n_obs, n, rng)
        else:
            idx = sample_minimal_set_guided(dist, n, rng, config.max_resample_attempts)
        try:
            candidates = solver.fit(observations[idx])
        except (DegenerateMinimalSet, RankDeficient):
            candidates = []
        if not candidates:
            rejected += 1
            streak += 1
            if streak >= config.max_resample_attempts:
                raise ResampleBudgetExceeded(f"{streak} consecutive degenerate minimal sets")
            continue
        streak = 0
        if len(candidates) == 1:
            models.append(candidates[0])
            scores.append(float(score_fn(solver.residuals(candidates[0], observations))[0]))
        else:
            stacked = np.stack(candidates)
            cand_scores = score_fn(solver.residuals(stacked, observations))
            best = int(np.argmax(cand_scores))
            models.append(stacked[best])
            scores.append(float(cand_scores[best]))
        sets.append(idx)
        log_probs.append(n * log_uniform if uniform else float(np.sum(log_w[idx])))
        for i in idx.tolist():
            counts[i] += 1.0
    return HypothesisPool(
        models=np.stack(models),
        minimal_sets=np.stack(sets).astype(np.int64),
        scores=np.asarray(scores),
        log_probs=np.asarray(log_probs),
        draw_counts=counts,
        rejected=rejected,
    )


def default_growth_rate(pool_size: int, n_observations: int, n: int) -> float:
    return max(1.0, pool_size / max(1, n_observations - n))


def progressive_sampler(
    priority: Sequence[float],
    n: int,
    growth_rate: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    seed: int = 0,
) -> Iterator[np.ndarray]:
    """Endless stream of minimal sets from a growing prefix of the priority order.

    Observations are sorted by decreasing priority (ties by index).  The
    prefix starts at ``n`` and grows by one after ``ceil(growth_rate)`` draws
    at the current size, or earlier once every set of the prefix has been
    emitted.  Each new prefix of size m emits sets that contain its newest
    member (the sets not available before), uniformly and without
    repetition; once the full set is reached sets are drawn uniformly.
    """
    prio = np.asarray(priority, dtype=np.float64)
    if not np.all(np.isfinite(prio)):
        raise ValueError("priorities must be finite")
    n_obs = prio.size
    if n > n_obs:
        raise ValueError("not enough observations")
    order = np.lexsort((np.arange(n_obs), -prio))
    rng = rng if rng is not None else make_rng(seed)
    per_prefix = max(1, math.ceil(growth_rate))

    yield order[:n].copy()
    m = n
    while m < n_obs:
        m += 1
        newest = order[m - 1]
        emitted: set[tuple] = set()
        total_new = math.comb(m - 1, n - 1)
        draws = 0
        while draws < per_prefix and len(emitted) < total_new:
            rest = rng.choice(m - 1, size=n - 1, replace=False)
            key = tuple(sorted(rest.tolist()))
            if key in emitted:
                continue
            emitted.add(key)
            draws += 1
            yield np.concatenate([order[np.array(key, dtype=np.int64)], [newest]]).astype(np.int64)
    while True:
        yield order[rng.choice(n_obs, size=n, replace=False)]


def ratio_filter(correspondences, ratios, threshold: float = 0.8):
    """Keep correspondences with ``ratio < threshold``; returns ``(kept_rows, kept_indices)``."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or np.any(np.isnan(r)):
        raise ValueError("ratios must be present for every correspondence")
    corrs = np.asarray(correspondences)
    if corrs.shape[0] != r.size:
        raise ValueError("one ratio per correspondence required")
    kept = np.flatnonzero(r < threshold)
    return corrs[kept], kept

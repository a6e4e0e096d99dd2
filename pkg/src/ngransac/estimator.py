"""Robust estimators built from the samplers, solvers and scorers."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateMinimalSet, RankDeficient, ResampleBudgetExceeded
from .sampling import (
    GuidanceDistribution,
    HypothesisPool,
    SamplerConfig,
    make_rng,
    progressive_sampler,
    ratio_filter,
    sample_pool,
)
from .scoring import select_best, selection_distribution


@dataclass
class EstimateReport:
    model: np.ndarray
    selected_index: int
    score: float
    inlier_indices: np.ndarray
    pools_drawn: int
    hypotheses_drawn: int
    rng_seed: int
    log_probs: Optional[np.ndarray] = None
    hypothesis_model: Optional[np.ndarray] = None
    refit_applied: bool = False
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": np.asarray(self.model).tolist(),
            "selected_index": int(self.selected_index),
            "score": float(self.score),
            "inlier_indices": [int(i) for i in self.inlier_indices],
            "pools_drawn": int(self.pools_drawn),
            "hypotheses_drawn": int(self.hypotheses_drawn),
            "rng_seed": int(self.rng_seed),
            "refit_applied": bool(self.refit_applied),
            "warnings": list(self.warnings),
        }


def finish_pool(observations, pool: HypothesisPool, solver, score_fn, refit: bool = True):
    """Argmax selection and a single refit to the selected hypothesis' inliers.

    The refit is discarded when it would lower the hard inlier count.
    Returns ``(index, model, inlier_indices, refit_applied)``.
    """
    j = select_best(pool.scores)
    hyp = pool.models[j]
    tau = score_fn.tau
    inliers = np.flatnonzero(solver.residuals(hyp, observations)[0] < tau)
    if not refit or inliers.size < max(solver.sample_size, 2):
        return j, hyp, inliers, False
    try:
        refined = solver.refit(observations[inliers])
    except (DegenerateMinimalSet, RankDeficient):
        return j, hyp, inliers, False
    refined_inliers = np.flatnonzero(solver.residuals(refined, observations)[0] < tau)
    if refined_inliers.size < inliers.size:
        return j, hyp, inliers, False
    return j, refined, refined_inliers, True


def _report(observations, pool, config, solver, score_fn, refit) -> EstimateReport:
    j, model, inliers, refitted = finish_pool(observations, pool, solver, score_fn, refit)
    return EstimateReport(
        model=model,
        selected_index=j,
        score=float(pool.scores[j]),
        inlier_indices=inliers,
        pools_drawn=1,
        hypotheses_drawn=len(pool),
        rng_seed=config.seed,
        log_probs=pool.log_probs,
        hypothesis_model=pool.models[j],
        refit_applied=refitted,
    )


def ransac(observations, config: SamplerConfig, solver, score_fn, rng=None, refit: bool = True) -> EstimateReport:
    """Uniform pool of ``config.pool_size`` hypotheses, argmax selection, refit."""
    observations = np.asarray(observations, dtype=np.float64)
    rng = make_rng(config.seed) if rng is None else rng
    pool = sample_pool(observations, None, config, solver, score_fn, rng)
    return _report(observations, pool, config, solver, score_fn, refit)


def ng_ransac(
    observations, dist: GuidanceDistribution, config: SamplerConfig, solver, score_fn, rng=None, refit: bool = True
) -> EstimateReport:
    """RANSAC with minimal sets drawn from a guidance distribution."""
    observations = np.asarray(observations, dtype=np.float64)
    rng = make_rng(config.seed) if rng is None else rng
    pool = sample_pool(observations, dist, config, solver, score_fn, rng)
    return _report(observations, pool, config, solver, score_fn, refit)


def progressive_ransac(observations, priority, config: SamplerConfig, solver, score_fn, growth_rate=None, refit=True):
    """Progressive-sampling comparator: hypotheses from the priority-ordered stream."""
    from .sampling import default_growth_rate

    observations = np.asarray(observations, dtype=np.float64)
    n = solver.sample_size
    if growth_rate is None:
        growth_rate = default_growth_rate(config.pool_size, observations.shape[0], n)
    stream = progressive_sampler(priority, n, growth_rate, seed=config.seed)
    models, sets, scores = [], [], []
    streak = 0
    for idx in stream:
        if len(models) == config.pool_size:
            break
        try:
            cands = solver.fit(observations[idx])
        except (DegenerateMinimalSet, RankDeficient):
            cands = []
        if not cands:
            streak += 1
            if streak >= config.max_resample_attempts:
                raise ResampleBudgetExceeded("progressive sampler keeps producing degenerate sets")
            continue
        streak = 0
        stacked = np.stack(cands)
        s = score_fn(solver.residuals(stacked, observations))
        b = int(np.argmax(s))
        models.append(stacked[b])
        sets.append(idx)
        scores.append(float(s[b]))
    pool = HypothesisPool(
        models=np.stack(models),
        minimal_sets=np.stack(sets),
        scores=np.asarray(scores),
        log_probs=np.zeros(len(scores)),
        draw_counts=np.zeros(observations.shape[0]),
    )
    return _report(observations, pool, config, solver, score_fn, refit)


def with_ratio_filter(estimate_fn, observations, ratios, threshold: float = 0.8, **kwargs) -> EstimateReport:
    """Run ``estimate_fn`` on ratio-filtered observations; indices map back to the input.

    Falls back to the unfiltered set (with a warning) when the filter keeps
    too few observations for a minimal set.
    """
    observations = np.asarray(observations, dtype=np.float64)
    kept_rows, kept = ratio_filter(observations, ratios, threshold)
    solver = kwargs.get("solver")
    need = solver.sample_size if solver is not None else 1
    if kept.size < max(need, 1):
        report = estimate_fn(observations, **kwargs)
        report.warnings.append(f"ratio filter kept {kept.size} observations; used unfiltered set")
        return report
    report = estimate_fn(kept_rows, **kwargs)
    report.inlier_indices = kept[report.inlier_indices]
    return report


def dsac_select(scores, rng: np.random.Generator) -> int:
    """Sample a hypothesis index from the softmax of the pool scores."""
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty pool")
    p = selection_distribution(s)
    return int(rng.choice(s.size, p=p))


def dsac_expected_loss(scores, losses) -> float:
    """``sum_j softmax(scores)_j * losses_j``."""
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    l = np.asarray(losses, dtype=np.float64)
    if l.shape != s.shape or not np.all(np.isfinite(l)):
        raise ValueError("losses must be finite and aligned with the pool")
    return float(selection_distribution(s) @ l)


def adaptive_budget(inlier_ratio: float, n: int, confidence: float = 0.99, m_max: int = 10_000) -> int:
    """Hypotheses needed to draw one all-inlier set with probability ``confidence``."""
    if not 0.0 <= inlier_ratio <= 1.0 or not 0.0 < confidence < 1.0:
        raise ValueError("inlier_ratio must lie in [0,1] and confidence in (0,1)")
    p_good = inlier_ratio ** n
    if p_good >= 1.0:
        return 1
    if p_good <= 0.0:
        return m_max
    m = math.ceil(math.log(1.0 - confidence) / math.log1p(-p_good))
    return int(min(max(m, 1), m_max))


def adaptive_ransac(observations, config: SamplerConfig, solver, score_fn, confidence=0.99, rng=None, refit=True):
    """RANSAC that stops once ``adaptive_budget`` of the best inlier ratio is reached.

    ``config.pool_size`` is the hard cap.  ``score_fn`` must be a hard
    inlier count for the ratio estimate to be meaningful.
    """
    observations = np.asarray(observations, dtype=np.float64)
    rng = make_rng(config.seed) if rng is None else rng
    one = SamplerConfig(1, config.minimal_set_size, config.seed, config.max_resample_attempts)
    pools = []
    required = config.pool_size
    best = 0.0
    while len(pools) < min(required, config.pool_size):
        pool = sample_pool(observations, None, one, solver, score_fn, rng)
        pools.append(pool)
        ratio = float(np.count_nonzero(solver.residuals(pool.models[0], observations)[0] < score_fn.tau))
        ratio /= observations.shape[0]
        if ratio > best:
            best = ratio
            required = adaptive_budget(best, config.minimal_set_size, confidence, config.pool_size)
    merged = HypothesisPool(
        models=np.concatenate([p.models for p in pools]),
        minimal_sets=np.concatenate([p.minimal_sets for p in pools]),
        scores=np.concatenate([p.scores for p in pools]),
        log_probs=np.concatenate([p.log_probs for p in pools]),
        draw_counts=np.sum([p.draw_counts for p in pools], axis=0),
    )
    return _report(observations, merged, config, solver, score_fn, refit)


# ---------------------------------------------------------------- NG-DSAC (line task)
@dataclass
class NgDsacTape:
    """Everything a training step needs after an NG-DSAC forward pass."""

    forward: object
    points: np.ndarray
    pool: HypothesisPool
    selection: np.ndarray
    losses: Optional[np.ndarray] = None
    expected_loss: Optional[float] = None


def ng_dsac_estimate(scene, net, config: SamplerConfig, rng=None, params=None):
    """Predict points and weights, draw a guided pool of lines, pick the best-scoring one.

    Returns ``(report, tape)``; the tape carries the DSAC selection
    probabilities and, when ``scene.gt_line`` is known, per-hypothesis losses
    and their exact expectation over the pool.
    """
    from .scoring import LINE_PARAMS, SoftInlierScore
    from .solvers import LineSolver
    from .training import line_task_loss

    params = LINE_PARAMS if params is None else params
    rng = make_rng(config.seed) if rng is None else rng
    fw = net.forward(scene.features, scene.centers)
    points = fw.points
    solver = LineSolver()
    score_fn = SoftInlierScore(params)
    pool = sample_pool(points, GuidanceDistribution(fw.weights), config, solver, score_fn, rng)
    selection = selection_distribution(pool.scores)
    j = select_best(pool.scores)
    model = pool.models[j]
    inliers = np.flatnonzero(solver.residuals(model, points)[0] < params.tau)
    tape = NgDsacTape(fw, points, pool, selection)
    if getattr(scene, "gt_line", None) is not None:
        tape.losses = np.array([line_task_loss(h, scene.gt_line)[0] for h in pool.models])
        tape.expected_loss = float(selection @ tape.losses)
    report = EstimateReport(
        model=model,
        selected_index=j,
        score=float(pool.scores[j]),
        inlier_indices=inliers,
        pools_drawn=1,
        hypotheses_drawn=len(pool),
        rng_seed=config.seed,
        log_probs=pool.log_probs,
        hypothesis_model=model,
    )
    return report, tape


def enumerate_minimal_sets(n_observations: int, n: int):
    """All ordered tuples of n distinct indices."""
    return list(itertools.permutations(range(n_observations), n))

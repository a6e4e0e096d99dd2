"""Training objectives, score-function gradients, KL initialization and the optimizer loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import (
    CheiralityAmbiguous,
    DegenerateModel,
    MissingGroundTruth,
    NoInliers,
    NonFiniteLoss,
)
from .estimator import finish_pool
from .geometry import ModelKind, decompose_essential, angular_pose_error
from .metrics import epipolar_stats, fscore_inliers
from .sampling import GuidanceDistribution, SamplerConfig, make_rng, sample_pool
from .scoring import (
    ESSENTIAL_TAU,
    FUNDAMENTAL_TAU,
    LINE_PARAMS,
    HardInlierScore,
    SoftInlierScore,
    SoftScoreParams,
    selection_distribution,
    soft_inlier_line_grads,
)
from .solvers import EpipolarSolver, LineSolver, solve_line_with_jacobian

log = logging.getLogger(__name__)

OBJECTIVES = ("pose", "inliers", "fscore", "mean-epi", "line")
LINE_LOSS_CAP = 1.0
ROBUST_KNEE = 0.25
POSE_FAILURE_DEG = 180.0


@dataclass(frozen=True)
class TaskLossValue:
    value: float
    kind: str


# ---------------------------------------------------------------- task losses
def robust_line_loss(raw: float) -> tuple[float, float]:
    """``l' = l`` below 0.25, ``0.25*sqrt(l)`` from 0.25 on; returns value and slope."""
    if raw < ROBUST_KNEE:
        return raw, 1.0
    root = math.sqrt(raw)
    return ROBUST_KNEE * root, 0.5 * ROBUST_KNEE / root


def line_task_loss(h, gt) -> tuple[float, np.ndarray]:
    """Robust, clamped maximum vertical deviation at x = 0 and x = 1 (image height 1).

    Returns ``(loss, d loss / d h)``.  The clamp makes the derivative zero for
    steep or far-off hypotheses.
    """
    h = np.asarray(h, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    grad = np.zeros(3)
    if abs(h[1]) < 1e-12:
        return robust_line_loss(LINE_LOSS_CAP)[0], grad
    xs = np.array([0.0, 1.0])
    y_h = -(h[0] * xs + h[2]) / h[1]
    y_g = -(gt[0] * xs + gt[2]) / gt[1]
    dev = y_h - y_g
    k = int(np.argmax(np.abs(dev)))
    raw = abs(dev[k])
    if raw >= LINE_LOSS_CAP:
        return robust_line_loss(LINE_LOSS_CAP)[0], grad
    value, slope = robust_line_loss(raw)
    x = xs[k]
    dy_dh = np.array([-x / h[1], (h[0] * x + h[2]) / h[1] ** 2, -1.0 / h[1]])
    return value, slope * math.copysign(1.0, dev[k]) * dy_dh


def task_loss(
    estimate,
    objective: str,
    *,
    observations=None,
    gt_model=None,
    gt_pose=None,
    gt_line=None,
    tau: Optional[float] = None,
    normalize: bool = False,
) -> TaskLossValue:
    """Scalar quality of an estimate; lower is better.

    pose      angular pose error in degrees (essential matrices; needs gt_pose)
    inliers   negated inlier count, divided by the set size when ``normalize``
    fscore    negated inlier F-score against ``gt_model``
    mean-epi  mean ground-truth epipolar error of the estimate's inliers
    line      robust, clamped line deviation against ``gt_line``
    """
    if objective == "line":
        if gt_line is None:
            raise MissingGroundTruth("line objective needs gt_line")
        return TaskLossValue(line_task_loss(estimate, gt_line)[0], objective)
    if objective == "inliers":
        obs = np.asarray(observations, dtype=np.float64)
        res = kernels.epipolar_distances(np.reshape(estimate, (1, 3, 3)), obs)[0]
        count = float(np.count_nonzero(res < tau))
        return TaskLossValue(-count / obs.shape[0] if normalize else -count, objective)
    if objective == "pose":
        if gt_pose is None:
            raise MissingGroundTruth("pose objective needs gt_pose")
        obs = np.asarray(observations, dtype=np.float64)
        res = kernels.epipolar_distances(np.reshape(estimate, (1, 3, 3)), obs)[0]
        support = obs[res < tau] if np.count_nonzero(res < tau) else obs
        try:
            pose = decompose_essential(estimate, support)
        except CheiralityAmbiguous:
            return TaskLossValue(POSE_FAILURE_DEG, objective)
        return TaskLossValue(angular_pose_error(pose, gt_pose), objective)
    if objective == "fscore":
        if gt_model is None:
            raise MissingGroundTruth("fscore objective needs gt_model")
        return TaskLossValue(-fscore_inliers(estimate, gt_model, observations, tau), objective)
    if objective == "mean-epi":
        if gt_model is None:
            raise MissingGroundTruth("mean-epi objective needs gt_model")
        try:
            mean, _ = epipolar_stats(estimate, gt_model, observations, tau)
        except NoInliers:
            mean = tau
        return TaskLossValue(min(mean, tau), objective)
    raise ValueError(f"unknown objective {objective!r}")


# ---------------------------------------------------------------- tasks
class EpipolarTask:
    """Binds a scene type to solver, scorer and task loss for NG-RANSAC training."""

    def __init__(self, kind: ModelKind = ModelKind.ESSENTIAL, points: int = 8, tau: Optional[float] = None,
                 objective: str = "pose"):
        if objective not in OBJECTIVES or objective == "line":
            raise ValueError(f"objective {objective!r} not valid for epipolar tasks")
        if objective == "pose" and kind is not ModelKind.ESSENTIAL:
            raise ValueError("the pose objective needs essential matrices")
        self.kind = kind
        self.objective = objective
        self.solver = EpipolarSolver(kind, points)
        self.tau = tau if tau is not None else (ESSENTIAL_TAU if kind is ModelKind.ESSENTIAL else FUNDAMENTAL_TAU)
        self.score_fn = HardInlierScore(self.tau)

    def observations(self, scene) -> np.ndarray:
        return scene.corrs if self.kind is ModelKind.ESSENTIAL else scene.pixel_corrs()

    def features(self, scene) -> np.ndarray:
        return scene.features()

    def gt_model(self, scene):
        return scene.gt_essential if self.kind is ModelKind.ESSENTIAL else scene.gt_fundamental

    def loss(self, model, scene, observations) -> float:
        return task_loss(
            model, self.objective, observations=observations, gt_model=self.gt_model(scene),
            gt_pose=scene.gt_pose, tau=self.tau, normalize=True,
        ).value


@dataclass
class PointSetExample:
    """2D points with an optional ground-truth line (line fitting by NG-RANSAC)."""

    points: np.ndarray
    gt_line: Optional[np.ndarray] = None


class PointLineTask:
    def __init__(self, tau: float = 0.05):
        self.solver = LineSolver()
        self.tau = tau
        self.score_fn = HardInlierScore(tau)
        self.objective = "line"

    def observations(self, example) -> np.ndarray:
        return example.points

    def features(self, example) -> np.ndarray:
        return example.points

    def loss(self, model, example, observations) -> float:
        return line_task_loss(model, example.gt_line)[0]


# ---------------------------------------------------------------- configuration
@dataclass(frozen=True)
class TrainConfig:
    K: int = 4
    M: int = 16
    learning_rate: float = 1e-4
    batch_size: int = 32
    iterations: int = 5000
    objective: str = "pose"
    baseline: str = "mean"
    seed: int = 0
    kl_iterations: int = 0
    kl_learning_rate: float = 1e-3
    kl_sigma: float = 1e-3
    block_gradients: bool = True
    max_resample_attempts: int = 100
    max_nonfinite: int = 100
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be >= 1")
        if not self.learning_rate >= 0 or not self.kl_learning_rate >= 0:
            raise ValueError("learning rates must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.baseline not in ("mean", "none"):
            raise ValueError("baseline must be 'mean' or 'none'")


# ---------------------------------------------------------------- NG-RANSAC gradient
def ng_ransac_gradient(example, net, config: TrainConfig, rng: np.random.Generator, task):
    """Score-function gradient of the expected task loss over K sampled pools.

    ``grad = 1/K sum_k (l_k - b) d/dw log p(H_k; w)`` with ``b`` the mean of
    the K losses (``baseline='mean'``).  No gradient passes through the
    loss, the solver or the selection.  Returns ``(gradient, mean loss)``.
    """
    obs = np.asarray(task.observations(example), dtype=np.float64)
    fw = net.forward(task.features(example))
    dist = GuidanceDistribution(fw.weights)
    base = int(rng.integers(0, 2**62))
    sampler = SamplerConfig(config.M, task.solver.sample_size, base, config.max_resample_attempts)
    pool_rng = make_rng(base)
    losses = np.empty(config.K)
    counts = np.empty((config.K, obs.shape[0]))
    for k in range(config.K):
        pool = sample_pool(obs, dist, sampler, task.solver, task.score_fn, pool_rng)
        _, model, _, _ = finish_pool(obs, pool, task.solver, task.score_fn)
        losses[k] = task.loss(model, example, obs)
        counts[k] = pool.draw_counts
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLoss("task loss is not finite")
    b = losses.mean() if config.baseline == "mean" else 0.0
    coef = (losses - b) @ counts / config.K
    return net.backward(fw.cache, coef), float(losses.mean())


# ---------------------------------------------------------------- NG-DSAC gradient
def pool_line_expectation(points, minimal_sets, gt_line, params: SoftScoreParams = LINE_PARAMS):
    """Exact DSAC expectation of the line loss over one pool, with d/d points.

    Returns ``(expected_loss, d expected / d points (n, 2), losses, selection)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    m = len(minimal_sets)
    scores = np.empty(m)
    losses = np.empty(m)
    d_score_h = np.empty((m, 3))
    d_score_pts = np.empty((m,) + pts.shape)
    d_loss_h = np.empty((m, 3))
    jacs = np.empty((m, 3, 4))
    for j, (a, b) in enumerate(minimal_sets):
        h, jacs[j] = solve_line_with_jacobian(pts[a], pts[b])
        scores[j], d_score_h[j], d_score_pts[j] = soft_inlier_line_grads(h, pts, params)
        losses[j], d_loss_h[j] = line_task_loss(h, gt_line)
    sel = selection_distribution(scores)
    expected = float(sel @ losses)
    d_scores = sel * (losses - expected)
    d_pts = np.tensordot(d_scores, d_score_pts, axes=1)
    d_h = sel[:, None] * d_loss_h + d_scores[:, None] * d_score_h
    for j, (a, b) in enumerate(minimal_sets):
        g = d_h[j] @ jacs[j]
        d_pts[a] += g[:2]
        d_pts[b] += g[2:]
    return expected, d_pts, losses, sel


def ng_dsac_gradient(example, net, config: TrainConfig, rng: np.random.Generator,
                     params: SoftScoreParams = LINE_PARAMS):
    """Mixed gradient: score-function term for the pools plus the analytic DSAC term.

    ``grad = 1/K sum_k [(E_k - b) d log p(H_k) + d E_k]`` where ``E_k`` is the
    expected loss over pool k.  Returns ``(gradient, mean expected loss)``.
    """
    if example.gt_line is None:
        raise MissingGroundTruth("NG-DSAC training needs gt_line")
    fw = net.forward(example.features, example.centers)
    pts = fw.points
    dist = GuidanceDistribution(fw.weights)
    solver = LineSolver()
    score_fn = SoftInlierScore(params)
    base = int(rng.integers(0, 2**62))
    sampler = SamplerConfig(config.M, 2, base, config.max_resample_attempts)
    pool_rng = make_rng(base)
    expected = np.empty(config.K)
    counts = np.empty((config.K, pts.shape[0]))
    d_pts = np.zeros_like(pts)
    for k in range(config.K):
        pool = sample_pool(pts, dist, sampler, solver, score_fn, pool_rng)
        expected[k], g, _, _ = pool_line_expectation(pts, pool.minimal_sets, example.gt_line, params)
        d_pts += g
        counts[k] = pool.draw_counts
    if not np.all(np.isfinite(expected)):
        raise NonFiniteLoss("expected loss is not finite")
    b = expected.mean() if config.baseline == "mean" else 0.0
    coef = (expected - b) @ counts / config.K
    grads = net.backward(fw.cache, coef, d_pts / config.K, block=config.block_gradients)
    return grads, float(expected.mean())


# ---------------------------------------------------------------- KL initialization
def kl_target(residuals, sigma: float = 1e-3) -> np.ndarray:
    """Normalized ``exp(-d / (2 sigma^2))`` over the observation set."""
    d = np.asarray(residuals, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise DegenerateModel("epipolar error undefined for some correspondence")
    z = -d / (2.0 * sigma * sigma)
    z -= z.max()
    g = np.exp(z)
    return g / g.sum()


def kl_divergence(target, weights) -> float:
    t = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    mask = t > 0
    return float(np.sum(t[mask] * (np.log(t[mask]) - np.log(w[mask]))))


def kl_init_step(example, net, sigma: float = 1e-3, kind: ModelKind = ModelKind.ESSENTIAL):
    """Gradient and value of ``KL(target || p(y; w))`` for one labeled scene."""
    gt = example.gt_essential if kind is ModelKind.ESSENTIAL else example.gt_fundamental
    if gt is None:
        raise MissingGroundTruth("KL initialization needs a ground-truth model")
    corrs = example.corrs if kind is ModelKind.ESSENTIAL else example.pixel_corrs()
    target = kl_target(kernels.epipolar_residuals(np.reshape(gt, (1, 3, 3)), corrs)[0], sigma)
    fw = net.forward(example.features())
    return net.backward(fw.cache, -target), kl_divergence(target, fw.weights)


# ---------------------------------------------------------------- optimizer
@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state: AdamState, learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError("gradient shape differs from parameter shape")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# ---------------------------------------------------------------- loop
@dataclass
class TrainRecord:
    iteration: int
    phase: str
    loss: float
    kl: float
    seconds: float
    skipped: int = 0


def _example_gradient(example, net, config, rng, task):
    if config.objective == "line":
        return ng_dsac_gradient(example, net, config, rng)
    return ng_ransac_gradient(example, net, config, rng, task)


def train_loop(
    dataset: Sequence,
    net,
    config: TrainConfig,
    callbacks: Sequence[Callable[[TrainRecord], None]] = (),
    task=None,
):
    """Optional KL phase, then expected-loss minimization with Adam.

    The self-supervised ``inliers`` objective strips all ground truth from
    the dataset before training.  Returns ``(net, records)``; ``net`` is
    updated in place.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.objective == "inliers":
        if config.kl_iterations:
            raise ValueError("KL initialization needs ground truth; not allowed for self-supervision")
        dataset = [ex.unlabeled() for ex in dataset]
    if task is None and config.objective != "line":
        task = EpipolarTask(ModelKind.ESSENTIAL, 8, objective=config.objective)
    kind = getattr(task, "kind", ModelKind.ESSENTIAL)

    rng = make_rng(config.seed)
    records: list[TrainRecord] = []
    start = time.perf_counter()
    state = AdamState.zeros_like(net.params)
    n_data = len(dataset)

    def emit(rec):
        records.append(rec)
        for cb in callbacks:
            cb(rec)

    for it in range(config.kl_iterations):
        batch = rng.integers(0, n_data, size=config.batch_size)
        grads = np.zeros_like(net.params)
        kls = []
        for i in batch:
            g, kl = kl_init_step(dataset[i], net, config.kl_sigma, kind)
            grads += g
            kls.append(kl)
        net.params, state = adam_step(net.params, grads / len(batch), state, config.kl_learning_rate)
        emit(TrainRecord(it, "kl", math.nan, float(np.mean(kls)), time.perf_counter() - start))
        _checkpoint(net, config, it)

    state = AdamState.zeros_like(net.params)
    consecutive_bad = 0
    for it in range(config.iterations):
        batch = rng.integers(0, n_data, size=config.batch_size)
        grads = np.zeros_like(net.params)
        losses = []
        skipped = 0
        for i in batch:
            try:
                g, loss = _example_gradient(dataset[i], net, config, rng, task)
            except NonFiniteLoss:
                skipped += 1
                consecutive_bad += 1
                log.warning("iteration %d: skipped example %d (non-finite loss)", it, i)
                if consecutive_bad >= config.max_nonfinite:
                    raise
                continue
            consecutive_bad = 0
            grads += g
            losses.append(loss)
        if losses:
            net.params, state = adam_step(net.params, grads / len(losses), state, config.learning_rate)
        emit(TrainRecord(it, "expected", float(np.mean(losses)) if losses else math.nan, math.nan,
                         time.perf_counter() - start, skipped))
        _checkpoint(net, config, config.kl_iterations + it)
    return net, records


def _checkpoint(net, config: TrainConfig, step: int) -> None:
    if config.checkpoint_every and config.checkpoint_path and (step + 1) % config.checkpoint_every == 0:
        if hasattr(net, "save"):
            net.save(config.checkpoint_path)

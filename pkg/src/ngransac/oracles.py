"""Exhaustive-enumeration and finite-difference oracles for the gradient estimators.

These recompute expectations over every possible hypothesis pool on instances
small enough to enumerate, and share as little code as practical with the
estimators they check: set probabilities, line hypotheses, soft scores and
expected losses are evaluated here from their definitions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimator import finish_pool
from .guidance import GuidanceNet, GuidanceNetSpec, unflatten
from .sampling import HypothesisPool
from .scoring import HardInlierScore, LINE_PARAMS, SoftScoreParams
from .solvers import LineSolver
from .training import PointSetExample, line_task_loss, pool_line_expectation


# ---------------------------------------------------------------- generic helpers
def central_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        out.flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return out


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def ordered_sets(n_observations: int, size: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n_observations), size)), dtype=np.int64)


def set_distribution(weights, sets: np.ndarray) -> np.ndarray:
    """Exact probability of each ordered minimal set under i.i.d. draws with whole-set redraw."""
    w = np.asarray(weights, dtype=np.float64)
    raw = np.prod(w[sets], axis=1)
    return raw / raw.sum()


def set_count_matrix(n_observations: int, sets: np.ndarray) -> np.ndarray:
    counts = np.zeros((len(sets), n_observations))
    for r, s in enumerate(sets):
        for i in s:
            counts[r, i] += 1.0
    return counts


def pool_logq_coefficients(weights, sets: np.ndarray, pools: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pool probabilities and the coefficients of ``d log q(pool)`` on ``log weights``.

    ``log q(set) = sum log w - log Z`` with ``d log Z / d log w_i`` equal to the
    expected count of i in one set, so each pool's coefficient vector is its
    draw counts minus M times that expectation.
    """
    q_set = set_distribution(weights, sets)
    counts = set_count_matrix(len(weights), sets)
    mean_counts = q_set @ counts
    q_pool = np.prod(q_set[pools], axis=1)
    coef = counts[pools].sum(axis=1) - pools.shape[1] * mean_counts
    return q_pool, coef


# ---------------------------------------------------------------- NG-RANSAC toy
def toy_line_example(seed: int = 3) -> PointSetExample:
    """Six points: three exactly on the ground-truth line, three off it."""
    rng = np.random.default_rng(seed)
    gt = np.array([0.3, -1.0, 0.4])
    gt = gt / math.hypot(gt[0], gt[1])
    xs = rng.uniform(0.1, 0.9, 3)
    on = np.column_stack([xs, -(gt[0] * xs + gt[2]) / gt[1]])
    off = rng.uniform(0.0, 1.0, (3, 2))
    return PointSetExample(np.vstack([on, off]), gt)


@dataclass
class NgRansacToyOracle:
    """Every pool of M hypotheses from ordered pairs, with its post-refit line loss."""

    example: PointSetExample
    M: int = 2
    tau: float = 0.05
    sets: np.ndarray = field(init=False)
    pools: np.ndarray = field(init=False)
    losses: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = self.example.points
        solver = LineSolver()
        score_fn = HardInlierScore(self.tau)
        self.sets = ordered_sets(pts.shape[0], 2)
        models = np.stack([solver.fit(pts[s])[0] for s in self.sets])
        scores = score_fn(solver.residuals(models, pts))
        self.pools = np.array(list(itertools.product(range(len(self.sets)), repeat=self.M)), dtype=np.int64)
        self.losses = np.empty(len(self.pools))
        for r, pool_idx in enumerate(self.pools):
            pool = HypothesisPool(models[pool_idx], self.sets[pool_idx], scores[pool_idx],
                                  np.zeros(self.M), np.zeros(pts.shape[0]))
            _, model, _, _ = finish_pool(pts, pool, solver, score_fn)
            self.losses[r] = line_task_loss(model, self.example.gt_line)[0]

    @staticmethod
    def weights(logits) -> np.ndarray:
        s = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
        return s / s.sum()

    def expected_loss(self, logits) -> float:
        q_set = set_distribution(self.weights(logits), self.sets)
        return float(np.prod(q_set[self.pools], axis=1) @ self.losses)

    def expected_gradient(self, logits, baseline: float = 0.0) -> np.ndarray:
        """``sum_H q(H) (l(H) - b) d log q(H) / d logits`` by enumeration."""
        w = self.weights(logits)
        q_pool, coef = pool_logq_coefficients(w, self.sets, self.pools)
        g_logw = (q_pool * (self.losses - baseline)) @ coef
        s = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
        return g_logw * (1.0 - s) - g_logw.sum() * s * (1.0 - s) / s.sum()

    def sample_pool_index(self, sets_drawn: np.ndarray) -> int:
        """Row of ``self.pools`` matching the given sequence of drawn minimal sets."""
        lookup = {tuple(s): r for r, s in enumerate(self.sets)}
        r = 0
        for s in sets_drawn:
            r = r * len(self.sets) + lookup[tuple(int(i) for i in s)]
        return r


# ---------------------------------------------------------------- NG-DSAC line oracle
def line_through(p, q) -> np.ndarray:
    """Homogeneous cross product, scaled to a unit normal."""
    l = np.cross(np.append(p, 1.0), np.append(q, 1.0))
    return l / math.hypot(l[0], l[1])


def soft_score_reference(line, points, params: SoftScoreParams) -> float:
    d = np.abs(points @ line[:2] + line[2])
    return params.alpha * float(np.sum(1.0 - 1.0 / (1.0 + np.exp(-(params.beta * d - params.beta * params.tau)))))


def raw_line_deviation(h, gt) -> float:
    ys = [-(h[0] * x + h[2]) / h[1] - (-(gt[0] * x + gt[2]) / gt[1]) for x in (0.0, 1.0)]
    return max(abs(y) for y in ys)


def reference_line_loss(h, gt) -> float:
    raw = min(raw_line_deviation(h, gt), 1.0)
    return raw if raw < 0.25 else 0.25 * math.sqrt(raw)


def reference_pool_expectation(points, sets, gt, params: SoftScoreParams) -> float:
    lines = [line_through(points[a], points[b]) for a, b in sets]
    scores = np.array([soft_score_reference(h, points, params) for h in lines])
    e = np.exp(scores - scores.max())
    sel = e / e.sum()
    return float(sel @ np.array([reference_line_loss(h, gt) for h in lines]))


@dataclass
class NgDsacLineOracle:
    """A four-patch line scene where both sampling and selection expectations are enumerated."""

    net: GuidanceNet
    features: np.ndarray
    centers: np.ndarray
    gt_line: np.ndarray
    M: int = 2
    params: SoftScoreParams = LINE_PARAMS

    def __post_init__(self):
        n = self.features.shape[0]
        self.sets = ordered_sets(n, 2)
        self.pools = np.array(list(itertools.product(range(len(self.sets)), repeat=self.M)), dtype=np.int64)

    def expected_loss(self, params: np.ndarray) -> float:
        """Doubly expected loss evaluated from definitions (no gradient code)."""
        fw = GuidanceNet(self.net.spec, params).forward(self.features, self.centers)
        q_set = set_distribution(fw.weights, self.sets)
        total = 0.0
        for pool_idx in self.pools:
            q = float(np.prod(q_set[pool_idx]))
            total += q * reference_pool_expectation(fw.points, self.sets[pool_idx], self.gt_line, self.params)
        return total

    def analytic_gradient(self, block: bool = False) -> np.ndarray:
        """Enumerated score-function term plus the analytic selection-expectation term."""
        fw = self.net.forward(self.features, self.centers)
        q_pool, coef = pool_logq_coefficients(fw.weights, self.sets, self.pools)
        g_logw = np.zeros(len(fw.weights))
        g_pts = np.zeros_like(fw.points)
        for q, c, pool_idx in zip(q_pool, coef, self.pools):
            e, d_pts, _, _ = pool_line_expectation(fw.points, self.sets[pool_idx], self.gt_line, self.params)
            g_logw += q * e * c
            g_pts += q * d_pts
        return self.net.backward(fw.cache, g_logw, g_pts, block=block)

    def loss_margins(self) -> float:
        """Smallest distance of any hypothesis' raw loss from a kink of the loss function."""
        fw = self.net.forward(self.features, self.centers)
        pts = fw.points
        margin = math.inf
        for a, b in self.sets:
            h = line_through(pts[a], pts[b])
            if abs(h[1]) < 1e-9:
                return 0.0
            y = [-(h[0] * x + h[2]) / h[1] + (self.gt_line[0] * x + self.gt_line[2]) / self.gt_line[1]
                 for x in (0.0, 1.0)]
            raw = max(abs(v) for v in y)
            margin = min(margin, abs(raw - 0.25), abs(raw - 1.0), abs(abs(y[0]) - abs(y[1])), abs(y[0]), abs(y[1]))
        return margin


def four_patch_line_oracle(seed: int = 0, hidden_dim: int = 8, n_blocks: int = 1, M: int = 2,
                           min_margin: float = 0.02, max_tries: int = 200) -> NgDsacLineOracle:
    """First seeded network whose hypotheses stay clear of every loss kink."""
    from .synthdata import LineSceneConfig, gen_line_scene

    scene = gen_line_scene(LineSceneConfig(grid=16, patch=8, clutter_fraction=0.25, seed=seed))
    spec = GuidanceNetSpec(4, hidden_dim, n_blocks, "points_and_weights")
    for k in range(max_tries):
        net = GuidanceNet(spec, seed=seed * 1000 + k)
        rng = np.random.default_rng(seed * 1000 + k)
        p = net.params.copy()
        # the weights head starts at zero; tilt it so the sampling term is non-trivial
        views = unflatten(p, spec)
        views["weights.w"][...] = rng.normal(0.0, 0.5, views["weights.w"].shape)
        net = GuidanceNet(spec, p)
        oracle = NgDsacLineOracle(net, scene.features, scene.centers, scene.gt_line, M)
        if oracle.loss_margins() > min_margin:
            return oracle
    raise RuntimeError("no kink-free configuration found")


# ---------------------------------------------------------------- seven-point root oracle
def seven_point_reference(corrs, grid: int = 20000) -> list[np.ndarray]:
    """Rank-deficient members of the 2D null-space pencil found by a sign-change scan.

    The pencil ``cos(t) F1 + sin(t) F2`` for ``t`` in ``[0, pi)`` covers every
    direction once; ``det`` is odd under ``t -> t + pi``, which closes the scan.
    Each bracketed root is refined by bisection.
    """
    c = np.asarray(corrs, dtype=np.float64)
    x1 = np.column_stack([c[:, 0], c[:, 1], np.ones(len(c))])
    x2 = np.column_stack([c[:, 2], c[:, 3], np.ones(len(c))])
    a = np.einsum("ni,nj->nij", x2, x1).reshape(len(c), 9)
    _, _, vt = np.linalg.svd(a)
    f1 = vt[-1].reshape(3, 3)
    f2 = vt[-2].reshape(3, 3)

    def det(t):
        t = np.asarray(t, dtype=np.float64)
        m = np.cos(t)[..., None, None] * f1 + np.sin(t)[..., None, None] * f2
        return np.linalg.det(m)

    ts = np.linspace(0.0, math.pi, grid, endpoint=False)
    vals = det(ts)
    closed = np.append(vals, -vals[0])
    ts_closed = np.append(ts, math.pi)
    roots = []
    for i in range(grid):
        lo_v, hi_v = closed[i], closed[i + 1]
        if lo_v == 0.0:
            roots.append(ts_closed[i])
            continue
        if lo_v * hi_v < 0:
            lo, hi = ts_closed[i], ts_closed[i + 1]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if np.sign(det(mid)) == np.sign(det(lo)):
                    lo = mid
                else:
                    hi = mid
            roots.append(0.5 * (lo + hi))
    out = []
    for t in roots:
        m = math.cos(t) * f1 + math.sin(t) * f2
        out.append(m / np.linalg.norm(m))
    return out

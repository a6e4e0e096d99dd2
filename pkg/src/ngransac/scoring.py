"""Hypothesis scoring: hard and soft inlier counts, DSAC selection distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class SoftScoreParams:
    alpha: float = 0.1
    beta: float = 100.0
    tau: float = 0.05

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.tau > 0):
            raise ValueError("alpha, beta and tau must be positive")


# default inlier thresholds per task; epipolar ones apply to the distance
# sqrt(geometry.epipolar_error), as EpipolarSolver.residuals reports it
ESSENTIAL_TAU = 1e-3
FUNDAMENTAL_TAU = 0.1
LINE_PARAMS = SoftScoreParams(0.1, 100.0, 0.05)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def inlier_count(model, observations, tau: float, residual_fn) -> int:
    """Number of observations with ``residual_fn(model, observations) < tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if len(observations) == 0:
        return 0
    return int(np.count_nonzero(np.asarray(residual_fn(model, observations)) < tau))


def soft_inlier_count(residuals, params: SoftScoreParams):
    """``alpha * sum(1 - sigmoid(beta*d - beta*tau))`` and its derivative w.r.t. each residual.

    Chain the returned ``d score / d residual`` with the residual function's own
    derivative (e.g. ``soft_inlier_line_grads``) to reach model parameters
    and observations.
    """
    d = np.asarray(residuals, dtype=np.float64)
    if d.size == 0:
        return 0.0, d.copy()
    sig = sigmoid(params.beta * d - params.beta * params.tau)
    value = params.alpha * float(np.sum(1.0 - sig))
    grad = -params.alpha * params.beta * sig * (1.0 - sig)
    return value, grad


def soft_inlier_line_grads(line, points, params: SoftScoreParams):
    """Soft inlier score of a line over (n, 2) points with gradients.

    Returns ``(score, d score / d line (3,), d score / d points (n, 2))``.
    The absolute value's derivative at an exactly zero residual is taken as 0.
    """
    line = np.asarray(line, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    signed = pts @ line[:2] + line[2]
    score, ds_dd = soft_inlier_count(np.abs(signed), params)
    g = ds_dd * np.sign(signed)
    d_line = np.array([g @ pts[:, 0], g @ pts[:, 1], g.sum()])
    d_points = g[:, None] * line[None, :2]
    return score, d_line, d_points


class HardInlierScore:
    """Pool scorer: inlier count at threshold ``tau`` (strict ``<``)."""

    def __init__(self, tau: float):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.tau = tau

    def __call__(self, residuals: np.ndarray) -> np.ndarray:
        return kernels.hard_counts(residuals, self.tau).astype(np.float64)


class SoftInlierScore:
    """Pool scorer: soft inlier count; ``tau`` doubles as the refit threshold."""

    def __init__(self, params: SoftScoreParams = LINE_PARAMS):
        self.params = params
        self.tau = params.tau

    def __call__(self, residuals: np.ndarray) -> np.ndarray:
        p = self.params
        return kernels.soft_scores(residuals, p.alpha, p.beta, p.tau)


def selection_distribution(scores) -> np.ndarray:
    """Softmax over hypothesis scores with max-subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def select_best(scores) -> int:
    """Argmax with ties broken by the lowest index."""
    s = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty pool")
    return int(np.argmax(s))

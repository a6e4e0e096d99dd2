"""Minimal solvers and least-squares refits for lines and epipolar matrices."""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import DegenerateMinimalSet, RankDeficient
from .geometry import Line2, Model3x3, ModelKind, as_corr_array, project_essential

RANK_TOL = 1e-10
CUBIC_DISC_TOL = 1e-12


# ---------------------------------------------------------------- lines
def solve_line_with_jacobian(p, q):
    """Normalized line through ``p`` and ``q`` plus d(a,b,c)/d(px,py,qx,qy).

    The normal is the direction ``q - p`` rotated by +90 degrees, so the sign
    of the result varies smoothly with the inputs.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d = q - p
    length = math.hypot(d[0], d[1])
    if length <= 1e-12:
        raise DegenerateMinimalSet("line points coincide")
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    n = rot @ d / length
    c = -float(n @ p)

    dn_dd = (rot - np.outer(n, d) / length) / length
    jac = np.zeros((3, 4))
    jac[:2, :2] = -dn_dd
    jac[:2, 2:] = dn_dd
    jac[2, :2] = -n + dn_dd.T @ p  # -n - p^T dn/dp with dn/dp = -dn/dd
    jac[2, 2:] = -(dn_dd.T @ p)
    return np.array([n[0], n[1], c]), jac


def solve_line(p, q) -> Line2:
    line, _ = solve_line_with_jacobian(p, q)
    return Line2(*line)


def fit_line_tls(points) -> np.ndarray:
    """Total-least-squares line (perpendicular residuals) through >= 2 points.

    The principal direction of the 2x2 scatter matrix comes from its
    closed-form half-angle; the normal is perpendicular to it.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 2:
        raise ValueError("line refit needs at least two points")
    centroid = pts.sum(axis=0) / pts.shape[0]
    d = pts - centroid
    sxx, syy, sxy = float(d[:, 0] @ d[:, 0]), float(d[:, 1] @ d[:, 1]), float(d[:, 0] @ d[:, 1])
    if sxx + syy <= 1e-24:
        raise DegenerateMinimalSet("all points coincide")
    theta = 0.5 * math.atan2(2.0 * sxy, sxx - syy)
    a, b = -math.sin(theta), math.cos(theta)
    return np.array([a, b, -(a * centroid[0] + b * centroid[1])])


# ---------------------------------------------------------------- epipolar
def hartley_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    if mean_dist <= 1e-15:
        raise RankDeficient("points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _apply(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ t[:2, :2].T + t[:2, 2]


def design_matrix(corrs: np.ndarray) -> np.ndarray:
    """Rows such that ``A @ vec(F) = x'^T F x`` with row-major vec."""
    x1, y1, x2, y2 = corrs.T
    one = np.ones_like(x1)
    return np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, one], axis=1)


def _normalized_system(corrs: np.ndarray, normalize: bool):
    if normalize:
        t1 = hartley_transform(corrs[:, :2])
        t2 = hartley_transform(corrs[:, 2:])
        nc = np.hstack([_apply(t1, corrs[:, :2]), _apply(t2, corrs[:, 2:])])
    else:
        t1 = t2 = np.eye(3)
        nc = corrs
    return design_matrix(nc), t1, t2


def _unit(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m)


def solve_fundamental_8pt(corrs, normalize: bool = True) -> Model3x3:
    """Normalized 8-point fit with rank-2 enforcement; unit Frobenius norm."""
    c = as_corr_array(corrs)
    if c.shape[0] < 8:
        raise ValueError("the 8-point algorithm needs at least 8 correspondences")
    a, t1, t2 = _normalized_system(c, normalize)
    _, s, vt = np.linalg.svd(a)
    if s[7] / s[0] < RANK_TOL:
        raise RankDeficient(f"design matrix null space > 1 (s8/s1 = {s[7] / s[0]:.3g})")
    f = vt[-1].reshape(3, 3)
    u, sv, fvt = np.linalg.svd(f)
    sv[2] = 0.0
    f = (u * sv) @ fvt
    return Model3x3(_unit(t2.T @ f @ t1), ModelKind.FUNDAMENTAL)


def cubic_coefficients(a: np.ndarray, b: np.ndarray):
    """Coefficients (c3, c2, c1, c0) of ``det(a + lam * b)``."""

    def adj(m):
        return np.array(
            [
                [m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1], m[0, 2] * m[2, 1] - m[0, 1] * m[2, 2], m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]],
                [m[1, 2] * m[2, 0] - m[1, 0] * m[2, 2], m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0], m[0, 2] * m[1, 0] - m[0, 0] * m[1, 2]],
                [m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0], m[0, 1] * m[2, 0] - m[0, 0] * m[2, 1], m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]],
            ]
        )

    return (
        np.linalg.det(b),
        float(np.trace(adj(b) @ a)),
        float(np.trace(adj(a) @ b)),
        np.linalg.det(a),
    )


def real_cubic_roots(c3, c2, c1, c0) -> list[float]:
    """Real roots of ``c3 x^3 + c2 x^2 + c1 x + c0`` (trigonometric / Cardano).

    Leading coefficients that vanish relative to the others demote the
    polynomial.  Repeated roots are reported once.
    """
    scale = max(abs(c3), abs(c2), abs(c1), abs(c0))
    if scale == 0.0:
        return []
    if abs(c3) <= CUBIC_DISC_TOL * scale:
        if abs(c2) <= CUBIC_DISC_TOL * scale:
            return [] if abs(c1) <= CUBIC_DISC_TOL * scale else [-c0 / c1]
        disc = c1 * c1 - 4 * c2 * c0
        if disc < -CUBIC_DISC_TOL * c1 * c1:
            return []
        if abs(disc) <= CUBIC_DISC_TOL * max(c1 * c1, abs(4 * c2 * c0)):
            return [-c1 / (2 * c2)]
        r = math.sqrt(disc)
        # numerically stable pair
        qq = -0.5 * (c1 + math.copysign(r, c1))
        return sorted([qq / c2, c0 / qq]) if qq != 0.0 else [0.0]

    a, b, c = c2 / c3, c1 / c3, c0 / c3
    p = b - a * a / 3.0
    q = 2.0 * a ** 3 / 27.0 - a * b / 3.0 + c
    disc = -(4.0 * p ** 3 + 27.0 * q * q)
    ref = 4.0 * abs(p) ** 3 + 27.0 * q * q
    shift = -a / 3.0
    if ref == 0.0 or abs(disc) <= CUBIC_DISC_TOL * ref:
        if abs(p) <= CUBIC_DISC_TOL * max(1.0, a * a):
            roots = [shift]
        else:
            roots = [3.0 * q / p + shift, -1.5 * q / p + shift]
    elif disc > 0:
        m = 2.0 * math.sqrt(-p / 3.0)
        arg = 3.0 * q / (p * m)
        theta = math.acos(max(-1.0, min(1.0, arg))) / 3.0
        roots = [m * math.cos(theta - 2.0 * math.pi * k / 3.0) + shift for k in range(3)]
    else:
        s = math.sqrt(q * q / 4.0 + p ** 3 / 27.0)
        roots = [float(np.cbrt(-q / 2.0 + s)) + float(np.cbrt(-q / 2.0 - s)) + shift]

    def poly(x):
        return ((c3 * x + c2) * x + c1) * x + c0

    def dpoly(x):
        return (3 * c3 * x + 2 * c2) * x + c1

    polished = []
    for x in roots:
        for _ in range(3):
            d = dpoly(x)
            if d == 0.0:
                break
            step = poly(x) / d
            if not math.isfinite(step):
                break
            x -= step
        polished.append(x)
    return sorted(polished)


def solve_fundamental_7pt(corrs) -> list[Model3x3]:
    """All real solutions of the 7-point problem (1 to 3 rank-2 matrices)."""
    c = as_corr_array(corrs)
    if c.shape[0] != 7:
        raise ValueError("the 7-point algorithm needs exactly 7 correspondences")
    a, t1, t2 = _normalized_system(c, True)
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    if s[6] / s[0] < RANK_TOL:
        raise RankDeficient("design matrix null space dimension != 2")
    f1 = vt[-1].reshape(3, 3)
    f2 = vt[-2].reshape(3, 3)
    # det(lam * f1 + (1 - lam) * f2) = det(f2 + lam * (f1 - f2))
    coeffs = cubic_coefficients(f2, f1 - f2)
    mats = [lam * f1 + (1.0 - lam) * f2 for lam in real_cubic_roots(*coeffs)]
    if abs(coeffs[0]) <= CUBIC_DISC_TOL * max(abs(c) for c in coeffs):
        mats.append(f1 - f2)  # the root at infinity: f1 - f2 is itself singular
    return [Model3x3(_unit(t2.T @ f @ t1), ModelKind.FUNDAMENTAL) for f in mats]


def refit(inliers, kind: ModelKind):
    """Least-squares model over all inliers: TLS line or 8-point matrix."""
    if kind is ModelKind.LINE:
        return Line2(*fit_line_tls(inliers))
    c = as_corr_array(inliers)
    if c.shape[0] < 8:
        raise ValueError(f"refit of a {kind.value} matrix needs >= 8 correspondences")
    f = solve_fundamental_8pt(c)
    if kind is ModelKind.ESSENTIAL:
        return Model3x3(_unit(project_essential(f.m)), ModelKind.ESSENTIAL)
    return f


# ---------------------------------------------------------------- solver objects
class LineSolver:
    """Two-point line solver over (n, 2) point arrays; models are (3,) arrays."""

    kind = ModelKind.LINE
    sample_size = 2

    def fit(self, data: np.ndarray) -> list[np.ndarray]:
        (px, py), (qx, qy) = data[0], data[1]
        dx, dy = qx - px, qy - py
        length = math.hypot(dx, dy)
        if length <= 1e-12:
            raise DegenerateMinimalSet("line points coincide")
        a, b = -dy / length, dx / length
        return [np.array([a, b, -(a * px + b * py)])]

    def residuals(self, models: np.ndarray, data: np.ndarray) -> np.ndarray:
        return kernels.line_residuals(np.reshape(models, (-1, 3)), data)

    def refit(self, data: np.ndarray) -> np.ndarray:
        return fit_line_tls(data)


class EpipolarSolver:
    """7- or 8-point solver over (n, 4) correspondence arrays; models are (3, 3) arrays.

    For ``ModelKind.ESSENTIAL`` every hypothesis is projected onto the
    essential manifold.
    """

    def __init__(self, kind: ModelKind = ModelKind.ESSENTIAL, points: int = 8):
        if points not in (7, 8):
            raise ValueError("points must be 7 or 8")
        self.kind = kind
        self.sample_size = points

    def _finish(self, m: np.ndarray) -> np.ndarray:
        if self.kind is ModelKind.ESSENTIAL:
            return _unit(project_essential(m))
        return m

    def fit(self, data: np.ndarray) -> list[np.ndarray]:
        if self.sample_size == 7:
            return [self._finish(f.m) for f in solve_fundamental_7pt(data)]
        return [self._finish(solve_fundamental_8pt(data).m)]

    def residuals(self, models: np.ndarray, data: np.ndarray) -> np.ndarray:
        """Per-correspondence distances, the square root of the epipolar error."""
        return kernels.epipolar_distances(np.reshape(models, (-1, 3, 3)), data)

    def refit(self, data: np.ndarray) -> np.ndarray:
        return refit(data, self.kind).m

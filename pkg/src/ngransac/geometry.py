"""Geometric primitives and residuals for lines and two-view epipolar geometry.

Conventions: a correspondence is ``(x1, y1, x2, y2)`` with homogeneous points
``x = (x1, y1, 1)`` and ``x' = (x2, y2, 1)``; epipolar matrices satisfy
``x'^T M x = 0``.  A relative pose maps first-camera points to the second
camera as ``X2 = R @ X1 + t`` so that ``E = [t]_x R``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import CheiralityAmbiguous, DegenerateModel, ZeroVariance


class ModelKind(enum.Enum):
    FUNDAMENTAL = "fundamental"
    ESSENTIAL = "essential"
    LINE = "line"


@dataclass(frozen=True)
class Correspondence:
    x1: float
    y1: float
    x2: float
    y2: float
    ratio: Optional[float] = None
    gt_inlier: Optional[bool] = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError("correspondence coordinates must be finite")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio {self.ratio} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])


@dataclass(frozen=True)
class Model3x3:
    m: np.ndarray
    kind: ModelKind = ModelKind.FUNDAMENTAL

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
        if not np.linalg.norm(m) > 0:
            raise DegenerateModel("zero matrix")
        object.__setattr__(self, "m", m)

    def normalized(self) -> "Model3x3":
        return Model3x3(self.m / np.linalg.norm(self.m), self.kind)


@dataclass(frozen=True)
class Line2:
    """Line ``a*x + b*y + c = 0`` in normal form (``a**2 + b**2 == 1``)."""

    a: float
    b: float
    c: float

    @classmethod
    def from_coefficients(cls, a, b, c) -> "Line2":
        s = math.hypot(a, b)
        if s == 0.0:
            raise DegenerateModel("line normal is zero")
        return cls(a / s, b / s, c / s)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "translation", t / np.linalg.norm(t))


def as_corr_array(obs) -> np.ndarray:
    """Accept a Correspondence, a sequence of them, or an array; return (n, 4)."""
    if isinstance(obs, Correspondence):
        return obs.as_array()[None]
    if isinstance(obs, (list, tuple)) and obs and isinstance(obs[0], Correspondence):
        return np.array([c.as_array() for c in obs])
    arr = np.asarray(obs, dtype=np.float64)
    return arr.reshape(-1, 4)


def _matrix(m) -> np.ndarray:
    return m.m if isinstance(m, Model3x3) else np.asarray(m, dtype=np.float64)


def epipolar_error(y, m):
    """Symmetric first-order epipolar error of one or many correspondences.

    Returns a float for a single correspondence, an (n,) array otherwise.
    Raises DegenerateModel where both epipolar line gradients vanish.
    """
    single = isinstance(y, Correspondence) or np.ndim(y) == 1
    corrs = as_corr_array(y)
    res = kernels.epipolar_residuals_np(_matrix(m)[None], corrs)[0]
    if not np.all(np.isfinite(res)):
        raise DegenerateModel("epipolar line gradients vanish")
    return float(res[0]) if single else res


def point_line_distance(p, line) -> float | np.ndarray:
    """``|a*px + b*py + c|`` for one point (2,) or many (n, 2)."""
    l = line.as_array() if isinstance(line, Line2) else np.asarray(line, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    d = np.abs(p[..., 0] * l[0] + p[..., 1] * l[1] + l[2])
    return float(d) if d.ndim == 0 else d


@dataclass(frozen=True)
class CoordinateStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def normalize_coordinates(corrs, stats: Optional[CoordinateStats] = None):
    """Standardize each coordinate dimension; returns ``(normalized, stats)``.

    Without ``stats`` the per-dimension mean and population std of ``corrs``
    are used.
    """
    x = as_corr_array(corrs)
    if stats is None:
        std = x.std(axis=0)
        if np.any(std <= 0):
            raise ZeroVariance("a coordinate dimension is constant")
        stats = CoordinateStats(x.mean(axis=0), std)
    elif np.any(np.asarray(stats.std) <= 0):
        raise ZeroVariance("supplied standard deviation is not positive")
    return stats.apply(x), stats


# ---------------------------------------------------------------- essential matrices
def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    th = math.radians(angle_deg)
    kx = skew(k)
    return np.eye(3) + math.sin(th) * kx + (1.0 - math.cos(th)) * (kx @ kx)


def compose_essential(pose: Pose) -> np.ndarray:
    return skew(pose.translation) @ pose.rotation


def enforce_rank2(m: np.ndarray) -> np.ndarray:
    u, s, vt = np.linalg.svd(m)
    s[2] = 0.0
    return (u * s) @ vt


def project_essential(m: np.ndarray) -> np.ndarray:
    """Nearest essential matrix: singular values ``(s, s, 0)`` with s the mean of the top two."""
    u, s, vt = np.linalg.svd(m)
    mean = 0.5 * (s[0] + s[1])
    return (u * np.array([mean, mean, 0.0])) @ vt


def triangulate(p2: np.ndarray, corrs: np.ndarray) -> np.ndarray:
    """Linear triangulation with the first camera at ``[I | 0]``; returns (n, 3)."""
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    x1, y1, x2, y2 = corrs.T
    a = np.stack(
        [
            x1[:, None] * p1[2] - p1[0],
            y1[:, None] * p1[2] - p1[1],
            x2[:, None] * p2[2] - p2[0],
            y2[:, None] * p2[2] - p2[1],
        ],
        axis=1,
    )
    _, _, vt = np.linalg.svd(a)
    xh = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return xh[:, :3] / xh[:, 3:4]


def essential_candidates(e: np.ndarray):
    """The four ``(R, t)`` factorizations of an essential matrix."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    out = []
    for r in (u @ w @ vt, u @ w.T @ vt):
        out.append((r, t))
        out.append((r, -t))
    return out


def decompose_essential(e, supports) -> Pose:
    """Pick the factorization of ``e`` with a strict majority of supports in front of both cameras."""
    corrs = as_corr_array(supports)
    if corrs.shape[0] == 0:
        raise ValueError("decompose_essential needs at least one support")
    best, best_votes = None, -1
    for r, t in essential_candidates(_matrix(e)):
        pts = triangulate(np.hstack([r, t[:, None]]), corrs)
        z1 = pts[:, 2]
        z2 = (pts @ r.T + t)[:, 2]
        votes = int(np.count_nonzero((z1 > 0) & (z2 > 0)))
        if votes > best_votes:
            best, best_votes = (r, t), votes
    if 2 * best_votes <= corrs.shape[0]:
        raise CheiralityAmbiguous(
            f"best candidate has {best_votes} of {corrs.shape[0]} supports in front"
        )
    return Pose(*best)


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    # 2*asin(|Ra-Rb|_F / (2*sqrt 2)) equals acos((tr(Ra^T Rb)-1)/2) but keeps
    # precision for tiny angles
    s = np.linalg.norm(r_a - r_b) / (2.0 * math.sqrt(2.0))
    return math.degrees(2.0 * math.asin(min(1.0, s)))


def axis_angle_deg(t_a: np.ndarray, t_b: np.ndarray) -> float:
    """Angle between two undirected axes, in [0, 90]."""
    a = t_a / np.linalg.norm(t_a)
    b = t_b / np.linalg.norm(t_b)
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), abs(float(a @ b))))


def angular_pose_error(estimate: Pose, gt: Pose) -> float:
    """Maximum of rotation angle and translation-axis angle, in degrees."""
    return max(
        rotation_angle_deg(estimate.rotation, gt.rotation),
        axis_angle_deg(estimate.translation, gt.translation),
    )

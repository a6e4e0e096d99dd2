"""Seeded synthetic scenes: two-view correspondences and rasterized lines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Pose, compose_essential, rotation_about_axis
from .sampling import make_rng

SIDE_INFO_KINDS = ("none", "informative", "uninformative")


@dataclass(frozen=True)
class EpipolarSceneConfig:
    n_correspondences: int = 500
    outlier_rate: float = 0.5
    noise_std: float = 1e-3
    pose: Optional[Pose] = None
    side_info: str = "none"
    separation: float = 0.3
    seed: int = 0
    max_rotation_deg: float = 15.0
    pixel_scale: float = 100.0
    image_half_width: float = 0.5

    def __post_init__(self):
        if self.n_correspondences < 16:
            raise ValueError("n_correspondences must be >= 16")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")
        if self.side_info not in SIDE_INFO_KINDS:
            raise ValueError(f"side_info must be one of {SIDE_INFO_KINDS}")
        if not 0.0 <= self.separation < 1.0:
            raise ValueError("separation must lie in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class EpipolarScene:
    """Calibrated correspondences (identity intrinsics) with optional ground truth.

    ``gt_fundamental`` is the matrix for coordinates multiplied by
    ``pixel_scale`` (the synthetic "pixel" units).
    """

    corrs: np.ndarray
    ratios: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    gt_pose: Optional[Pose]
    gt_essential: Optional[np.ndarray]
    gt_fundamental: Optional[np.ndarray]
    pixel_scale: float = 100.0
    seed: int = 0

    def __len__(self):
        return self.corrs.shape[0]

    def features(self) -> np.ndarray:
        """Network input: 4 coordinates, plus the ratio when side information exists."""
        if self.ratios is None:
            return self.corrs.copy()
        return np.hstack([self.corrs, self.ratios[:, None]])

    def pixel_corrs(self) -> np.ndarray:
        return self.corrs * self.pixel_scale

    def unlabeled(self) -> "EpipolarScene":
        """Copy with every piece of ground truth removed."""
        return dataclasses.replace(
            self, labels=None, gt_pose=None, gt_essential=None, gt_fundamental=None
        )

    def subset(self, idx) -> "EpipolarScene":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self,
            corrs=self.corrs[idx],
            ratios=None if self.ratios is None else self.ratios[idx],
            labels=None if self.labels is None else self.labels[idx],
        )


def random_pose(rng: np.random.Generator, max_rotation_deg: float = 15.0) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, max_rotation_deg)
    t = rng.normal(size=3)
    return Pose(rotation_about_axis(axis, angle), t / np.linalg.norm(t))


def _inlier_points(rng, pose: Pose, count: int, half: float) -> np.ndarray:
    out = np.empty((0, 4))
    while out.shape[0] < count:
        k = 2 * (count - out.shape[0]) + 8
        uv = rng.uniform(-half, half, size=(k, 2))
        z = rng.uniform(4.0, 8.0, size=k)
        pts = np.column_stack([uv * z[:, None], z])
        cam2 = pts @ pose.rotation.T + pose.translation
        ok = cam2[:, 2] > 0.5
        proj = cam2[ok, :2] / cam2[ok, 2:3]
        keep = np.all(np.abs(proj) <= 1.5 * half, axis=1)
        out = np.vstack([out, np.hstack([uv[ok][keep], proj[keep]])])
    return out[:count]


def gen_epipolar_scene(config: EpipolarSceneConfig) -> EpipolarScene:
    """Noisy projections of random 3D points plus uniformly placed outliers.

    The number of outliers is exactly ``round(outlier_rate * n)``; labels
    record which rows are inliers.  Informative side information draws
    inlier ratios from ``[0, (1-sep)/2]`` and outlier ratios from
    ``[(1+sep)/2, 1]``.
    """
    rng = make_rng(config.seed)
    n = config.n_correspondences
    pose = config.pose if config.pose is not None else random_pose(rng, config.max_rotation_deg)
    n_out = int(round(config.outlier_rate * n))
    n_in = n - n_out
    half = config.image_half_width

    inl = _inlier_points(rng, pose, n_in, half)
    if config.noise_std > 0:
        inl = inl + rng.normal(0.0, config.noise_std, size=inl.shape)
    outl = rng.uniform(-half, half, size=(n_out, 4))
    corrs = np.vstack([inl, outl])
    labels = np.concatenate([np.ones(n_in, bool), np.zeros(n_out, bool)])

    ratios = None
    if config.side_info == "informative":
        lo = (1.0 - config.separation) / 2.0
        hi = (1.0 + config.separation) / 2.0
        ratios = np.concatenate([rng.uniform(0.0, lo, n_in), rng.uniform(hi, 1.0, n_out)])
    elif config.side_info == "uninformative":
        ratios = rng.uniform(0.0, 1.0, n)

    perm = rng.permutation(n)
    e = compose_essential(pose)
    e = e / np.linalg.norm(e)
    k_inv = np.diag([1.0 / config.pixel_scale, 1.0 / config.pixel_scale, 1.0])
    f = k_inv.T @ e @ k_inv
    return EpipolarScene(
        corrs=corrs[perm],
        ratios=None if ratios is None else ratios[perm],
        labels=labels[perm],
        gt_pose=pose,
        gt_essential=e,
        gt_fundamental=f / np.linalg.norm(f),
        pixel_scale=config.pixel_scale,
        seed=config.seed,
    )


# ---------------------------------------------------------------- line scenes
@dataclass(frozen=True)
class LineSceneConfig:
    grid: int = 64
    patch: int = 8
    line: Optional[np.ndarray] = None
    point_noise: float = 0.0
    clutter_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.grid % self.patch:
            raise ValueError("grid must be divisible by patch")
        if not 0.0 <= self.clutter_fraction <= 1.0:
            raise ValueError("clutter_fraction must lie in [0, 1]")


@dataclass
class LineScene:
    """Raster in normalized coordinates: pixel (row i, col j) has center ((j+.5)/g, (i+.5)/g)."""

    raster: np.ndarray
    features: np.ndarray
    centers: np.ndarray
    gt_line: Optional[np.ndarray]
    bright: np.ndarray
    seed: int = 0

    def __len__(self):
        return self.features.shape[0]


def random_horizon(rng: np.random.Generator) -> np.ndarray:
    """Normalized line through (0, y0) and (1, y1), y0, y1 in [0.2, 0.8]."""
    y0, y1 = rng.uniform(0.2, 0.8, size=2)
    a, b = y1 - y0, -1.0
    s = np.hypot(a, b)
    return np.array([a, b, y0]) / s


def gen_line_scene(config: LineSceneConfig) -> LineScene:
    """One bright pixel per column on the line (row rounded), a fraction replaced by clutter."""
    from .guidance import patch_features

    rng = make_rng(config.seed)
    g = config.grid
    line = np.asarray(config.line, dtype=np.float64) if config.line is not None else random_horizon(rng)
    cols = np.arange(g)
    x = (cols + 0.5) / g
    if abs(line[1]) < 1e-12:
        raise ValueError("vertical lines are not supported by the column rasterizer")
    y = -(line[0] * x + line[2]) / line[1]
    rows = y * g - 0.5
    if config.point_noise > 0:
        rows = rows + rng.normal(0.0, config.point_noise, size=g)
    rows = np.rint(rows).astype(np.int64)

    n_clutter = int(round(config.clutter_fraction * g))
    clutter_cols = rng.choice(g, size=n_clutter, replace=False)
    bright_rc = np.column_stack([rows, cols])
    bright_rc[clutter_cols] = rng.integers(0, g, size=(n_clutter, 2))
    inside = np.all((bright_rc >= 0) & (bright_rc < g), axis=1)
    bright_rc = bright_rc[inside]

    raster = np.zeros((g, g))
    raster[bright_rc[:, 0], bright_rc[:, 1]] = 1.0
    feats, centers = patch_features(raster, config.patch)
    return LineScene(
        raster=raster,
        features=feats,
        centers=centers,
        gt_line=line,
        bright=(bright_rc[:, ::-1] + 0.5) / g,
        seed=config.seed,
    )

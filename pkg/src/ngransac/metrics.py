"""Evaluation metrics: cumulative-histogram AUC, inlier F-score, epipolar error stats."""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import EmptyInput, NoInliers


def auc(errors, max_threshold: float = 20.0, bin_width: float = 5.0) -> float:
    """Mean cumulative fraction of errors over bins ``[0,b), [b,2b), ...`` up to the threshold."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise EmptyInput("no errors to summarize")
    n_bins = max_threshold / bin_width
    if bin_width <= 0 or abs(n_bins - round(n_bins)) > 1e-9:
        raise ValueError("bin_width must divide max_threshold")
    edges = bin_width * np.arange(1, int(round(n_bins)) + 1)
    cumulative = np.array([np.count_nonzero(e < edge) for edge in edges]) / e.size
    return float(cumulative.mean())


def inlier_mask(model, corrs, tau: float) -> np.ndarray:
    """Correspondences whose distance ``sqrt(epipolar_error)`` is below ``tau``."""
    return kernels.epipolar_distances(np.reshape(model, (1, 3, 3)), corrs)[0] < tau


def fscore_from_masks(est: np.ndarray, gt: np.ndarray) -> float:
    both = np.count_nonzero(est & gt)
    n_est, n_gt = np.count_nonzero(est), np.count_nonzero(gt)
    if n_est == 0 or n_gt == 0 or both == 0:
        return 0.0
    precision, recall = both / n_est, both / n_gt
    return 2.0 * precision * recall / (precision + recall)


def fscore_inliers(est_model, gt_model, corrs, tau: float) -> float:
    """F-score of the estimated inlier set against the ground-truth inlier set."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return fscore_from_masks(inlier_mask(est_model, corrs, tau), inlier_mask(gt_model, corrs, tau))


def summary_stats(errors) -> tuple[float, float]:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise NoInliers("no inliers to summarize")
    return float(e.mean()), float(np.median(e))


def epipolar_stats(est_model, gt_model, corrs, tau: float) -> tuple[float, float]:
    """Mean and median ground-truth epipolar error over the estimate's inliers."""
    corrs = np.asarray(corrs, dtype=np.float64)
    mask = inlier_mask(est_model, corrs, tau)
    gt_err = kernels.epipolar_residuals(np.reshape(gt_model, (1, 3, 3)), corrs[mask])[0]
    return summary_stats(gt_err)


def success_rate(errors, threshold: float) -> float:
    e = np.asarray(errors, dtype=np.float64)
    return float(np.mean(e < threshold)) if e.size else math.nan

"""Benchmark sweeps over methods, hypothesis budgets, outlier rates and seeds."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .errors import CheiralityAmbiguous, NGRansacError, NoInliers
from .estimator import ng_ransac, progressive_ransac, ransac, with_ratio_filter
from .geometry import ModelKind, angular_pose_error, decompose_essential
from .io import config_header, format_float
from .metrics import epipolar_stats, fscore_inliers
from .sampling import GuidanceDistribution, SamplerConfig
from .scoring import ESSENTIAL_TAU, FUNDAMENTAL_TAU, HardInlierScore
from .solvers import EpipolarSolver
from .synthdata import EpipolarSceneConfig, gen_epipolar_scene

METHODS = ("ransac", "ransac+ratio", "prosac", "ngransac")
TASKS = ("essential", "fundamental")
FIELDS = (
    "task", "method", "M", "seed", "outlier_rate", "angular_error_deg", "pct_inliers",
    "f_score", "mean_epi", "median_epi", "wall_ms", "error",
)
FLOAT_FIELDS = ("outlier_rate", "angular_error_deg", "pct_inliers", "f_score", "mean_epi", "median_epi", "wall_ms")
STATS_TAU = {"essential": ESSENTIAL_TAU, "fundamental": 1.0}


def _canon(x):
    return None if x is None else float(f"{float(x):.9g}")


@dataclass(frozen=True)
class MetricRecord:
    """One benchmark cell; floats are stored at the nine significant digits the CSV carries."""

    task: str
    method: str
    M: int
    seed: int
    outlier_rate: float
    angular_error_deg: Optional[float] = None
    pct_inliers: Optional[float] = None
    f_score: Optional[float] = None
    mean_epi: Optional[float] = None
    median_epi: Optional[float] = None
    wall_ms: Optional[float] = None
    error: str = ""

    def __post_init__(self):
        for name in FLOAT_FIELDS:
            v = _canon(getattr(self, name))
            if v is not None and not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)
        if any(c in self.error for c in ",\n\r\""):
            object.__setattr__(self, "error", " ".join(self.error.replace(",", ";").replace('"', "'").split()))

    def row(self, wall_clock: bool = True) -> list[str]:
        out = []
        for name in FIELDS:
            v = getattr(self, name)
            if name == "wall_ms" and not wall_clock:
                v = None
            out.append(format_float(v) if name in FLOAT_FIELDS else str(v))
        return out


@dataclass(frozen=True)
class BenchMatrix:
    methods: tuple = ("ransac", "ngransac")
    budgets: tuple = (10, 100)
    outlier_rates: tuple = (0.85,)
    seeds: tuple = tuple(range(10))
    task: str = "essential"
    n_correspondences: int = 500
    noise_std: float = 1e-3
    side_info: str = "informative"
    separation: float = 0.3
    ratio_threshold: float = 0.8

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if any(int(m) < 1 for m in self.budgets):
            raise ValueError("budgets must be >= 1")

    def cells(self):
        return list(itertools.product(self.outlier_rates, self.seeds, self.methods, self.budgets))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


def _estimate(method, obs, scene, m, seed, solver, score_fn, net, matrix):
    config = SamplerConfig(m, solver.sample_size, seed)
    if method == "ransac":
        return ransac(obs, config, solver, score_fn)
    if method == "ransac+ratio":
        if scene.ratios is None:
            raise ValueError("ransac+ratio needs side information")
        return with_ratio_filter(ransac, obs, scene.ratios, matrix.ratio_threshold,
                                 config=config, solver=solver, score_fn=score_fn)
    if method == "prosac":
        if scene.ratios is None:
            raise ValueError("prosac needs side information for its ordering")
        return progressive_ransac(obs, -scene.ratios, config, solver, score_fn)
    if net is None:
        raise ValueError("ngransac needs a trained guidance model")
    dist = GuidanceDistribution(net.forward(scene.features()).weights)
    return ng_ransac(obs, dist, config, solver, score_fn)


def evaluate_estimate(task: str, model, scene, obs, tau: float) -> dict:
    """Per-scene quality numbers for one estimated model."""
    gt = scene.gt_essential if task == "essential" else scene.gt_fundamental
    residuals = EpipolarSolver().residuals(model, obs)[0]
    inliers = residuals < tau
    out = {"pct_inliers": 100.0 * np.count_nonzero(inliers) / obs.shape[0]}
    if task == "essential" and scene.gt_pose is not None:
        support = obs[inliers] if np.any(inliers) else obs
        try:
            out["angular_error_deg"] = angular_pose_error(decompose_essential(model, support), scene.gt_pose)
        except CheiralityAmbiguous:
            out["angular_error_deg"] = 180.0
    if gt is not None:
        out["f_score"] = fscore_inliers(model, gt, obs, tau)
        try:
            out["mean_epi"], out["median_epi"] = epipolar_stats(model, gt, obs, STATS_TAU[task])
        except NoInliers:
            pass
    return out


def run_cell(cell, matrix: BenchMatrix, net=None) -> MetricRecord:
    rate, seed, method, m = cell
    base = dict(task=matrix.task, method=method, M=int(m), seed=int(seed), outlier_rate=float(rate))
    kind = ModelKind.ESSENTIAL if matrix.task == "essential" else ModelKind.FUNDAMENTAL
    solver = EpipolarSolver(kind, 8 if kind is ModelKind.ESSENTIAL else 7)
    tau = ESSENTIAL_TAU if kind is ModelKind.ESSENTIAL else FUNDAMENTAL_TAU
    try:
        scene = gen_epipolar_scene(EpipolarSceneConfig(
            n_correspondences=matrix.n_correspondences, outlier_rate=rate, noise_std=matrix.noise_std,
            side_info=matrix.side_info, separation=matrix.separation, seed=int(seed),
        ))
        obs = scene.corrs if kind is ModelKind.ESSENTIAL else scene.pixel_corrs()
        start = time.perf_counter()
        report = _estimate(method, obs, scene, int(m), int(seed), solver, HardInlierScore(tau), net, matrix)
        wall = 1000.0 * (time.perf_counter() - start)
        return MetricRecord(**base, **evaluate_estimate(matrix.task, report.model, scene, obs, tau), wall_ms=wall)
    except (NGRansacError, ValueError, np.linalg.LinAlgError) as exc:
        return MetricRecord(**base, error=f"{type(exc).__name__}: {exc}")


def _run_cell_star(args):
    return run_cell(*args)


class MetricsWriter:
    """Serialized CSV writer: config comment, fixed header row, one flushed row per record."""

    def __init__(self, fh: TextIO, config: dict, wall_clock: bool = True):
        self.fh = fh
        self.wall_clock = wall_clock
        fh.write(config_header(config))
        self._csv = csv.writer(fh, lineterminator="\n")
        self._csv.writerow(FIELDS)
        fh.flush()

    def write(self, record: MetricRecord) -> None:
        self._csv.writerow(record.row(self.wall_clock))
        self.fh.flush()


def run_benchmark(matrix: BenchMatrix, net=None, out: Optional[TextIO] = None, jobs: int = 1,
                  config: Optional[dict] = None) -> list[MetricRecord]:
    """One record per cell, in cell order regardless of ``jobs``; failures become error rows."""
    cells = matrix.cells()
    writer = MetricsWriter(out, config if config is not None else matrix.to_dict()) if out is not None else None
    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            stream: Iterable = pool.map(_run_cell_star, [(c, matrix, net) for c in cells])
            for rec in stream:
                records.append(rec)
                if writer:
                    writer.write(rec)
    else:
        for c in cells:
            rec = run_cell(c, matrix, net)
            records.append(rec)
            if writer:
                writer.write(rec)
    return records


def parse_metrics(text: str) -> list[MetricRecord]:
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if tuple(header) != FIELDS:
        raise ValueError(f"unexpected header {header}")
    out = []
    for row in reader:
        d = dict(zip(FIELDS, row))
        kw = {}
        for name in FIELDS:
            v = d[name]
            if name in FLOAT_FIELDS:
                kw[name] = float(v) if v != "" else None
            elif name in ("M", "seed"):
                kw[name] = int(v)
            else:
                kw[name] = v
        out.append(MetricRecord(**kw))
    return out


def format_metrics(records, config: Optional[dict] = None, wall_clock: bool = True) -> str:
    buf = io.StringIO()
    writer = MetricsWriter(buf, config or {}, wall_clock)
    for r in records:
        writer.write(r)
    return buf.getvalue()


def summarize(records, threshold_deg: float = 5.0) -> dict:
    """Success rate and mean pct_inliers per (method, M, outlier_rate)."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.M, r.outlier_rate), []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        ok = [r for r in rs if not r.error]
        errs = [r.angular_error_deg for r in ok if r.angular_error_deg is not None]
        out[key] = {
            "cells": len(rs),
            "failed": len(rs) - len(ok),
            "success_rate": float(np.mean(np.array(errs) < threshold_deg)) if errs else None,
            "pct_inliers": float(np.mean([r.pct_inliers for r in ok])) if ok else None,
        }
    return out

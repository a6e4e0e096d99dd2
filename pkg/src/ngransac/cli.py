"""Command-line interface: synth, train, eval, bench, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Option values
resolve as command-line flag, then ``--config`` JSON file, then built-in
default; ``NGRANSAC_SEED`` replaces the built-in default seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import NGRansacError

log = logging.getLogger("ngransac")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _seed_default() -> int:
    env = os.environ.get("NGRANSAC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"NGRANSAC_SEED must be an integer, got {env!r}")


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}")
    return parse


# name -> (built-in default, help, extra add_argument kwargs)
DEFAULTS = {
    "synth": {
        "kind": ("epipolar", "scene type", {"choices": ["epipolar", "line"]}),
        "count": (1, "number of scenes", {"type": int}),
        "n": (500, "correspondences per epipolar scene", {"type": int}),
        "outlier_rate": (0.5, "fraction of outliers", {"type": float}),
        "noise": (1e-3, "inlier noise std (normalized units)", {"type": float}),
        "side_info": ("informative", "ratio side information", {"choices": ["none", "informative", "uninformative"]}),
        "separation": (0.3, "band separation for informative ratios", {"type": float}),
        "clutter": (0.25, "clutter fraction for line scenes", {"type": float}),
        "seed": (None, "first scene seed", {"type": int}),
    },
    "train": {
        "objective": ("pose", "training objective", {"choices": ["pose", "inliers", "fscore", "mean-epi", "line"]}),
        "k": (4, "pools per example", {"type": int}),
        "m": (16, "hypotheses per pool", {"type": int}),
        "lr": (1e-4, "Adam learning rate", {"type": float}),
        "iters": (200, "expected-loss iterations", {"type": int}),
        "init": ("kl", "initialization", {"choices": ["kl", "none"]}),
        "kl_iters": (300, "KL initialization iterations", {"type": int}),
        "kl_lr": (1e-3, "KL initialization learning rate", {"type": float}),
        "batch_size": (8, "examples per step", {"type": int}),
        "train_scenes": (64, "synthetic training scenes", {"type": int}),
        "n": (500, "correspondences per scene", {"type": int}),
        "outlier_rate": (0.85, "training outlier rate", {"type": float}),
        "side_info": ("informative", "ratio side information", {"choices": ["none", "informative", "uninformative"]}),
        "hidden": (32, "hidden width", {"type": int}),
        "blocks": (3, "residual blocks", {"type": int}),
        "seed": (None, "training seed", {"type": int}),
        "log": (None, "loss-curve CSV path", {}),
    },
    "eval": {
        "input": (None, "correspondence file (default: a synthetic scene)", {}),
        "model": (None, "guidance model file (required for ngransac)", {}),
        "method": ("ransac", "estimator", {"choices": ["ransac", "ransac+ratio", "prosac", "ngransac"]}),
        "m": (100, "hypotheses", {"type": int}),
        "task": ("essential", "model type", {"choices": ["essential", "fundamental"]}),
        "n": (500, "correspondences of the synthetic scene", {"type": int}),
        "outlier_rate": (0.5, "outlier rate of the synthetic scene", {"type": float}),
        "side_info": ("informative", "side information of the synthetic scene", {"choices": ["none", "informative", "uninformative"]}),
        "seed": (None, "scene and sampling seed", {"type": int}),
    },
    "bench": {
        "methods": ("ransac,ngransac", "comma-separated methods", {"type": _csv_list(str)}),
        "budgets": ("10,100", "comma-separated hypothesis budgets M", {"type": _csv_list(int)}),
        "outlier_rates": ("0.85", "comma-separated outlier rates", {"type": _csv_list(float)}),
        "seeds": (10, "number of scene seeds", {"type": int}),
        "seed": (None, "first scene seed", {"type": int}),
        "task": ("essential", "model type", {"choices": ["essential", "fundamental"]}),
        "n": (500, "correspondences per scene", {"type": int}),
        "side_info": ("informative", "side information", {"choices": ["none", "informative", "uninformative"]}),
        "model": (None, "guidance model file (required for ngransac)", {}),
        "jobs": (1, "parallel worker processes", {"type": int}),
        "no_wall_clock": (False, "leave the wall_ms column empty", {"action": "store_true"}),
    },
    "gradcheck": {
        "mc_pools": (20000, "pools for the Monte-Carlo comparison", {"type": int}),
        "seven_point_scenes": (200, "random scenes for the 7-point root check", {"type": int}),
        "seed": (None, "sampling seed", {"type": int}),
    },
}
REQUIRED_OUT = {"synth", "train"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ngransac", description="Neural-guided robust estimation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "synth": "write synthetic scenes",
        "train": "train a guidance network",
        "eval": "estimate a model for one scene and print a JSON report",
        "bench": "run a benchmark sweep to CSV",
        "gradcheck": "run the gradient and solver oracle checks",
    }
    for name, opts in DEFAULTS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--out", help="output path" + (" (required)" if name in REQUIRED_OUT else ""))
        for key, (default, text, extra) in opts.items():
            flag = "--" + key.replace("_", "-")
            kw = dict(extra, default=None)
            p.add_argument(flag, dest=key, help=f"{text} (default: {default})", **kw)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Effective options: flag > config file > built-in default (seed: NGRANSAC_SEED)."""
    file_cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        file_cfg = loaded.get(args.command, loaded) if isinstance(loaded, dict) else {}
    effective = {}
    for key, (default, _, extra) in DEFAULTS[args.command].items():
        value = getattr(args, key)
        if value is None:
            if key in file_cfg:
                value = file_cfg[key]
            elif key == "seed":
                value = _seed_default()
            else:
                value = default
            if isinstance(value, str) and callable(extra.get("type")) and extra["type"] not in (str,):
                value = extra["type"](value)
        if "choices" in extra and value not in extra["choices"]:
            raise UsageError(f"--{key.replace('_', '-')}: {value!r} not in {extra['choices']}")
        effective[key] = value
    unknown = set(file_cfg) - set(DEFAULTS[args.command]) - {"out"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    effective["out"] = args.out if args.out is not None else file_cfg.get("out")
    return effective


# ---------------------------------------------------------------- commands
def cmd_synth(cfg: dict) -> int:
    from .io import scene_to_file, write_correspondences
    from .synthdata import EpipolarSceneConfig, LineSceneConfig, gen_epipolar_scene, gen_line_scene

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg["count"]):
        seed = cfg["seed"] + i
        if cfg["kind"] == "epipolar":
            scene = gen_epipolar_scene(EpipolarSceneConfig(
                n_correspondences=cfg["n"], outlier_rate=cfg["outlier_rate"], noise_std=cfg["noise"],
                side_info=cfg["side_info"], separation=cfg["separation"], seed=seed,
            ))
            write_correspondences(out / f"scene_{seed:06d}.txt", scene_to_file(scene, {"config": cfg, "seed": seed}))
        else:
            scene = gen_line_scene(LineSceneConfig(clutter_fraction=cfg["clutter"], seed=seed))
            np.savez(out / f"line_{seed:06d}.npz", raster=scene.raster, features=scene.features,
                     centers=scene.centers, gt_line=scene.gt_line)
    print(f"wrote {cfg['count']} {cfg['kind']} scene(s) to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    from .guidance import GuidanceNet, GuidanceNetSpec
    from .synthdata import EpipolarSceneConfig, LineSceneConfig, gen_epipolar_scene, gen_line_scene
    from .training import EpipolarTask, TrainConfig, train_loop

    seed = cfg["seed"]
    line = cfg["objective"] == "line"
    if cfg["init"] == "kl" and cfg["objective"] in ("inliers", "line"):
        cfg = dict(cfg, init="none")
        log.info("KL initialization skipped: objective %s has no ground-truth model", cfg["objective"])
    if line:
        data = [gen_line_scene(LineSceneConfig(clutter_fraction=0.25, seed=seed * 100003 + i))
                for i in range(cfg["train_scenes"])]
        spec = GuidanceNetSpec(4, cfg["hidden"], cfg["blocks"], "points_and_weights")
        task = None
    else:
        data = [gen_epipolar_scene(EpipolarSceneConfig(
            n_correspondences=cfg["n"], outlier_rate=cfg["outlier_rate"], side_info=cfg["side_info"],
            seed=seed * 100003 + i)) for i in range(cfg["train_scenes"])]
        spec = GuidanceNetSpec(data[0].features().shape[1], cfg["hidden"], cfg["blocks"])
        task = EpipolarTask(objective=cfg["objective"])
    net = GuidanceNet(spec, seed=seed)
    config = TrainConfig(
        K=cfg["k"], M=cfg["m"], learning_rate=cfg["lr"], batch_size=cfg["batch_size"], iterations=cfg["iters"],
        objective=cfg["objective"], seed=seed, kl_iterations=cfg["kl_iters"] if cfg["init"] == "kl" else 0,
        kl_learning_rate=cfg["kl_lr"],
    )
    rows = []
    net, records = train_loop(data, net, config, [rows.append], task=task)
    net.save(cfg["out"])
    if cfg["log"]:
        from .io import config_header, format_float

        with open(cfg["log"], "w", newline="") as fh:
            fh.write(config_header(cfg))
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "phase", "loss", "kl", "seconds", "skipped"])
            for r in records:
                w.writerow([r.iteration, r.phase, format_float(r.loss), format_float(r.kl),
                            format_float(r.seconds), r.skipped])
    last = records[-1] if records else None
    print(f"saved {cfg['out']}" + (f" (final {last.phase} loss {last.loss:.6g})" if last else ""))
    return 0


def cmd_eval(cfg: dict) -> int:
    from .bench import BenchMatrix, _estimate, evaluate_estimate
    from .geometry import ModelKind
    from .guidance import GuidanceNet
    from .io import file_to_scene, read_correspondences
    from .scoring import ESSENTIAL_TAU, FUNDAMENTAL_TAU, HardInlierScore
    from .solvers import EpipolarSolver
    from .synthdata import EpipolarSceneConfig, gen_epipolar_scene

    if cfg["input"]:
        scene = file_to_scene(read_correspondences(cfg["input"]))
    else:
        scene = gen_epipolar_scene(EpipolarSceneConfig(
            n_correspondences=cfg["n"], outlier_rate=cfg["outlier_rate"], side_info=cfg["side_info"],
            seed=cfg["seed"]))
    essential = cfg["task"] == "essential"
    solver = EpipolarSolver(ModelKind.ESSENTIAL if essential else ModelKind.FUNDAMENTAL, 8 if essential else 7)
    tau = ESSENTIAL_TAU if essential else FUNDAMENTAL_TAU
    obs = scene.corrs if essential else scene.pixel_corrs()
    net = GuidanceNet.load(cfg["model"]) if cfg["model"] else None
    report = _estimate(cfg["method"], obs, scene, cfg["m"], cfg["seed"], solver, HardInlierScore(tau), net,
                       BenchMatrix(task=cfg["task"]))
    result = report.to_dict()
    result["method"] = cfg["method"]
    result["metrics"] = evaluate_estimate(cfg["task"], report.model, scene, obs, tau)
    text = json.dumps(result, indent=2, sort_keys=True)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_bench(cfg: dict) -> int:
    from .bench import BenchMatrix, run_benchmark, summarize
    from .guidance import GuidanceNet

    matrix = BenchMatrix(
        methods=tuple(cfg["methods"]), budgets=tuple(cfg["budgets"]), outlier_rates=tuple(cfg["outlier_rates"]),
        seeds=tuple(range(cfg["seed"], cfg["seed"] + cfg["seeds"])), task=cfg["task"],
        n_correspondences=cfg["n"], side_info=cfg["side_info"],
    )
    net = GuidanceNet.load(cfg["model"]) if cfg["model"] else None
    header = dict(cfg, matrix=matrix.to_dict())
    if cfg["out"]:
        with open(cfg["out"], "w", newline="") as fh:
            records = run_benchmark(matrix, net, fh, cfg["jobs"], header)
    else:
        records = run_benchmark(matrix, net, sys.stdout, cfg["jobs"], header)
    for (method, m, rate), s in summarize(records).items():
        rate_txt = "n/a" if s["success_rate"] is None else f"{100 * s['success_rate']:.1f}%"
        print(f"{method:>13} M={m:<5} outliers={rate:.2f} success(<5deg)={rate_txt} failed={s['failed']}",
              file=sys.stderr)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    from .guidance import TabularGuidance
    from .oracles import (
        NgRansacToyOracle, central_difference, four_patch_line_oracle, relative_error,
        pool_logq_coefficients, seven_point_reference, toy_line_example,
    )
    from .sampling import make_rng
    from .solvers import solve_fundamental_7pt
    from .training import PointLineTask, TrainConfig, ng_ransac_gradient

    results = []

    def check(name, ok, detail):
        results.append(ok)
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    oracle = NgRansacToyOracle(toy_line_example())
    logits = np.random.default_rng(1).normal(0.0, 1.0, 6)
    exact = oracle.expected_gradient(logits)
    fd = central_difference(oracle.expected_loss, logits)
    err = relative_error(exact, fd).max()
    check("enumerated gradient vs finite differences", err < 1e-5, f"max rel err {err:.2e} (tol 1e-5)")

    with_b = oracle.expected_gradient(logits, oracle.expected_loss(logits))
    diff = np.abs(with_b - exact).max()
    check("baseline leaves the expected gradient unchanged", diff < 1e-10, f"max abs diff {diff:.2e} (tol 1e-10)")

    k = cfg["mc_pools"]
    mc, _ = ng_ransac_gradient(oracle.example, TabularGuidance(logits), TrainConfig(K=k, M=2, objective="line"),
                               make_rng(cfg["seed"]), PointLineTask())
    w = oracle.weights(logits)
    q, coef = pool_logq_coefficients(w, oracle.sets, oracle.pools)
    s = 1.0 / (1.0 + np.exp(-logits))
    per_pool = coef * (1 - s) - coef.sum(1, keepdims=True) * s * (1 - s) / s.sum()
    x = (oracle.losses - oracle.expected_loss(logits))[:, None] * per_pool
    sd = np.sqrt((q @ x**2 - exact**2) / k)
    z = np.abs(mc - exact) / sd
    check("Monte-Carlo gradient vs enumeration", z.max() < 4.5,
          f"K={k}, max |error|/sd {z.max():.2f} (tol 4.5), max rel err {relative_error(mc, exact).max():.2e}")

    dsac = four_patch_line_oracle()
    a = dsac.analytic_gradient(block=False)
    fd = central_difference(dsac.expected_loss, dsac.net.params, 1e-6)
    err = relative_error(a, fd).max()
    check("NG-DSAC gradient vs finite differences", err < 1e-4, f"max rel err {err:.2e} (tol 1e-4)")

    rng = make_rng(cfg["seed"])
    mismatches = 0
    for _ in range(cfg["seven_point_scenes"]):
        corrs = rng.uniform(-1.0, 1.0, (7, 4))
        if len(solve_fundamental_7pt(corrs)) != len(seven_point_reference(corrs)):
            mismatches += 1
    check("7-point root count vs pencil scan", mismatches == 0,
          f"{mismatches} mismatches over {cfg['seven_point_scenes']} scenes")

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 2


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "ngransac: error: a subcommand is required")
        cfg = resolve(args)
        if args.command in REQUIRED_OUT and not cfg["out"]:
            raise UsageError(f"ngransac {args.command}: error: --out is required")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](cfg)
    except (NGRansacError, OSError, ValueError, RuntimeError) as exc:
        print(f"ngransac {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point (``sparsevox <subcommand>``)."""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .. import costmodel
from ..voxcore import RngStream, registered_ops, save_array, vjp_check
from .config import RunConfig
from .pipeline import Model, run_pipeline
from .scene import SyntheticScene, gen_scene
from .train import train_toy

GRAD_TOL = 1e-4


def _run_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _emit(text: str, out=None):
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_gen_scene(args):
    cfg = _run_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    scene = gen_scene(cfg, RngStream(cfg.seed))
    scene.save(args.out)
    cfg.save(Path(args.out) / "config.txt")
    print(json.dumps({"out": str(args.out), "seed": cfg.seed, "occupancy": scene.occupancy_fraction}))
    return 0


def cmd_run_pipeline(args):
    cfg_path = args.config
    if cfg_path is None and args.scene and (Path(args.scene) / "config.txt").exists():
        cfg_path = Path(args.scene) / "config.txt"  # written by gen-scene
    cfg = _run_config(cfg_path)
    if args.scene:
        scene = SyntheticScene.load(args.scene)
    else:
        scene = gen_scene(cfg, RngStream(cfg.seed))
    res = run_pipeline(scene, Model(cfg), cfg)
    ccfg = costmodel.CostConfig(dims=cfg.dims, channels=cfg.channels, heads=cfg.heads, points=cfg.points,
                                classifier_width=cfg.classifier_width, n_classes=cfg.n_classes)
    ccfg = costmodel.config_from_instrumentation(ccfg, res.inst)
    ok, detail = costmodel.verify_against_instrumentation(costmodel.cost(ccfg, "sparsity-aware"), res.inst)
    report = json.loads(res.to_json())
    report["cost_check"] = dict(detail, ok=bool(ok))
    report["identities_hold"] = bool(res.report.check_identities())
    _emit(json.dumps(report, indent=2), args.report)
    if args.pred_out:
        save_array(args.pred_out, res.pred.labels.astype(np.float64))
    return 0 if ok else 1


def cmd_train_toy(args):
    cfg = _run_config(args.config)
    curve = train_toy(cfg)
    _emit(curve.to_json(), args.curve_out)
    r = curve.records
    print(json.dumps({"steps": len(r) - 1, "l_total_first": r[0]["l_total"], "l_total_last": r[-1]["l_total"],
                      "miou_first": r[0]["miou"], "miou_last": r[-1]["miou"], "aborted": curve.aborted}),
          file=sys.stderr if not args.curve_out else sys.stdout)
    return 1 if curve.aborted else 0


def default_cost_config() -> costmodel.CostConfig:
    text = resources.files("sparsevox").joinpath("configs/reference.cfg").read_text()
    return costmodel.CostConfig.from_text(text)


def cmd_cost_report(args):
    cfg = costmodel.CostConfig.load(args.config) if args.config else default_cost_config()
    if args.strategy == "both":
        out = costmodel.compare(cfg)
    else:
        out = costmodel.cost(cfg, args.strategy).to_dict()
    print(json.dumps(out, indent=2))
    return 0


def cmd_grad_check(args):
    ops = registered_ops() if args.op == "all" else [args.op]
    results = {}
    for op in ops:
        errs = [vjp_check(op, probe=RngStream(s)) for s in range(args.seeds)]
        worst = float(max(errs))
        results[op] = {"max_rel_error": worst, "pass": worst < GRAD_TOL}
    print(json.dumps(results, indent=2))
    return 0 if all(r["pass"] for r in results.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsevox")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate and save a synthetic scene")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("run-pipeline", help="one forward pass with a JSON report")
    p.add_argument("--config")
    p.add_argument("--scene")
    p.add_argument("--report")
    p.add_argument("--pred-out")
    p.set_defaults(func=cmd_run_pipeline)

    p = sub.add_parser("train-toy", help="gradient-descent training on one scene")
    p.add_argument("--config")
    p.add_argument("--curve-out")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("cost-report", help="analytical FLOPs of both refinement strategies")
    p.add_argument("--config")
    p.add_argument("--strategy", choices=("dense", "sparsity-aware", "both"), default="both")
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("grad-check", help="finite-difference check of a registered op")
    p.add_argument("--op", required=True, help="op name, or 'all'")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner and model inspector.

Verbs: generate, train, evaluate, describe, gradcheck, compare.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (describe_model, evaluate_checkpoint, generate_to_dir,
                         run_experiment)
from .tensor import NumericalError
from .training import standard_grad_checks


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grurcn",
        description="Convolutional GRU recurrence experiments on synthetic motion video")
    sub = parser.add_subparsers(dest="verb", required=True)
    specs = {
        "generate": "synthesize a dataset directory",
        "train": "train the configured architecture and write metrics",
        "evaluate": "re-score a saved checkpoint on the test split",
        "describe": "print per-layer shapes, parameter counts and cost estimates",
        "gradcheck": "verify analytic gradients against finite differences",
        "compare": "train several architectures on one dataset",
    }
    for verb, help_text in specs.items():
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--config", required=verb != "gradcheck",
                       help="flat key=value configuration file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")
        if verb == "evaluate":
            p.add_argument("--checkpoint", required=True)
        if verb == "gradcheck":
            p.add_argument("--negative-control", action="store_true",
                           help="corrupt one backward rule and require detection")
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _require_out(cfg: ExperimentConfig) -> str:
    if not cfg.out:
        raise ConfigError("key 'out': an output directory is required "
                          "(config 'out=' or flag --out)")
    return cfg.out


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "gradcheck":
            seed = args.seed if args.seed is not None else 0
            reports = standard_grad_checks(
                seed=seed,
                fault_op="tanh" if args.negative_control else None)
            ok = True
            for name, report in reports.items():
                status = "pass" if report.passed else "FAIL"
                print(f"{name}: max relative error {report.max_rel_err:.3e} "
                      f"(tolerance {report.tolerance:g}) {status}")
                ok = ok and report.passed
            if args.negative_control:
                detected = not reports["full_model"].passed
                print("negative control: fault "
                      + ("detected" if detected else "NOT detected"))
                return 0 if detected else 3
            return 0 if ok else 3

        cfg = _load(args)
        if args.verb == "generate":
            out = generate_to_dir(cfg, _require_out(cfg))
            print(f"dataset written to {out}")
        elif args.verb == "describe":
            print(json.dumps(describe_model(cfg), indent=2, sort_keys=True))
        elif args.verb == "evaluate":
            result = evaluate_checkpoint(cfg, args.checkpoint)
            print(json.dumps(result, indent=2, sort_keys=True))
        elif args.verb == "train":
            cfg = replace(cfg, compare_architectures=())
            report = run_experiment(cfg, _require_out(cfg))
            arch = cfg.model.architecture
            acc = report["architectures"][arch]["test_accuracy"]
            print(f"{arch}: test accuracy {acc:.4f} (metrics in {cfg.out})")
        elif args.verb == "compare":
            if not cfg.compare_architectures:
                raise ConfigError("key 'compare.architectures' is required for compare")
            report = run_experiment(cfg, _require_out(cfg))
            for arch, entry in report["architectures"].items():
                print(f"{arch}: test accuracy {entry['test_accuracy']:.4f}")
            if report["fusion"] is not None:
                print(f"fused: test accuracy {report['fusion']['fused_accuracy']:.4f}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

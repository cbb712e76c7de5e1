"""Command-line entry point: ``sirnn <command> [--config FILE | --preset NAME] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import load_config, output_root, preset_names
from .nn import CheckpointError, TrainingDiverged
from .sim import SimulationDiverged

COMMANDS = ("simulate", "dataset", "train", "eval", "sensitivity", "gradcheck", "run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sirnn", description="Simulate, learn and evaluate component dynamics surrogates.")
    ap.add_argument("--list-presets", action="store_true", help="print the shipped preset names and exit")
    sub = ap.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help="all stages in order" if name == "run" else f"{name} stage")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", help="INI run configuration")
        src.add_argument("--preset", help="shipped configuration name")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory (default: $SIRNN_OUT/<name> or runs/<name>)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.list_presets:
        print("\n".join(preset_names()))
        return 0
    if args.command is None:
        ap.print_help()
        return 2
    summary = {"command": args.command}
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        root = output_root(args.out, cfg)
        summary.update(config=cfg.name, config_hash=cfg.digest(), out=str(root))
        if args.command == "run":
            result = pipeline.run_all(cfg, root)
        else:
            result = pipeline.STAGES[args.command](cfg, root)
        summary["result"] = result
        ok = result.get("passed", True) if args.command == "gradcheck" else True
        summary["status"] = "ok" if ok else "fail"
        code = 0 if ok else 1
    except (pipeline.HashMismatch, CheckpointError, FileNotFoundError, TrainingDiverged,
            SimulationDiverged, ValueError) as exc:
        summary["status"] = "error"
        summary["error"] = str(exc)
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())

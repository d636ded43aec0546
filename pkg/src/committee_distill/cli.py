"""Command-line orchestration of the pipeline stages.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .errors import ConfigError, DependencyError, DistillError, UnknownPreset
from .pipeline import (
    ABLATION_PRESETS,
    STAGES,
    PipelineConfig,
    Workspace,
    ablation_preset,
    load_config,
    run_stage,
    save_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="committee-distill",
        description="Distill a small synthetic dataset by matching batch-norm "
                    "statistics of a weighted committee of teachers.")
    parser.add_argument("--config", help="pipeline config (YAML)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="runs", help="artifact root directory")
    parser.add_argument("--jobs", type=int, default=1,
                        help="concurrent independent jobs where supported")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage")
    ablate = sub.add_parser("ablate", help="emit an ablation config bundle")
    ablate.add_argument("--preset", required=True,
                        help=f"one of {', '.join(ABLATION_PRESETS)}")
    return parser


def _load(args) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig()
        cfg.validate()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except DistillError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "ablate":
            bundle = ablation_preset(args.preset, cfg)
            out_dir = os.path.join(args.out, "ablations", args.preset)
            os.makedirs(out_dir, exist_ok=True)
            for label, variant in bundle:
                path = os.path.join(out_dir, f"{label}.yaml")
                save_config(variant, path)
                print(path)
            return EXIT_OK
        ws = Workspace(args.out)
        manifest = run_stage(args.command, cfg, ws, jobs=args.jobs)
        print(f"{manifest.stage} done: run_id={manifest.run_id}")
        for path in manifest.outputs:
            print(f"  {path}")
        return EXIT_OK
    except (ConfigError, UnknownPreset) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

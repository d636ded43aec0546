#!/usr/bin/env python3
"""Run the full desk-scale pipeline end to end through the stage runner.

Squeezes the committee, assigns prior performance, distills at IPC 10,
trains a student on the distilled set, and emits the analysis report.
Artifacts land under --out; the dataset is rendered under --data-root on
first use.

    python3 scripts/run_desk_pipeline.py --out runs/desk --seed 0
"""

import argparse
import dataclasses
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from committee_distill.pipeline import Workspace, desk_preset, run_stage, \
    save_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--data-root", default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--voter-mode", default="prior",
                        choices=["prior", "equal", "random"])
    parser.add_argument("--label-mode", default="batch-specific",
                        choices=["batch-specific", "running"])
    parser.add_argument("--skip", nargs="*", default=[],
                        help="stages to skip (e.g. squeeze prior if reusing)")
    args = parser.parse_args()

    cfg = desk_preset(seed=args.seed, voter_mode=args.voter_mode,
                      label_mode=args.label_mode)
    if args.data_root:
        cfg = dataclasses.replace(cfg, data_root=args.data_root)
    ws = Workspace(args.out)
    save_config(cfg, os.path.join(args.out, "config.yaml"))

    for stage in ("squeeze", "prior", "recover", "label", "eval", "report"):
        if stage in args.skip:
            print(f"-- skipping {stage}")
            continue
        print(f"== {stage}")
        manifest = run_stage(stage, cfg, ws)
        for path in manifest.outputs:
            print(f"   {path}")

    metrics_dir = [p for p in os.listdir(os.path.join(args.out, "evals"))]
    for run_id in metrics_dir:
        metrics_path = os.path.join(args.out, "evals", run_id, "metrics.json")
        if os.path.exists(metrics_path):
            with open(metrics_path) as fh:
                print(f"{run_id}: {json.load(fh)}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Run an ablation bundle at desk scale and print a comparison table.

Teachers and the prior table are shared across the bundle; each variant
distills and evaluates with its own config.

    python3 scripts/compare_ablations.py --preset voter-modes --seeds 0 1 2
"""

import argparse
import dataclasses
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from committee_distill.data import in_memory_dataset
from committee_distill.model_zoo import BackboneSpec
from committee_distill.pipeline import ablation_preset, desk_preset
from committee_distill.posteval import train_student
from committee_distill.prior import assign_prior_performance
from committee_distill.recover import distill
from committee_distill.squeeze import pretrain


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--iterations", type=int, default=None,
                        help="override recovery iterations for quick passes")
    args = parser.parse_args()

    base = desk_preset()
    train, test = in_memory_dataset(base.dataset_id)
    print(f"dataset {base.dataset_id}: {len(train)} train / {len(test)} test")

    teachers = {}
    for arch in base.committee:
        spec = BackboneSpec(arch, train.num_classes,
                            train.manifest.resolution)
        teachers[arch] = pretrain(spec, train, base.squeeze, test_set=test)
        print(f"teacher {arch}: test {teachers[arch].test_accuracy:.1f}")

    committee = [teachers[a] for a in base.committee]
    prior_table = assign_prior_performance(
        committee, train, ipc=train.manifest.reference_ipc,
        eval_arch=base.eval_arch, seed=100, test_set=test,
        recover_cfg=base.prior_recover, posteval_cfg=base.prior_posteval)
    print(f"prior table: {prior_table.entries}")

    bundle = ablation_preset(args.preset, base)
    rows = []
    for label, cfg in bundle:
        accs = []
        for seed in args.seeds:
            cfg_seeded = dataclasses.replace(cfg, seed=seed)
            recover_cfg = cfg_seeded.recover_effective()
            if args.iterations:
                recover_cfg = dataclasses.replace(recover_cfg,
                                                  iterations=args.iterations)
            members = [teachers[a] for a in cfg_seeded.committee]
            sset = distill(train, members, prior_table, cfg_seeded.ipc,
                           recover_cfg)
            teacher = teachers[cfg_seeded.teacher_arch]
            top1, _ = train_student(sset, teacher, test,
                                    cfg_seeded.posteval_effective())
            accs.append(top1)
            print(f"  {label} seed {seed}: {top1:.1f}")
        rows.append((label, accs))

    print(f"\n{args.preset} results (mean over {len(args.seeds)} seeds)")
    for label, accs in rows:
        mean = sum(accs) / len(accs)
        print(f"  {label:16s} {mean:6.2f}  {['%.1f' % a for a in accs]}")


if __name__ == "__main__":
    main()

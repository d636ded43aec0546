"""Prior-performance assignment: each committee member's voting credential is
the test accuracy of a reference student trained on data distilled by that
member alone."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .data import LabeledDataset
from .errors import ConfigError, IncompleteCommittee, MissingPrior
from .model_zoo import config_digest

PRIOR_FORMAT_VERSION = 1


@dataclass
class PriorTable:
    dataset_id: str
    reference_ipc: int
    entries: dict[str, float]  # arch_id -> alpha (percent top-1)
    evaluation_arch: str
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for arch, alpha in self.entries.items():
            if not 0.0 <= alpha <= 100.0:
                raise ConfigError(
                    f"prior score for {arch} outside [0, 100]: {alpha}")

    def covers(self, arch_ids) -> bool:
        return all(a in self.entries for a in arch_ids)

    def to_json(self) -> str:
        return json.dumps({
            "format_version": PRIOR_FORMAT_VERSION,
            "dataset_id": self.dataset_id,
            "reference_ipc": self.reference_ipc,
            "entries": self.entries,
            "evaluation_arch": self.evaluation_arch,
            "provenance": self.provenance,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PriorTable":
        d = json.loads(text)
        if d.get("format_version") != PRIOR_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported prior table format_version {d.get('format_version')!r}")
        return cls(dataset_id=d["dataset_id"], reference_ipc=d["reference_ipc"],
                   entries=d["entries"], evaluation_arch=d["evaluation_arch"],
                   provenance=d.get("provenance", {}))

    def save(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PriorTable":
        with open(path) as fh:
            return cls.from_json(fh.read())


def lookup_alpha(table: PriorTable, arch_id: str) -> float:
    if arch_id not in table.entries:
        raise MissingPrior(f"no prior-performance entry for {arch_id!r}; "
                           f"have {sorted(table.entries)}")
    return table.entries[arch_id]


def _default_single_backbone_pipeline(teacher, dataset, test_set, ipc, eval_arch,
                                      seed, recover_cfg, posteval_cfg):
    """Distill with the single backbone, label with it, train a fresh student."""
    from dataclasses import replace

    from .model_zoo import BackboneSpec
    from .posteval import train_student
    from .recover import distill

    sset = distill(dataset, [teacher], prior_table=None, ipc=ipc,
                   cfg=replace(recover_cfg, seed=seed))
    student_spec = BackboneSpec(
        arch_id=eval_arch, num_classes=dataset.num_classes,
        input_resolution=dataset.manifest.resolution,
        channels=dataset.manifest.channels)
    cfg = replace(posteval_cfg, student_arch=eval_arch, seed=seed)
    top1, _ = train_student(sset, teacher, test_set, cfg,
                            student_spec=student_spec)
    return top1


def assign_prior_performance(committee, dataset: LabeledDataset,
                             ipc: int, eval_arch: str, seed: int,
                             test_set: LabeledDataset | None = None,
                             recover_cfg=None, posteval_cfg=None,
                             allow_nonreference_ipc: bool = False,
                             pipeline_fn=None, jobs: int = 1) -> PriorTable:
    """Score every committee member by its single-backbone pipeline.

    ``pipeline_fn(teacher, dataset, test_set, ipc, eval_arch, seed, ...)``
    may replace the full pipeline (tests stub it); the default runs recover
    with the lone backbone, batch-specific labels from it, and a fresh
    ``eval_arch`` student. Member pipelines are independent; ``jobs`` > 1
    runs them in a thread pool (member seeds fix the results either way).
    """
    committee = list(committee)
    if not committee:
        raise IncompleteCommittee("committee is empty")
    for t in committee:
        if t is None:
            raise IncompleteCommittee("committee contains a missing teacher")
        if t.dataset_id != dataset.dataset_id:
            raise IncompleteCommittee(
                f"teacher {t.arch_id} was trained on {t.dataset_id!r}, "
                f"not {dataset.dataset_id!r}")
    if ipc < 1:
        raise ConfigError(f"ipc must be >= 1, got {ipc}")
    if ipc != dataset.manifest.reference_ipc and not allow_nonreference_ipc:
        raise ConfigError(
            f"prior tables use the manifest reference IPC "
            f"({dataset.manifest.reference_ipc}); got ipc={ipc}. "
            f"Pass allow_nonreference_ipc=True to override.")

    if pipeline_fn is None:
        if recover_cfg is None or posteval_cfg is None:
            from .posteval import PostEvalConfig
            from .recover import RecoverConfig
            recover_cfg = recover_cfg or RecoverConfig.for_dataset(dataset.manifest)
            posteval_cfg = posteval_cfg or PostEvalConfig()
        pipeline_fn = _default_single_backbone_pipeline

    def score(member_idx, teacher):
        member_seed = seed * 1000 + member_idx
        alpha = pipeline_fn(teacher, dataset, test_set, ipc, eval_arch,
                            member_seed, recover_cfg, posteval_cfg)
        digest = config_digest({
            "teacher": teacher.config_digest,
            "ipc": ipc, "eval_arch": eval_arch, "seed": member_seed,
        })
        return teacher.arch_id, float(alpha), digest

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda it: score(*it),
                                    enumerate(committee)))
    else:
        results = [score(i, t) for i, t in enumerate(committee)]
    entries = {arch: alpha for arch, alpha, _ in results}
    provenance = {arch: digest for arch, _, digest in results}
    return PriorTable(dataset_id=dataset.dataset_id, reference_ipc=ipc,
                      entries=entries, evaluation_arch=eval_arch,
                      provenance=provenance)

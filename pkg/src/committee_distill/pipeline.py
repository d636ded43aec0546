"""Config loading, run manifests, the append-only ledger, stage orchestration,
and ablation presets.

Every stage writes its artifacts under one output root via a temp-then-rename
swap, records a RunManifest with content digests, and appends to the ledger.
Run ids are derived from config digests, so a rerun with identical inputs
lands on identical ids and digests.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import yaml

from .augment import AugmentFlags
from .data import (
    DatasetManifest,
    data_root,
    load_manifest,
    load_split,
    materialize_dataset,
)
from .errors import ConfigError, DependencyError, UnknownPreset
from .model_zoo import (
    BackboneSpec,
    config_digest,
    load_checkpoint,
    model_digest,
    save_checkpoint,
    tensor_digest,
)
from .posteval import PostEvalConfig, train_student
from .prior import PriorTable, assign_prior_performance
from .recover import RecoverConfig, SyntheticSet, distill, export_synthetic_set, \
    load_synthetic_set
from .softlabel import LabelCache, SoftLabelConfig, soft_labels
from .squeeze import SqueezeConfig, TrainedTeacher, pretrain
from .voting import VotingConfig

CONFIG_FORMAT_VERSION = 1
STAGES = ("squeeze", "prior", "recover", "label", "eval", "report")
ABLATION_PRESETS = ("n2-vs-n3", "voter-modes", "bssl-on-off",
                    "committee-growth", "sre2lpp-baseline")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    dataset_id: str = "cifar10like"
    data_root: str | None = None
    committee: tuple[str, ...] = ("tiny_cnn", "tiny_cnn_wide", "tiny_cnn_deep")
    teacher_arch: str = "tiny_cnn"
    eval_arch: str = "tiny_cnn"
    ipc: int = 10
    seed: int = 0
    # fixes the synthesis seed independently of `seed`, so eval-seed sweeps
    # reuse one distilled set; None couples it to `seed`
    recover_seed: int | None = None
    prior_ipc: int | None = None  # None -> the manifest's reference IPC
    squeeze: SqueezeConfig = field(default_factory=SqueezeConfig)
    voting: VotingConfig = field(default_factory=VotingConfig)
    recover: RecoverConfig = field(default_factory=RecoverConfig)
    posteval: PostEvalConfig = field(default_factory=PostEvalConfig)
    # budgets for the per-member pipelines behind prior assignment;
    # None reuses the main recover/posteval settings
    prior_recover: RecoverConfig | None = None
    prior_posteval: PostEvalConfig | None = None
    version: int = CONFIG_FORMAT_VERSION

    def validate(self):
        if self.version != CONFIG_FORMAT_VERSION:
            raise ConfigError(f"unsupported config version {self.version!r}")
        if not self.committee:
            raise ConfigError("committee must list at least one architecture")
        if self.teacher_arch not in self.committee:
            raise ConfigError(f"teacher_arch {self.teacher_arch!r} must be a "
                              f"committee member")
        if self.ipc < 1:
            raise ConfigError(f"ipc must be >= 1, got {self.ipc}")
        self.squeeze.validate()
        if len(self.committee) > 1:
            self.voting.validate(len(self.committee))
        self.recover.validate()
        self.posteval.validate()

    def digest(self) -> str:
        return config_digest(to_plain_dict(self))

    def digest_without_seeds(self) -> str:
        """Digest shared across a seed sweep; seeds live in RunManifest.seeds."""
        def strip(obj):
            if isinstance(obj, dict):
                return {k: strip(v) for k, v in obj.items() if k != "seed"}
            if isinstance(obj, list):
                return [strip(v) for v in obj]
            return obj
        return config_digest(strip(to_plain_dict(self)))

    def effective_recover_seed(self) -> int:
        return self.seed if self.recover_seed is None else self.recover_seed

    def recover_effective(self) -> RecoverConfig:
        return replace(self.recover, voting=self.voting,
                       seed=self.effective_recover_seed())

    def posteval_effective(self) -> PostEvalConfig:
        return replace(self.posteval, seed=self.seed)


def to_plain_dict(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_plain_dict(getattr(obj, f.name))
                for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain_dict(v) for k, v in obj.items()}
    return obj


_DATACLASS_SECTIONS = {
    "squeeze": SqueezeConfig,
    "voting": VotingConfig,
    "recover": RecoverConfig,
    "posteval": PostEvalConfig,
    "prior_recover": RecoverConfig,
    "prior_posteval": PostEvalConfig,
}

_TUPLE_FIELDS = {"momentum_or_betas", "betas", "rrc_scale", "rrc_ratio",
                 "init_crop_scale", "committee", "input_resolution"}


def _build_dataclass(cls, data: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key == "augmentation" and isinstance(value, dict):
            value = _build_dataclass(AugmentFlags, value, f"{path}.{key}")
        elif key == "voting" and isinstance(value, dict):
            value = _build_dataclass(VotingConfig, value, f"{path}.{key}")
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    allowed = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _DATACLASS_SECTIONS and isinstance(value, dict):
            value = _build_dataclass(_DATACLASS_SECTIONS[key], value, key)
        elif key == "committee" and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    cfg = PipelineConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    """Parse and validate a YAML pipeline config; unknown keys are rejected."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_plain_dict(cfg), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# workspace, manifests, ledger
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    run_id: str
    dataset_id: str
    stage: str
    config_digest: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    seeds: dict[str, int]
    started_at: float
    finished_at: float

    def to_dict(self):
        return dataclasses.asdict(self)


class Workspace:
    """Artifact store rooted at one output directory, with an append-only ledger."""

    def __init__(self, root):
        self.root = str(root)
        os.makedirs(self.root, exist_ok=True)

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def ledger_path(self) -> str:
        return self.path("ledger.jsonl")

    def append_ledger(self, manifest: RunManifest):
        with open(self.ledger_path, "a") as fh:
            fh.write(json.dumps(manifest.to_dict(), sort_keys=True) + "\n")

    def ledger_rows(self) -> list[dict]:
        if not os.path.exists(self.ledger_path):
            return []
        with open(self.ledger_path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def write_manifest(self, manifest: RunManifest):
        mdir = self.path("manifests")
        os.makedirs(mdir, exist_ok=True)
        _atomic_write_text(os.path.join(mdir, f"{manifest.run_id}.json"),
                           json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
        self.append_ledger(manifest)

    def teacher_dir(self, dataset_id, arch, digest) -> str:
        return self.path("teachers", dataset_id, arch, digest)

    def find_teacher(self, dataset_id, arch) -> str | None:
        base = self.path("teachers", dataset_id, arch)
        if not os.path.isdir(base):
            return None
        digests = sorted(os.listdir(base))
        return os.path.join(base, digests[-1]) if digests else None


def _atomic_write_text(path, text):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _StagedDir:
    """Build outputs in a temp dir, swap into place on success."""

    def __init__(self, final_dir):
        self.final_dir = final_dir
        parent = os.path.dirname(final_dir) or "."
        os.makedirs(parent, exist_ok=True)
        self.tmp_dir = tempfile.mkdtemp(prefix=".staging-", dir=parent)

    def __enter__(self):
        return self.tmp_dir

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp_dir, ignore_errors=True)
            return False
        if os.path.exists(self.final_dir):
            shutil.rmtree(self.final_dir)
        os.rename(self.tmp_dir, self.final_dir)
        return False


# ---------------------------------------------------------------------------
# stage implementations
# ---------------------------------------------------------------------------

def _dataset_manifest(cfg: PipelineConfig) -> DatasetManifest:
    root = data_root(cfg.data_root)
    manifest_path = os.path.join(root, cfg.dataset_id, "manifest.json")
    if os.path.exists(manifest_path):
        return load_manifest(manifest_path)
    return materialize_dataset(cfg.dataset_id, root)


def _splits(cfg: PipelineConfig):
    manifest = _dataset_manifest(cfg)
    root = data_root(cfg.data_root)
    return (manifest, load_split(manifest, "train", root),
            load_split(manifest, "test", root))


def _backbone_spec(cfg: PipelineConfig, manifest: DatasetManifest,
                   arch: str) -> BackboneSpec:
    return BackboneSpec(arch_id=arch, num_classes=manifest.num_classes,
                        input_resolution=manifest.resolution,
                        channels=manifest.channels)


def _load_teacher(ws: Workspace, cfg, manifest, arch) -> TrainedTeacher:
    tdir = ws.find_teacher(cfg.dataset_id, arch)
    if tdir is None:
        raise DependencyError(
            f"no teacher checkpoint for {arch!r} on {cfg.dataset_id!r}; "
            f"run the squeeze stage first", missing=[arch])
    model = load_checkpoint(os.path.join(tdir, "checkpoint.pt"))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    with open(os.path.join(tdir, "meta.json")) as fh:
        meta = json.load(fh)
    return TrainedTeacher(model=model, dataset_id=meta["dataset_id"],
                          train_accuracy=meta["train_accuracy"],
                          test_accuracy=meta["test_accuracy"],
                          config_digest=meta["config_digest"])


def _load_committee(ws, cfg, manifest) -> list[TrainedTeacher]:
    teachers, missing = [], []
    for arch in cfg.committee:
        try:
            teachers.append(_load_teacher(ws, cfg, manifest, arch))
        except DependencyError:
            missing.append(arch)
    if missing:
        raise DependencyError(
            f"missing teacher checkpoints for {missing} on "
            f"{cfg.dataset_id!r}", missing=missing)
    return teachers


def _stage_scope(stage: str, cfg: PipelineConfig) -> dict:
    """The config slice that determines a stage's outputs.

    Downstream stages recompute upstream run ids from the same slices, so an
    ablation that only touches post-eval settings reuses the recover outputs.
    """
    base = {"dataset": cfg.dataset_id, "committee": list(cfg.committee),
            "squeeze": to_plain_dict(cfg.squeeze)}
    if stage == "squeeze":
        return base
    if stage == "prior":
        return base | {"prior_ipc": cfg.prior_ipc, "eval_arch": cfg.eval_arch,
                       "recover": to_plain_dict(cfg.recover),
                       "voting": to_plain_dict(cfg.voting),
                       "posteval": to_plain_dict(cfg.posteval),
                       "seed": cfg.seed}
    recover_scope = base | {"voting": to_plain_dict(cfg.voting),
                            "recover": to_plain_dict(cfg.recover),
                            "ipc": cfg.ipc,
                            "seed": cfg.effective_recover_seed()}
    if stage == "recover":
        return recover_scope
    eval_scope = recover_scope | {"posteval": to_plain_dict(cfg.posteval),
                                  "teacher_arch": cfg.teacher_arch,
                                  "eval_seed": cfg.seed}
    return eval_scope


def _stage_run_id(stage: str, cfg: PipelineConfig) -> str:
    scoped = {"stage": stage, "scope": _stage_scope(stage, cfg)}
    return f"{stage}-{config_digest(scoped)[:12]}"


def run_squeeze(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> RunManifest:
    manifest, train, test = _splits(cfg)
    started = time.time()
    outputs = {}

    def train_one(arch):
        spec = _backbone_spec(cfg, manifest, arch)
        teacher = pretrain(spec, train, cfg.squeeze, test_set=test)
        digest = model_digest(teacher.model)[:16]
        final_dir = ws.teacher_dir(cfg.dataset_id, arch, digest)
        with _StagedDir(final_dir) as tmp:
            save_checkpoint(teacher.model, os.path.join(tmp, "checkpoint.pt"))
            meta = {
                "dataset_id": teacher.dataset_id,
                "arch_id": arch,
                "train_accuracy": teacher.train_accuracy,
                "test_accuracy": teacher.test_accuracy,
                "config_digest": teacher.config_digest,
                "seed": cfg.squeeze.seed,
            }
            with open(os.path.join(tmp, "meta.json"), "w") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
        return arch, final_dir, model_digest(teacher.model)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(train_one, cfg.committee))
    else:
        results = [train_one(a) for a in cfg.committee]
    for arch, path, digest in results:
        outputs[path] = digest

    run = RunManifest(
        run_id=_stage_run_id("squeeze", cfg), dataset_id=cfg.dataset_id,
        stage="squeeze", config_digest=cfg.digest_without_seeds(),
        inputs={"dataset": manifest.digest()}, outputs=outputs,
        seeds={"squeeze": cfg.squeeze.seed}, started_at=started,
        finished_at=time.time())
    ws.write_manifest(run)
    return run


def run_prior(cfg: PipelineConfig, ws: Workspace, jobs: int = 1) -> RunManifest:
    manifest, train, test = _splits(cfg)
    committee = _load_committee(ws, cfg, manifest)
    started = time.time()
    ipc = cfg.prior_ipc if cfg.prior_ipc is not None else manifest.reference_ipc
    recover_cfg = cfg.prior_recover if cfg.prior_recover is not None \
        else cfg.recover_effective()
    posteval_cfg = cfg.prior_posteval if cfg.prior_posteval is not None \
        else cfg.posteval_effective()
    table = assign_prior_performance(
        committee, train, ipc=ipc, eval_arch=cfg.eval_arch, seed=cfg.seed,
        test_set=test, recover_cfg=recover_cfg, posteval_cfg=posteval_cfg,
        allow_nonreference_ipc=cfg.prior_ipc is not None, jobs=jobs)
    path = ws.path("priors", f"{cfg.dataset_id}.prior")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    _atomic_write_text(path, table.to_json())

    run = RunManifest(
        run_id=_stage_run_id("prior", cfg), dataset_id=cfg.dataset_id,
        stage="prior", config_digest=cfg.digest_without_seeds(),
        inputs={t.arch_id: t.config_digest for t in committee},
        outputs={path: config_digest(table.entries)},
        seeds={"prior": cfg.seed}, started_at=started, finished_at=time.time())
    ws.write_manifest(run)
    return run


def _prior_table_for(cfg: PipelineConfig, ws: Workspace) -> PriorTable | None:
    needs_prior = cfg.voting.voter_mode == "prior" and len(cfg.committee) > 1
    path = ws.path("priors", f"{cfg.dataset_id}.prior")
    if not os.path.exists(path):
        if needs_prior:
            raise DependencyError(
                f"prior table missing: {path}; run the prior stage first",
                missing=[path])
        return None
    return PriorTable.load(path)


def run_recover(cfg: PipelineConfig, ws: Workspace) -> RunManifest:
    manifest, train, _ = _splits(cfg)
    committee = _load_committee(ws, cfg, manifest)
    prior_table = _prior_table_for(cfg, ws)
    started = time.time()
    sset = distill(train, committee, prior_table, cfg.ipc,
                   cfg.recover_effective())

    run_id = _stage_run_id("recover", cfg)
    final_dir = ws.path("distilled", cfg.dataset_id, run_id)
    with _StagedDir(final_dir) as tmp:
        export_synthetic_set(sset, tmp)
        _write_loss_csv(sset, os.path.join(tmp, "loss.csv"))
        _write_timing_csv(sset, os.path.join(tmp, "timing.csv"))

    run = RunManifest(
        run_id=run_id, dataset_id=cfg.dataset_id, stage="recover",
        config_digest=cfg.digest_without_seeds(),
        inputs={t.arch_id: t.config_digest for t in committee},
        outputs={final_dir: tensor_digest(sset.images)},
        seeds={"recover": cfg.seed}, started_at=started,
        finished_at=time.time())
    ws.write_manifest(run)
    return run


def _write_loss_csv(sset: SyntheticSet, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "member", "ce", "bn_align", "weight",
                         "total"])
        for prov in sset.provenance:
            for row in prov.member_rows:
                writer.writerow(row)


def _write_timing_csv(sset: SyntheticSet, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mark_ms", "images"])
        for prov in sset.provenance:
            for entry in prov.timing:
                for i, mark in enumerate(entry["marks_ms"]):
                    writer.writerow([i, mark, entry["images_per_iteration"]])


def _distilled_dir(cfg: PipelineConfig, ws: Workspace) -> str:
    run_id = _stage_run_id("recover", cfg)
    path = ws.path("distilled", cfg.dataset_id, run_id)
    if not os.path.isdir(path):
        raise DependencyError(
            f"distilled set missing: {path}; run the recover stage first",
            missing=[path])
    return path


def run_label(cfg: PipelineConfig, ws: Workspace) -> RunManifest:
    manifest, _, _ = _splits(cfg)
    teacher = _load_teacher(ws, cfg, manifest, cfg.teacher_arch)
    ddir = _distilled_dir(cfg, ws)
    sset = load_synthetic_set(ddir)
    started = time.time()

    cache = LabelCache()
    label_cfg = SoftLabelConfig(mode=cfg.posteval.label_mode)
    batch = cfg.posteval.batch_size
    for start in range(0, len(sset), batch):
        chunk = sset.images[start:start + batch]
        cache.put(soft_labels(teacher, chunk, label_cfg))

    run_id = _stage_run_id("label", cfg)
    final_dir = ws.path("labels", run_id)
    with _StagedDir(final_dir) as tmp:
        cache.save(os.path.join(tmp, "cache.npz"))

    run = RunManifest(
        run_id=run_id, dataset_id=cfg.dataset_id, stage="label",
        config_digest=cfg.digest_without_seeds(),
        inputs={"distilled": ddir, "teacher": teacher.config_digest},
        outputs={final_dir: config_digest({"entries": len(cache)})},
        seeds={}, started_at=started, finished_at=time.time())
    ws.write_manifest(run)
    return run


def run_eval(cfg: PipelineConfig, ws: Workspace) -> RunManifest:
    manifest, _, test = _splits(cfg)
    teacher = _load_teacher(ws, cfg, manifest, cfg.teacher_arch)
    ddir = _distilled_dir(cfg, ws)
    sset = load_synthetic_set(ddir)
    started = time.time()
    spec = _backbone_spec(cfg, manifest, cfg.posteval.student_arch)
    top1, trace = train_student(sset, teacher, test, cfg.posteval_effective(),
                                student_spec=spec)

    run_id = _stage_run_id("eval", cfg)
    final_dir = ws.path("evals", run_id)
    with _StagedDir(final_dir) as tmp:
        trace.to_csv(os.path.join(tmp, "trace.csv"))
        with open(os.path.join(tmp, "metrics.json"), "w") as fh:
            json.dump({"test_top1": top1, "seed": cfg.seed,
                       "label_mode": cfg.posteval.label_mode}, fh, indent=2)

    run = RunManifest(
        run_id=run_id, dataset_id=cfg.dataset_id, stage="eval",
        config_digest=cfg.digest_without_seeds(),
        inputs={"distilled": ddir, "teacher": teacher.config_digest},
        outputs={final_dir: config_digest({"test_top1": top1})},
        seeds={"eval": cfg.seed}, started_at=started, finished_at=time.time())
    ws.write_manifest(run)
    return run


def run_report(cfg: PipelineConfig, ws: Workspace) -> RunManifest:
    from .analysis import bn_discrepancy, emit_curves, intraclass_cosine, \
        timing_probe
    from .posteval import TrainingTrace

    manifest, train, _ = _splits(cfg)
    teacher = _load_teacher(ws, cfg, manifest, cfg.teacher_arch)
    ddir = _distilled_dir(cfg, ws)
    eval_dir = ws.path("evals", _stage_run_id("eval", cfg))
    if not os.path.isdir(eval_dir):
        raise DependencyError(f"eval outputs missing: {eval_dir}",
                              missing=[eval_dir])
    sset = load_synthetic_set(ddir)
    started = time.time()

    report = {}
    if sset.ipc >= 2:
        diversity = intraclass_cosine(sset, teacher.model)
        report["intraclass_cosine"] = {
            "overall_mean": diversity.overall_mean,
            "per_class": {str(k): v for k, v in diversity.per_class.items()},
        }
    batch = min(len(sset), 64)
    gaps = bn_discrepancy([sset.images[:batch]], teacher)
    report["bn_discrepancy"] = [
        {"layer": lid, "mean_gap": m, "var_gap": v}
        for lid, m, v in gaps.per_layer]
    timing_csv = os.path.join(ddir, "timing.csv")
    if os.path.exists(timing_csv):
        report["ms_per_image_iteration"] = timing_probe(timing_csv)

    run_id = _stage_run_id("report", cfg)
    final_dir = ws.path("reports", run_id)
    trace = TrainingTrace.from_csv(os.path.join(eval_dir, "trace.csv"))
    with _StagedDir(final_dir) as tmp:
        emit_curves([trace], [cfg.dataset_id], tmp)
        with open(os.path.join(tmp, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)

    run = RunManifest(
        run_id=run_id, dataset_id=cfg.dataset_id, stage="report",
        config_digest=cfg.digest_without_seeds(),
        inputs={"distilled": ddir, "eval": eval_dir},
        outputs={final_dir: config_digest(report)},
        seeds={}, started_at=started, finished_at=time.time())
    ws.write_manifest(run)
    return run


_STAGE_RUNNERS = {
    "squeeze": run_squeeze,
    "prior": run_prior,
    "recover": run_recover,
    "label": run_label,
    "eval": run_eval,
    "report": run_report,
}


def run_stage(stage: str, config: PipelineConfig, manifest_store: Workspace,
              jobs: int = 1) -> RunManifest:
    if stage not in _STAGE_RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; one of {STAGES}")
    runner = _STAGE_RUNNERS[stage]
    if stage in ("squeeze", "prior"):
        return runner(config, manifest_store, jobs=jobs)
    return runner(config, manifest_store)


def desk_preset(seed: int = 0, voter_mode: str = "prior",
                label_mode: str = "batch-specific") -> PipelineConfig:
    """The frozen desk-scale experiment configuration.

    A 10-class 32x32 procedural set, a committee of three tiny CNNs of
    deliberately mixed quality, 500 recovery iterations at IPC 10, and a
    100-epoch post-eval. Thresholds in the acceptance suite were calibrated
    against this exact preset.
    """
    desk_flags = AugmentFlags(rrc_scale=(0.5, 1.0))
    desk_pe_flags = AugmentFlags(rrc_scale=(0.5, 1.0), cutmix=True)
    return PipelineConfig(
        dataset_id="cifar10like",
        committee=("tiny_cnn", "tiny_cnn_wide", "tiny_cnn_narrow"),
        teacher_arch="tiny_cnn",
        eval_arch="tiny_cnn",
        ipc=10,
        seed=seed,
        squeeze=SqueezeConfig(epochs=30, batch_size=128, seed=0,
                              augmentation=desk_flags),
        voting=VotingConfig(subset_size=2, voter_mode=voter_mode, seed=seed),
        recover=RecoverConfig(iterations=500, batch_size=10,
                              augmentation=desk_flags),
        posteval=PostEvalConfig(epochs=100, batch_size=16,
                                label_mode=label_mode,
                                augmentation=desk_pe_flags),
        prior_recover=RecoverConfig(iterations=200, batch_size=10,
                                    augmentation=desk_flags),
        prior_posteval=PostEvalConfig(epochs=40, batch_size=16,
                                      augmentation=desk_pe_flags),
    )


# ---------------------------------------------------------------------------
# ablation presets
# ---------------------------------------------------------------------------

def ablation_preset(name: str, base: PipelineConfig) -> list[tuple[str, PipelineConfig]]:
    """Bundle of configs identical except along one ablated axis."""
    if name == "n2-vs-n3":
        if len(base.committee) < 3:
            raise ConfigError("n2-vs-n3 needs a committee of >= 3")
        return [(f"n{n}", replace(base, voting=replace(base.voting, subset_size=n)))
                for n in (2, 3)]
    if name == "voter-modes":
        return [(mode, replace(base, voting=replace(base.voting, voter_mode=mode)))
                for mode in ("prior", "equal", "random")]
    if name == "bssl-on-off":
        return [(mode, replace(base, posteval=replace(base.posteval,
                                                      label_mode=mode)))
                for mode in ("batch-specific", "running")]
    if name == "committee-growth":
        bundles = []
        for k in range(1, len(base.committee) + 1):
            sub = base.committee[:k]
            voting = base.voting if k >= 2 else replace(
                base.voting, subset_size=2)
            if k >= 2 and base.voting.subset_size > k:
                voting = replace(base.voting, subset_size=k)
            bundles.append((f"k{k}", replace(
                base, committee=sub,
                teacher_arch=sub[0] if base.teacher_arch not in sub
                else base.teacher_arch,
                voting=voting)))
        return bundles
    if name == "sre2lpp-baseline":
        single = (base.teacher_arch,)
        return [
            ("committee", base),
            ("single-backbone", replace(base, committee=single)),
        ]
    raise UnknownPreset(f"unknown ablation preset {name!r}; "
                        f"one of {ABLATION_PRESETS}")

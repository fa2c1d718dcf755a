"""Experiment orchestration: the baseline and the five ensemble studies.

A declarative plan names the dataset roots, the branch roster, the fusion
strategies, and the training constants; running it trains whatever
checkpoints are missing, trains the requested ensembles on frozen branches,
evaluates everything volumetrically on the held-out test patients, and emits
the comparison tables plus per-class breakdowns and qualitative overlays.

Plan ids:
  BASELINE  three multiclass networks vs the argmax ensemble
  EXP1      straightforward ensemble training on the full branch pool
  EXP2      EXP1 plus supplementary esophagus/trachea branches
  EXP3      branches trained on two disjoint data sources, fused on both
  EXP4      EXP1 plus a multiclass branch in the pool
  EXP5      EXP1 with the fusion training set subsampled to a fraction
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import organs
from .checkpoint import CheckpointInfo, load_checkpoint, read_checkpoint_info
from .ensembles import (
    ArgmaxEnsemble,
    ConfigurationError,
    EnsembleSpec,
    FULL_RANGE_WINDOW,
    MultiLabelPrediction,
    Strategy,
    build_ensemble,
    predict_volume,
)
from .metrics import MetricsReport, evaluate_prediction
from .models import MULTICLASS, BackboneKind
from .preprocess import AugmentConfig, apply_window, center_crop
from .report import ResultRow, ResultsTable, emit_report, write_text_atomic
from .training import (
    SlicePool,
    TrainConfig,
    load_slice_pool,
    train_binary,
    train_ensemble,
    train_multiclass,
)
from .volume import list_patients, load_volume

PLAN_SCHEMA = 1
PLAN_IDS = ("BASELINE", "EXP1", "EXP2", "EXP3", "EXP4", "EXP5")

# Full-scale reference scores (DSC, precision, recall, HD95 mm) from training
# on the real StructSeg/SegTHOR challenge data. Documentation fixtures for
# orientation only: desk-scale phantom runs are not expected to reproduce
# them, and nothing asserts against them beyond their presence.
REFERENCE_SCORES = {
    "BASELINE": {
        "multiclass_unet": (0.824, 0.870, 0.805, 4.573),
        "multiclass_se_resunet": (0.817, 0.840, 0.818, 6.347),
        "multiclass_deeplabv3": (0.851, 0.856, 0.854, 2.453),
        "argmax": (0.878, 0.858, 0.908, 2.445),
    },
    "EXP1": {
        "layer_fusion": (0.874, 0.881, 0.875, 2.260),
        "logits_conv": (0.879, 0.869, 0.899, 2.294),
        "meta_model": (0.866, 0.900, 0.846, 2.367),
    },
    "EXP2": {
        "layer_fusion": (0.885, 0.912, 0.868, 2.207),
        "logits_conv": (0.884, 0.906, 0.872, 2.171),
        "meta_model": (0.877, 0.898, 0.870, 2.292),
    },
    "EXP3": {
        "layer_fusion": (0.816, 0.838, 0.810, 4.412),
        "logits_conv": (0.760, 0.755, 0.771, 21.761),
        "meta_model": (0.782, 0.858, 0.761, 7.366),
        "argmax": (0.758, 0.748, 0.779, 7.613),
    },
    "EXP4": {
        "layer_fusion": (0.880, 0.891, 0.876, 2.075),
        "logits_conv": (0.881, 0.869, 0.902, 2.159),
        "meta_model": (0.867, 0.889, 0.860, 2.284),
    },
    "EXP5": {
        "layer_fusion": (0.868, 0.866, 0.881, 2.366),
        "logits_conv": (0.879, 0.868, 0.899, 2.298),
        "meta_model": (0.876, 0.903, 0.857, 2.309),
    },
}

# Best binary backbone per organ at full scale, by validation loss.
REFERENCE_BEST_BINARIES = {
    organs.LEFT_LUNG: BackboneKind.SE_RESUNET,
    organs.RIGHT_LUNG: BackboneKind.SE_RESUNET,
    organs.ESOPHAGUS: BackboneKind.SE_RESUNET,
    organs.SPINAL_CORD: BackboneKind.SE_RESUNET,
    organs.HEART: BackboneKind.DEEPLABV3,
    organs.TRACHEA: BackboneKind.DEEPLABV3,
}


@dataclass(frozen=True)
class BranchJob:
    """One model to train for the branch pool."""

    organ: int | str  # organ id or "multiclass"
    backbone: str
    source: str = "primary"  # primary | secondary (EXP3)
    supplementary: bool = False  # EXP2 redundant branches

    def name(self) -> str:
        organ = self.organ if isinstance(self.organ, str) else organs.ORGAN_NAMES[self.organ]
        tag = "_supp" if self.supplementary else ""
        return f"{self.source}_{organ}_{self.backbone}{tag}"


def default_roster() -> tuple[BranchJob, ...]:
    return tuple(
        BranchJob(organ=o, backbone=REFERENCE_BEST_BINARIES[o].value) for o in sorted(organs.ORGAN_NAMES)
    )


def exp2_supplements() -> tuple[BranchJob, ...]:
    return (
        BranchJob(organ=organs.ESOPHAGUS, backbone=BackboneKind.DEEPLABV3.value, supplementary=True),
        BranchJob(organ=organs.TRACHEA, backbone=BackboneKind.UNET.value, supplementary=True),
    )


@dataclass(frozen=True)
class ExperimentPlan:
    id: str
    dataset_root: str
    out_dir: str
    seed: int = 0
    secondary_root: str | None = None
    class_count: int = organs.NUM_ORGANS
    crop: int = 320
    slice_step: int = 1
    roster: tuple[BranchJob, ...] = field(default_factory=default_roster)
    multiclass_baselines: tuple[str, ...] = tuple(k.value for k in BackboneKind)
    strategies: tuple[str, ...] = (
        Strategy.LAYER_FUSION.value,
        Strategy.LOGITS_CONV.value,
        Strategy.META_MODEL.value,
    )
    train_fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion_train: TrainConfig = field(default_factory=lambda: TrainConfig(augment=False))
    checkpoints_dir: str | None = None
    threshold: float = 0.5
    fusion_init: str = "identity"
    meta_width: float = 0.125
    overlay_slices: int = 2
    split_fractions: tuple[float, float] = (0.7, 0.15)  # train, val; rest is test
    # With multiple non-supplementary candidates per organ in the roster,
    # keep only the best one (by validation loss) in the ensemble pool.
    select_best: bool = False

    def __post_init__(self) -> None:
        if self.id not in PLAN_IDS:
            raise ValueError(f"plan id must be one of {PLAN_IDS}, got {self.id!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.id == "EXP3" and self.secondary_root is None:
            raise ValueError("EXP3 needs a secondary dataset root")
        covered = set()
        for job in self.roster:
            covered.update(
                range(1, self.class_count + 1) if job.organ == MULTICLASS else [job.organ]
            )
        missing = set(range(1, self.class_count + 1)) - covered
        if missing:
            raise ConfigurationError(
                f"roster leaves organ(s) {sorted(missing)} uncovered"
            )

    # -- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = PLAN_SCHEMA
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        if d.pop("schema_version", PLAN_SCHEMA) != PLAN_SCHEMA:
            raise ValueError("unsupported plan schema version")
        d["roster"] = tuple(BranchJob(**j) for j in d.get("roster", []))
        for key in ("train", "fusion_train"):
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                aug = sub.pop("augment_cfg", None)
                if isinstance(aug, dict):
                    sub["augment_cfg"] = AugmentConfig(**aug)
                if "adam_betas" in sub:
                    sub["adam_betas"] = tuple(sub["adam_betas"])
                d[key] = TrainConfig(**sub)
        for key in ("multiclass_baselines", "strategies", "split_fractions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        return cls.from_json(json.loads(Path(path).read_text()))

    def config_digest(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(canonical).hexdigest()


def split_patients(
    patient_ids: list[str], seed: int, fractions: tuple[float, float] = (0.7, 0.15)
) -> tuple[list[str], list[str], list[str]]:
    """Deterministic patient-level train/val/test split (no slice leakage)."""
    ids = sorted(patient_ids)
    if len(ids) < 3:
        raise ValueError("need at least 3 patients for a train/val/test split")
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_train = max(1, round(fractions[0] * n))
    n_val = max(1, round(fractions[1] * n))
    n_train = min(n_train, n - 2)  # keep at least one val and one test patient
    n_val = min(n_val, n - n_train - 1)
    return ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val :]


def subsample_patients(patient_ids: list[str], fraction: float, seed: int) -> list[str]:
    """Deterministic seeded subsample used by the data-scarcity study."""
    if fraction >= 1.0:
        return list(patient_ids)
    k = max(1, round(fraction * len(patient_ids)))
    rng = np.random.default_rng((seed, 0x5CA7))
    picked = rng.choice(sorted(patient_ids), size=k, replace=False)
    return sorted(picked)


def select_best_binaries(
    candidates: dict[int, list[CheckpointInfo]],
) -> tuple[dict[int, CheckpointInfo], list[str]]:
    """Per organ, the checkpoint with minimum best validation loss.

    Ties break to the lower backbone enum order; the returned report names
    the winner (and notes ties) per organ.
    """
    order = {k.value: i for i, k in enumerate(BackboneKind)}
    winners: dict[int, CheckpointInfo] = {}
    report: list[str] = []
    for organ, infos in sorted(candidates.items()):
        if not infos:
            raise ConfigurationError(f"no trained binary candidates for organ {organ}")
        ranked = sorted(
            infos,
            key=lambda i: (i.training.get("best_val_loss", math.inf), order[i.meta.backbone.value]),
        )
        winners[organ] = ranked[0]
        line = (
            f"{organs.ORGAN_NAMES.get(organ, organ)}: {ranked[0].meta.backbone.value}"
            f" (val loss {ranked[0].training.get('best_val_loss', float('nan')):.4f})"
        )
        if len(ranked) > 1 and ranked[0].training.get("best_val_loss") == ranked[1].training.get("best_val_loss"):
            line += " [tie broken by backbone order]"
        report.append(line)
    return winners, report


# -- data staging --------------------------------------------------------


@dataclass
class _SourceData:
    root: Path
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    train_pool: SlicePool
    val_pool: SlicePool


def _stage_source(plan: ExperimentPlan, root: str | Path) -> _SourceData:
    ids = list_patients(root)
    train_ids, val_ids, test_ids = split_patients(ids, plan.seed, plan.split_fractions)
    return _SourceData(
        root=Path(root),
        train_ids=train_ids,
        val_ids=val_ids,
        test_ids=test_ids,
        train_pool=load_slice_pool(root, train_ids, plan.crop, plan.class_count, plan.slice_step),
        val_pool=load_slice_pool(root, val_ids, plan.crop, plan.class_count, plan.slice_step),
    )


def _concat_pools(a: SlicePool, b: SlicePool) -> SlicePool:
    return SlicePool(
        raw=np.concatenate([a.raw, b.raw]),
        labels=np.concatenate([a.labels, b.labels]),
        sources=a.sources + b.sources,
        class_count=a.class_count,
    )


def _subset_pool(pool: SlicePool, patient_ids: set[str]) -> SlicePool:
    keep = [i for i, (pid, _) in enumerate(pool.sources) if pid in patient_ids]
    return SlicePool(
        raw=pool.raw[keep],
        labels=pool.labels[keep],
        sources=[pool.sources[i] for i in keep],
        class_count=pool.class_count,
    )


# -- checkpoint staging ----------------------------------------------------


def ensure_branch_checkpoints(
    plan: ExperimentPlan, sources: dict[str, _SourceData]
) -> dict[BranchJob, Path]:
    """Train any roster checkpoint that is not already on disk."""
    ckpt_dir = Path(plan.checkpoints_dir or Path(plan.out_dir) / "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[BranchJob, Path] = {}
    for job in plan.roster:
        path = ckpt_dir / f"{job.name()}.ckpt"
        paths[job] = path
        if path.exists():
            continue
        data = sources[job.source]
        log = ckpt_dir / f"{job.name()}_log.csv"
        if job.organ == MULTICLASS:
            train_multiclass(job.backbone, data.train_pool, data.val_pool, plan.train, path,
                             source=job.source, log_path=log)
        else:
            train_binary(job.organ, job.backbone, data.train_pool, data.val_pool, plan.train,
                         path, source=job.source, log_path=log)
    return paths


def _ensemble_branch_paths(
    plan: ExperimentPlan, branch_paths: dict[BranchJob, Path]
) -> tuple[list[Path], list[str]]:
    """Ensemble pool: the full roster, or per-organ winners when select_best."""
    if not plan.select_best:
        return [branch_paths[j] for j in plan.roster], []
    candidates: dict[int, list[CheckpointInfo]] = {}
    for job in plan.roster:
        if job.organ == MULTICLASS or job.supplementary:
            continue
        candidates.setdefault(job.organ, []).append(read_checkpoint_info(branch_paths[job]))
    winners, report = select_best_binaries(candidates)
    pool = [Path(winners[o].path) for o in sorted(winners)]
    pool += [branch_paths[j] for j in plan.roster if job_is_extra(j)]
    return pool, report


def job_is_extra(job: BranchJob) -> bool:
    return job.supplementary or job.organ == MULTICLASS


def _assert_source_isolation(plan: ExperimentPlan, paths: dict[BranchJob, Path]) -> None:
    """EXP3 invariant: every branch trained on exactly its partition's source."""
    for job, path in paths.items():
        recorded = read_checkpoint_info(path).training.get("source")
        if recorded != job.source:
            raise ConfigurationError(
                f"branch {job.name()} records source {recorded!r}, plan expects {job.source!r}"
            )


# -- evaluation ------------------------------------------------------------


def predict_volume_multiclass(model, volume, crop: int, batch_size: int = 8) -> np.ndarray:
    """Exclusive label map from a softmax multiclass model, slice by slice."""
    windowed = apply_window(center_crop(volume.voxels, crop), FULL_RANGE_WINDOW)
    out = []
    model.eval()
    with torch.no_grad():
        for start in range(0, windowed.shape[0], batch_size):
            x = torch.from_numpy(windowed[start : start + batch_size]).float()[:, None]
            out.append(model(x).argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(out)


def _evaluate_method(
    predict_fn, test_patients: list[tuple], plan: ExperimentPlan
) -> tuple[ResultRow, dict[str, MetricsReport]]:
    """Volumetric per-patient metrics, averaged per class then over classes."""
    per_patient: dict[str, MetricsReport] = {}
    for volume, mask in test_patients:
        pred = predict_fn(volume)
        gt = center_crop(mask.labels, plan.crop)
        per_patient[volume.patient_id] = evaluate_prediction(
            pred, gt, spacing=volume.spacing, class_count=plan.class_count
        )
    dice, precision, recall, hd = [], [], [], []
    for organ in range(1, plan.class_count + 1):
        scores = [
            rep.per_class[organ] for rep in per_patient.values() if organ in rep.present_classes
        ]
        if not scores:
            continue
        dice.append(np.mean([s.dice for s in scores]))
        precision.append(np.mean([s.precision for s in scores]))
        recall.append(np.mean([s.recall for s in scores]))
        defined = [s.hd95_mm for s in scores if not math.isnan(s.hd95_mm)]
        hd.append(np.mean(defined) if defined else math.nan)
    defined_hd = [h for h in hd if not math.isnan(h)]
    row = ResultRow(
        method="",
        dice=float(np.mean(dice)),
        precision=float(np.mean(precision)),
        recall=float(np.mean(recall)),
        hd95_mm=float(np.mean(defined_hd)) if defined_hd else math.nan,
    )
    return row, per_patient


def _load_test_patients(plan: ExperimentPlan, sources: dict[str, _SourceData]) -> list[tuple]:
    patients = []
    for data in sources.values():
        for pid in data.test_ids:
            patients.append(load_volume(data.root / pid, class_count=plan.class_count))
    return patients


# -- runners ---------------------------------------------------------------


@dataclass
class ExperimentResult:
    table: ResultsTable
    per_class: dict[str, dict[str, MetricsReport]]
    files: list[Path]
    branch_paths: dict[BranchJob, Path]
    ensemble_paths: dict[str, Path]
    selection_report: list[str]
    ensemble_training: dict[str, object] = field(default_factory=dict)


def _write_run_config(plan: ExperimentPlan) -> list[Path]:
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = write_text_atomic(
        out / "resolved_config.json", json.dumps(plan.to_json(), indent=2, sort_keys=True) + "\n"
    )
    digest = write_text_atomic(out / "config_digest.txt", plan.config_digest() + "\n")
    return [snapshot, digest]


def _ensemble_spec(plan: ExperimentPlan, strategy: str, branch_paths: list[Path]) -> EnsembleSpec:
    return EnsembleSpec(
        strategy=Strategy(strategy),
        branches=tuple(str(p) for p in branch_paths),
        class_count=plan.class_count,
        threshold=plan.threshold,
        includes_multiclass_branch=any(j.organ == MULTICLASS for j in plan.roster),
        fusion_init=plan.fusion_init,
        meta_width=plan.meta_width,
    )


def _overlay_jobs(plan, test_patients, predictions: dict[str, dict[str, np.ndarray]]):
    """(windowed, gt, pred, name) tuples: overlay_slices per patient per method."""
    jobs = []
    for volume, mask in test_patients:
        z_count = volume.shape[0]
        picks = np.linspace(0, z_count - 1, num=min(plan.overlay_slices, z_count), dtype=int)
        gt = center_crop(mask.labels, plan.crop)
        windowed = apply_window(center_crop(volume.voxels, plan.crop), FULL_RANGE_WINDOW)
        for method, per_patient in predictions.items():
            pred = per_patient[volume.patient_id]
            for z in picks:
                name = f"{plan.id.lower()}_{method}_{volume.patient_id}_z{z:03d}"
                jobs.append((windowed[z], gt[z], pred[z], name))
    return jobs


def run_baseline(plan: ExperimentPlan) -> ExperimentResult:
    """Multiclass baselines vs the argmax ensemble of the branch pool."""
    files = _write_run_config(plan)
    sources = {"primary": _stage_source(plan, plan.dataset_root)}
    branch_paths = ensure_branch_checkpoints(plan, sources)

    ckpt_dir = Path(plan.checkpoints_dir or Path(plan.out_dir) / "checkpoints")
    multiclass_paths = {}
    for backbone in plan.multiclass_baselines:
        path = ckpt_dir / f"primary_multiclass_{backbone}.ckpt"
        if not path.exists():
            train_multiclass(
                backbone, sources["primary"].train_pool, sources["primary"].val_pool,
                plan.train, path, source="primary", log_path=ckpt_dir / f"primary_multiclass_{backbone}_log.csv",
            )
        multiclass_paths[backbone] = path

    test_patients = _load_test_patients(plan, sources)
    rows, per_class, predictions = [], {}, {}

    for backbone, path in multiclass_paths.items():
        model, _ = load_checkpoint(path)
        method = f"multiclass_{backbone}"
        preds: dict[str, np.ndarray] = {}

        def predict(volume, model=model, preds=preds):
            labels = predict_volume_multiclass(model, volume, plan.crop)
            preds[volume.patient_id] = labels
            return labels

        row, reports = _evaluate_method(predict, test_patients, plan)
        rows.append(dataclasses.replace(row, method=method))
        per_class[method] = reports
        predictions[method] = preds

    pool_paths, selection_report = _ensemble_branch_paths(plan, branch_paths)
    if selection_report:
        files.append(
            write_text_atomic(Path(plan.out_dir) / "selection.txt", "\n".join(selection_report) + "\n")
        )
    argmax = build_ensemble(_ensemble_spec(plan, Strategy.ARGMAX.value, pool_paths))
    preds = {}

    def predict_argmax(volume):
        mlp = predict_volume(argmax, volume, crop=plan.crop)
        preds[volume.patient_id] = mlp.exclusive()
        return mlp

    row, reports = _evaluate_method(predict_argmax, test_patients, plan)
    rows.append(dataclasses.replace(row, method="argmax"))
    per_class["argmax"] = reports
    predictions["argmax"] = preds

    table = ResultsTable(title=f"{plan.id}: average scores over the labels", rows=rows)
    name = plan.id.lower()
    files += emit_report(
        {name: table},
        plan.out_dir,
        per_class=per_class,
        overlays=_overlay_jobs(plan, test_patients, predictions),
        prefix=name,
    )
    return ExperimentResult(table, per_class, files, branch_paths, {}, selection_report)


def run_experiment(plan: ExperimentPlan) -> ExperimentResult:
    """Train and evaluate the plan's fusion strategies (EXP1 through EXP5)."""
    if plan.id == "BASELINE":
        return run_baseline(plan)
    files = _write_run_config(plan)
    sources = {"primary": _stage_source(plan, plan.dataset_root)}
    if plan.secondary_root:
        sources["secondary"] = _stage_source(plan, plan.secondary_root)
    branch_paths = ensure_branch_checkpoints(plan, sources)
    if plan.id == "EXP3":
        _assert_source_isolation(plan, branch_paths)

    # Fusion training data: all sources together, optionally subsampled by
    # patient for the data-scarcity study (test split never changes).
    fusion_train = sources["primary"].train_pool
    fusion_val = sources["primary"].val_pool
    if "secondary" in sources:
        fusion_train = _concat_pools(fusion_train, sources["secondary"].train_pool)
        fusion_val = _concat_pools(fusion_val, sources["secondary"].val_pool)
    if plan.train_fraction < 1.0:
        all_train_ids = [pid for d in sources.values() for pid in d.train_ids]
        kept = set(subsample_patients(all_train_ids, plan.train_fraction, plan.seed))
        fusion_train = _subset_pool(fusion_train, kept)

    branch_path_list, selection_report = _ensemble_branch_paths(plan, branch_paths)
    if selection_report:
        files.append(
            write_text_atomic(Path(plan.out_dir) / "selection.txt", "\n".join(selection_report) + "\n")
        )
    ensemble_dir = Path(plan.out_dir) / "ensembles"
    ensemble_paths: dict[str, Path] = {}
    trained = {}
    training_results = {}
    for strategy in plan.strategies:
        spec = _ensemble_spec(plan, strategy, branch_path_list)
        ensemble = build_ensemble(spec, seed=plan.seed)
        path = ensemble_dir / f"{plan.id.lower()}_{strategy}.ckpt"
        training_results[strategy] = train_ensemble(
            ensemble, spec, fusion_train, fusion_val, plan.fusion_train, path,
            log_path=ensemble_dir / f"{plan.id.lower()}_{strategy}_log.csv",
        )
        ensemble_paths[strategy] = path
        trained[strategy] = ensemble

    test_patients = _load_test_patients(plan, sources)
    rows, per_class, predictions = [], {}, {}

    argmax = build_ensemble(_ensemble_spec(plan, Strategy.ARGMAX.value, branch_path_list))
    methods: list[tuple[str, object]] = [(s, trained[s]) for s in plan.strategies]
    methods.append(("argmax", argmax))

    for method, ensemble in methods:
        preds: dict[str, np.ndarray] = {}

        def predict(volume, ensemble=ensemble, preds=preds):
            mlp = predict_volume(ensemble, volume, crop=plan.crop)
            preds[volume.patient_id] = mlp.exclusive()
            return mlp

        row, reports = _evaluate_method(predict, test_patients, plan)
        rows.append(dataclasses.replace(row, method=method))
        per_class[method] = reports
        predictions[method] = preds

    table = ResultsTable(title=f"{plan.id}: average scores over the labels", rows=rows)
    name = plan.id.lower()
    files += emit_report(
        {name: table},
        plan.out_dir,
        per_class=per_class,
        overlays=_overlay_jobs(plan, test_patients, predictions),
        prefix=name,
    )
    return ExperimentResult(
        table, per_class, files, branch_paths, ensemble_paths, selection_report, training_results
    )

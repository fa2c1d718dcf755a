"""Command-line interface.

    segens phantom generate --patients N --seed S --out DIR [--slices K]
    segens train binary --organ O --backbone B --data DIR --out FILE [--config F]
    segens train ensemble --spec F --data DIR --out FILE [--config F]
    segens run experiment --plan PLAN.json
    segens evaluate --pred DIR --gt DIR [--out FILE]

Training config files are JSON documents mirroring TrainConfig; experiment
plans are the versioned JSON schema written by ExperimentPlan.save.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import organs
from .ensembles import EnsembleSpec, build_ensemble
from .experiments import ExperimentPlan, run_experiment, split_patients
from .metrics import evaluate_prediction
from .phantom import PhantomSpec, write_phantom_dataset
from .preprocess import AugmentConfig
from .report import write_csv_atomic
from .training import TrainConfig, load_slice_pool, train_binary, train_ensemble
from .volume import list_patients, load_volume


def _load_train_config(path: str | None, **overrides) -> TrainConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text())
        if isinstance(data.get("augment_cfg"), dict):
            data["augment_cfg"] = AugmentConfig(**data["augment_cfg"])
        if "adam_betas" in data:
            data["adam_betas"] = tuple(data["adam_betas"])
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**data)


def _parse_organ(text: str) -> int:
    if text.isdigit():
        return int(text)
    return organs.organ_id(text)


def cmd_phantom_generate(args) -> int:
    spec = PhantomSpec(
        n_patients=args.patients,
        slices_per_patient=args.slices,
        rng_seed=args.seed,
    )
    paths = write_phantom_dataset(spec, args.out)
    print(f"wrote {len(paths)} phantom patients under {args.out}")
    return 0


def cmd_train_binary(args) -> int:
    cfg = _load_train_config(args.config, rng_seed=args.seed)
    ids = list_patients(args.data)
    train_ids, val_ids, _ = split_patients(ids, cfg.rng_seed)
    train_pool = load_slice_pool(args.data, train_ids, crop=args.crop)
    val_pool = load_slice_pool(args.data, val_ids, crop=args.crop)
    organ = _parse_organ(args.organ)
    result = train_binary(
        organ, args.backbone, train_pool, val_pool, cfg, args.out,
        log_path=Path(args.out).with_suffix(".log.csv"),
    )
    print(
        f"trained {args.backbone} for {organs.ORGAN_NAMES[organ]}: "
        f"best val loss {result.best_smoothed_val:.4f} at epoch {result.best_epoch} "
        f"-> {args.out}"
    )
    return 0


def cmd_train_ensemble(args) -> int:
    spec = EnsembleSpec.load(args.spec)
    cfg = _load_train_config(args.config, rng_seed=args.seed)
    ids = list_patients(args.data)
    train_ids, val_ids, _ = split_patients(ids, cfg.rng_seed)
    train_pool = load_slice_pool(args.data, train_ids, crop=args.crop)
    val_pool = load_slice_pool(args.data, val_ids, crop=args.crop)
    ensemble = build_ensemble(spec, seed=cfg.rng_seed)
    result = train_ensemble(ensemble, spec, train_pool, val_pool, cfg, args.out,
                            log_path=Path(args.out).with_suffix(".log.csv"))
    print(
        f"trained {spec.strategy.value} ensemble: best val loss "
        f"{result.best_smoothed_val:.4f} at epoch {result.best_epoch} -> {args.out}"
    )
    return 0


def cmd_run_experiment(args) -> int:
    plan = ExperimentPlan.load(args.plan)
    result = run_experiment(plan)
    print(result.table.format_text())
    print(f"report files under {plan.out_dir}")
    return 0


def _find_predictions(pred_dir: Path) -> dict[str, Path]:
    """Predicted label volumes: flat <patient>.nii[.gz] files in one directory."""
    found = {}
    for path in sorted(pred_dir.iterdir()):
        if path.name.endswith(".nii.gz"):
            found[path.name[: -len(".nii.gz")]] = path
        elif path.suffix == ".nii":
            found[path.stem] = path
    return found


def cmd_evaluate(args) -> int:
    from .niftiio import read_nifti

    predictions = _find_predictions(Path(args.pred))
    gt_ids = set(list_patients(args.gt))
    rows = [["patient", "organ", "dice", "precision", "recall", "hd95_mm"]]
    macros = []
    for pid, pred_path in predictions.items():
        if pid not in gt_ids:
            print(f"warning: {pid} has no ground truth, skipped", file=sys.stderr)
            continue
        pred_labels, _ = read_nifti(pred_path)
        gt_vol, gt_mask = load_volume(Path(args.gt) / pid)
        if gt_mask is None:
            print(f"warning: {pid} ground truth has no label file, skipped", file=sys.stderr)
            continue
        report = evaluate_prediction(
            np.rint(pred_labels).astype(np.uint8), gt_mask,
            spacing=gt_vol.spacing, class_count=gt_mask.class_count,
        )
        for organ, s in sorted(report.per_class.items()):
            rows.append(
                [pid, organs.ORGAN_NAMES.get(organ, str(organ)),
                 f"{s.dice:.6f}", f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.hd95_mm:.6f}"]
            )
        macros.append(report.macro)
        print(f"{pid}: macro DSC {report.macro.dice:.4f}, HD95 {report.macro.hd95_mm:.3f} mm")
    if not macros:
        print("no overlapping patients between --pred and --gt", file=sys.stderr)
        return 1
    print(f"mean macro DSC {np.mean([m.dice for m in macros]):.4f}")
    if args.out:
        write_csv_atomic(args.out, rows)
        print(f"per-class scores -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segens", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic dataset generation")
    phantom_sub = phantom.add_subparsers(dest="subcommand", required=True)
    gen = phantom_sub.add_parser("generate", help="write a phantom dataset")
    gen.add_argument("--patients", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--slices", type=int, default=40)
    gen.set_defaults(fn=cmd_phantom_generate)

    train = sub.add_parser("train", help="train one model")
    train_sub = train.add_subparsers(dest="subcommand", required=True)
    binary = train_sub.add_parser("binary", help="train a single-organ branch")
    binary.add_argument("--organ", required=True, help="organ name or label id")
    binary.add_argument("--backbone", required=True, choices=["unet", "se_resunet", "deeplabv3"])
    binary.add_argument("--config", help="TrainConfig JSON file")
    binary.add_argument("--data", required=True, help="dataset root")
    binary.add_argument("--out", required=True, help="checkpoint output path")
    binary.add_argument("--crop", type=int, default=320)
    binary.add_argument("--seed", type=int, default=None)
    binary.set_defaults(fn=cmd_train_binary)

    ens = train_sub.add_parser("ensemble", help="train an ensemble from a spec file")
    ens.add_argument("--spec", required=True, help="EnsembleSpec JSON file")
    ens.add_argument("--config", help="TrainConfig JSON file")
    ens.add_argument("--data", required=True)
    ens.add_argument("--out", required=True)
    ens.add_argument("--crop", type=int, default=320)
    ens.add_argument("--seed", type=int, default=None)
    ens.set_defaults(fn=cmd_train_ensemble)

    run = sub.add_parser("run", help="run a full experiment plan")
    run_sub = run.add_subparsers(dest="subcommand", required=True)
    exp = run_sub.add_parser("experiment", help="execute one plan end to end")
    exp.add_argument("--plan", required=True, help="ExperimentPlan JSON file")
    exp.set_defaults(fn=cmd_run_experiment)

    ev = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted label volumes")
    ev.add_argument("--gt", required=True, help="directory of ground-truth patients")
    ev.add_argument("--out", help="optional per-class CSV output")
    ev.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance suite: one test per criterion, each printing a PASS line.

The trend criteria share one seeded phantom dataset and one trained branch
pool (session fixtures); the experiment runs reuse those checkpoints through
their plans' checkpoints_dir, mirroring how the studies share binaries.
Run with `pytest -s tests/test_acceptance.py` to watch the per-criterion
lines as they complete.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from segens import organs
from segens.ensembles import (
    Branches,
    EnsembleSpec,
    LogitsConvEnsemble,
    Strategy,
    stack_branch_logits,
)
from segens.experiments import (
    BranchJob,
    ExperimentPlan,
    exp2_supplements,
    run_baseline,
    run_experiment,
    split_patients,
)
from segens.losses import composite_loss
from segens.metrics import dice as dice_metric
from segens.metrics import hd95, hd95_bruteforce, precision_recall
from segens.models import build_model
from segens.phantom import PhantomSpec, write_phantom_dataset
from segens.preprocess import apply_window
from segens.training import TrainConfig, load_slice_pool
from segens.volume import list_patients, load_volume

SEED = 20240
N_PATIENTS = 10
SLICES_PER_PATIENT = 8
CROP = 160
WIDTH = 0.125

BIN_CFG = TrainConfig(
    max_epochs=14,
    batch_size=8,
    width_multiplier=WIDTH,
    rng_seed=SEED,
    augment=True,
    moving_average_window=3,
    plateau_patience=3,
    early_stop_patience=4,
)
FUSION_CFG = dataclasses.replace(BIN_CFG, max_epochs=12, augment=False, early_stop_patience=5)

# Branch pool used by the trend studies; small organs go to SE-ResUNet, which
# handles the class imbalance best at this scale.
ROSTER = (
    BranchJob(organ=organs.LEFT_LUNG, backbone="unet"),
    BranchJob(organ=organs.RIGHT_LUNG, backbone="unet"),
    BranchJob(organ=organs.HEART, backbone="deeplabv3"),
    BranchJob(organ=organs.ESOPHAGUS, backbone="se_resunet"),
    BranchJob(organ=organs.TRACHEA, backbone="se_resunet"),
    BranchJob(organ=organs.SPINAL_CORD, backbone="se_resunet"),
)
STRATEGIES = ("layer_fusion", "logits_conv", "meta_model")


def announce(criterion: str, elapsed: float, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS ({elapsed:.1f}s) {detail}", flush=True)


# -- shared desk-scale artifacts --------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    base = tmp_path_factory.mktemp("acceptance")
    dataset = base / "dataset"
    write_phantom_dataset(
        PhantomSpec(n_patients=N_PATIENTS, slices_per_patient=SLICES_PER_PATIENT, rng_seed=SEED),
        dataset,
    )
    return {"base": base, "dataset": dataset, "checkpoints": base / "checkpoints"}


def make_plan(desk, plan_id, out_name, **kwargs):
    defaults = dict(
        id=plan_id,
        dataset_root=str(desk["dataset"]),
        out_dir=str(desk["base"] / out_name),
        checkpoints_dir=str(desk["checkpoints"]),
        seed=SEED,
        crop=CROP,
        roster=ROSTER,
        strategies=STRATEGIES,
        train=BIN_CFG,
        fusion_train=FUSION_CFG,
        overlay_slices=2,
        split_fractions=(0.6, 0.2),  # 10 patients -> 6 train / 2 val / 2 test
    )
    defaults.update(kwargs)
    return ExperimentPlan(**defaults)


@pytest.fixture(scope="session")
def exp1(desk):
    plan = make_plan(desk, "EXP1", "exp1")
    start = time.time()
    result = run_experiment(plan)
    return plan, result, time.time() - start


@pytest.fixture(scope="session")
def exp2(desk, exp1):
    plan = make_plan(desk, "EXP2", "exp2", roster=ROSTER + exp2_supplements())
    start = time.time()
    result = run_experiment(plan)
    return plan, result, time.time() - start


@pytest.fixture(scope="session")
def exp5(desk, exp1):
    plan = make_plan(desk, "EXP5", "exp5", train_fraction=0.2)
    start = time.time()
    result = run_experiment(plan)
    return plan, result, time.time() - start


def small_organ_mean_dice(result, strategies=STRATEGIES):
    """Mean over strategies of the esophagus+trachea patient-mean dice."""
    values = []
    for strategy in strategies:
        per_patient = result.per_class[strategy]
        organ_means = []
        for organ in (organs.ESOPHAGUS, organs.TRACHEA):
            organ_means.append(
                np.mean([rep.per_class[organ].dice for rep in per_patient.values()])
            )
        values.append(np.mean(organ_means))
    return float(np.mean(values))


# -- criterion 1: metric oracles ---------------------------------------------


def brute_force_counts(pred, gt):
    tp = fp = fn = 0
    for idx in np.ndindex(pred.shape):
        p, g = bool(pred[idx]), bool(gt[idx])
        tp += p and g
        fp += p and not g
        fn += (not p) and g
    return tp, fp, fn


def test_criterion_1_metric_oracles(rng):
    start = time.time()
    spacing = (2.5, 1.2, 0.8)
    checked = 0
    for case in range(50):
        if case < 35:
            shape = tuple(rng.integers(3, 11, size=3))
            p = rng.random(shape) > 0.55
            g = rng.random(shape) > 0.55
        else:
            shape = tuple(rng.integers(14, 25, size=3))
            p = rng.random(shape) > 0.975
            g = rng.random(shape) > 0.975
        tp, fp, fn = brute_force_counts(p, g)
        denom = 2 * tp + fp + fn
        expected_dice = 1.0 if denom == 0 else 2 * tp / denom
        assert abs(dice_metric(p, g) - expected_dice) <= 1e-9
        expected_precision = 1.0 if (tp + fp + fn) == 0 else (tp / (tp + fp) if tp + fp else 0.0)
        expected_recall = 1.0 if (tp + fp + fn) == 0 else (tp / (tp + fn) if tp + fn else 0.0)
        precision, recall = precision_recall(p, g)
        assert abs(precision - expected_precision) <= 1e-9
        assert abs(recall - expected_recall) <= 1e-9
        fast = hd95(p, g, spacing)
        slow = hd95_bruteforce(p, g, spacing)
        if math.isnan(slow):
            assert math.isnan(fast)
        else:
            assert abs(fast - slow) <= 1e-9
        checked += 1
    elapsed = time.time() - start
    assert checked >= 50
    assert elapsed < 60.0
    announce("criterion 1 (metric oracles)", elapsed, f"{checked} random volumes, max err <= 1e-9")


# -- criterion 2: loss gradients ----------------------------------------------


def numeric_grad(logits, target, head, eps=1e-6):
    grad = torch.zeros_like(logits)
    flat, gflat = logits.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up, _ = composite_loss(logits, target, head)
        flat[i] = orig - eps
        down, _ = composite_loss(logits, target, head)
        flat[i] = orig
        gflat[i] = (up.item() - down.item()) / (2 * eps)
    return grad


def test_criterion_2_loss_gradient_check(rng):
    start = time.time()
    worst = 0.0
    for head in ("binary", "multilabel", "multiclass"):
        for _ in range(10):
            channels = 1 if head == "binary" else 3
            logits = torch.from_numpy(rng.normal(scale=2.0, size=(1, channels, 4, 4)))
            if head == "multiclass":
                target = torch.from_numpy(rng.integers(0, channels, size=(1, 4, 4)))
            else:
                target = torch.from_numpy((rng.random((1, channels, 4, 4)) > 0.5).astype(np.float64))
            leaf = logits.clone().requires_grad_(True)
            total, _ = composite_loss(leaf, target, head)
            total.backward()
            gn = numeric_grad(logits.clone(), target, head)
            rel = (leaf.grad - gn).abs().max().item() / (gn.abs().max().item() + 1e-12)
            worst = max(worst, rel)
            assert rel < 1e-4, f"{head}: relative gradient error {rel:.2e}"
    elapsed = time.time() - start
    assert elapsed < 30.0
    announce("criterion 2 (loss gradients)", elapsed, f"30 fixtures, worst rel err {worst:.2e}")


# -- criterion 4: argmax oracle (cheap, before the heavy fixtures) ------------


def test_criterion_4_argmax_oracle():
    from test_ensembles import logits_for_probs, reference_argmax
    from segens.ensembles import LogitStack, fuse_argmax

    start = time.time()
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    combos = [(a, b, c) for a in levels for b in levels for c in levels]
    probs = np.array(combos, np.float64).T.reshape(3, 5, 25)
    meta = tuple((o, "unet", f"d{o}") for o in (1, 2, 3))
    stack = LogitStack(values=logits_for_probs(probs), branch_meta=meta)
    fast = fuse_argmax(stack, 0.5, class_count=3)
    slow = reference_argmax(stack, 0.5, class_count=3)
    np.testing.assert_array_equal(fast, slow)
    elapsed = time.time() - start
    assert elapsed < 5.0
    announce("criterion 4 (argmax oracle)", elapsed, "125-point grid incl. ties and threshold, exact")


# -- criterion 6: EXP1 trend ---------------------------------------------------


def test_criterion_6_exp1_trend(exp1):
    plan, result, elapsed = exp1
    argmax = result.table.row("argmax")
    details = [f"argmax DSC {argmax.dice:.3f} HD95 {argmax.hd95_mm:.2f}"]
    for strategy in STRATEGIES:
        row = result.table.row(strategy)
        details.append(f"{strategy} DSC {row.dice:.3f} HD95 {row.hd95_mm:.2f}")
        assert row.dice >= argmax.dice - 0.02, (
            f"{strategy} DSC {row.dice:.4f} vs argmax {argmax.dice:.4f}"
        )
    best_hd = min(result.table.row(s).hd95_mm for s in STRATEGIES)
    assert best_hd <= argmax.hd95_mm, f"no ensemble HD95 ({best_hd:.3f}) beat argmax ({argmax.hd95_mm:.3f})"
    assert elapsed < 3600.0
    announce("criterion 6 (EXP1 trend)", elapsed, "; ".join(details))


# -- criterion 3: freezing contracts (reads EXP1's training records) -----------


def test_criterion_3_freezing_contracts(exp1):
    _, result, _ = exp1
    start = time.time()
    for strategy in ("logits_conv", "meta_model"):
        tr = result.ensemble_training[strategy]
        assert tr.frozen_digests_pre == tr.frozen_digests_post
        assert tr.head_digests_pre == tr.head_digests_post  # whole branches frozen
    lf = result.ensemble_training["layer_fusion"]
    assert lf.frozen_digests_pre == lf.frozen_digests_post  # trunks bit-identical
    assert lf.head_digests_pre != lf.head_digests_post  # fused last layers trained
    changed = sum(
        lf.head_digests_pre[k] != lf.head_digests_post[k] for k in lf.head_digests_pre
    )
    assert changed == len(lf.head_digests_pre), "every branch's fused layer must train"
    elapsed = time.time() - start
    announce(
        "criterion 3 (freezing contracts)",
        elapsed,
        f"digests verified over {len(lf.frozen_digests_pre)} branches per strategy",
    )


# -- criterion 5: expressiveness floor ----------------------------------------


def test_criterion_5_identity_selection_floor(desk, exp1):
    plan, result, _ = exp1
    start = time.time()
    branch_paths = [result.branch_paths[j] for j in plan.roster]
    branches = Branches.load(branch_paths, class_count=6)
    ens = LogitsConvEnsemble(branches, class_count=6, threshold=0.5, init="identity")
    ens.eval()

    ids = list_patients(desk["dataset"])
    pool = load_slice_pool(desk["dataset"], ids[:3], crop=CROP)
    raw = pool.raw[:20].astype(np.float32)
    assert raw.shape[0] == 20
    with torch.no_grad():
        checked = 0
        for i in range(0, 20, 5):
            inputs = branches.branch_inputs(raw[i : i + 5])
            stacked = branches.stacked_logits(inputs)
            fused_masks = (torch.sigmoid(ens(stacked)) >= 0.5).numpy()
            branch_masks = (torch.sigmoid(stacked) >= 0.5).numpy()
            np.testing.assert_array_equal(fused_masks, branch_masks)
            checked += fused_masks.shape[0]
    elapsed = time.time() - start
    assert checked == 20
    assert elapsed < 60.0
    announce("criterion 5 (expressiveness floor)", elapsed, "identity selection exact on 20 slices")


# -- criterion 7: EXP2 trend ---------------------------------------------------


def test_criterion_7_exp2_supplementary_branches(exp1, exp2):
    _, result1, _ = exp1
    _, result2, elapsed = exp2
    for strategy in STRATEGIES:
        d1 = result1.table.row(strategy).dice
        d2 = result2.table.row(strategy).dice
        assert d2 >= d1 - 0.01, f"{strategy}: EXP2 DSC {d2:.4f} dropped > 0.01 vs EXP1 {d1:.4f}"
    small1 = small_organ_mean_dice(result1)
    small2 = small_organ_mean_dice(result2)
    # second clause taken over the mean of the three ensembles (see ledger)
    assert small2 >= small1, f"esophagus+trachea mean DSC {small2:.4f} < EXP1 {small1:.4f}"
    assert elapsed < 3600.0
    announce(
        "criterion 7 (EXP2 trend)",
        elapsed,
        f"eso+trachea mean DSC {small1:.3f} -> {small2:.3f}",
    )


# -- criterion 8: EXP5 data scarcity -------------------------------------------


def test_criterion_8_exp5_data_scarcity(exp1, exp5):
    plan1, result1, _ = exp1
    plan5, result5, elapsed = exp5
    ids = list_patients(plan1.dataset_root)
    assert split_patients(ids, plan1.seed, plan1.split_fractions)[2] == \
        split_patients(ids, plan5.seed, plan5.split_fractions)[2]
    details = []
    for strategy in STRATEGIES:
        d1 = result1.table.row(strategy).dice
        d5 = result5.table.row(strategy).dice
        details.append(f"{strategy} {d1:.3f}->{d5:.3f}")
        assert abs(d5 - d1) <= 0.05, f"{strategy}: EXP5 DSC {d5:.4f} vs EXP1 {d1:.4f}"
    assert elapsed < 1800.0
    announce("criterion 8 (EXP5 scarcity)", elapsed, "; ".join(details))


# -- criterion 9: single-batch overfit -----------------------------------------


@pytest.mark.parametrize("backbone", ["unet", "se_resunet", "deeplabv3"])
def test_criterion_9_single_batch_overfit(desk, backbone):
    start = time.time()
    pool = load_slice_pool(desk["dataset"], ["phantom_000"], crop=CROP)
    z = SLICES_PER_PATIENT // 2
    window = organs.ORGAN_WINDOWS[organs.LEFT_LUNG]
    image = apply_window(pool.raw[z], window)
    target = (pool.labels[z] == organs.LEFT_LUNG).astype(np.float32)
    assert target.sum() > 0

    model = build_model(backbone, width=WIDTH, organ=organs.LEFT_LUNG, window=window, seed=SEED)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    x = torch.from_numpy(image)[None, None]
    y = torch.from_numpy(target)[None, None]
    model.train()
    best = 0.0
    for step in range(200):
        optimizer.zero_grad()
        loss, _ = composite_loss(model(x), y, "binary")
        loss.backward()
        optimizer.step()
        if step % 10 == 9 or step > 60:
            model.eval()
            with torch.no_grad():
                pred = (torch.sigmoid(model(x)) >= 0.5).numpy()[0, 0]
            model.train()
            best = max(best, dice_metric(pred, target > 0))
            if best > 0.95:
                break
    elapsed = time.time() - start
    assert best > 0.95, f"{backbone}: best single-slice DSC {best:.4f} after {step + 1} steps"
    assert elapsed < 300.0
    announce(
        f"criterion 9 (overfit {backbone})", elapsed, f"DSC {best:.3f} within {step + 1} steps"
    )


# -- criterion 10: determinism --------------------------------------------------


def test_criterion_10_experiment_determinism(tmp_path):
    start = time.time()
    dataset = tmp_path / "ds"
    write_phantom_dataset(
        PhantomSpec(n_patients=4, slices_per_patient=4, grid=160, rng_seed=77), dataset
    )
    micro = TrainConfig(
        max_epochs=2, batch_size=4, width_multiplier=WIDTH, rng_seed=11, augment=False,
        moving_average_window=2, plateau_patience=2, early_stop_patience=3,
    )
    tables = []
    for tag in ("a", "b"):
        plan = ExperimentPlan(
            id="EXP1",
            dataset_root=str(dataset),
            out_dir=str(tmp_path / tag),
            seed=11,
            crop=96,
            roster=tuple(BranchJob(organ=o, backbone="unet") for o in range(1, 7)),
            strategies=("logits_conv",),
            train=micro,
            fusion_train=micro,
            overlay_slices=1,
        )
        run_experiment(plan)
        tables.append((tmp_path / tag / "exp1_summary.csv").read_bytes())
    assert tables[0] == tables[1]
    elapsed = time.time() - start
    announce("criterion 10 (determinism)", elapsed, "identical ResultsTable bytes across reruns")


# -- trained-branch behavior examples ------------------------------------------


def test_trained_lung_branch_orders_confidence(desk, exp1):
    plan, result, _ = exp1
    start = time.time()
    from segens.checkpoint import load_checkpoint
    from segens.models import predict_logits

    lung_job = next(j for j in plan.roster if j.organ == organs.LEFT_LUNG)
    model, _ = load_checkpoint(result.branch_paths[lung_job])
    ids = list_patients(desk["dataset"])
    test_pid = split_patients(ids, SEED, plan.split_fractions)[2][0]
    volume, mask = load_volume(Path(desk["dataset"]) / test_pid, class_count=6)
    z = SLICES_PER_PATIENT // 2
    raw = center_crop(volume.voxels[z], CROP)
    gt = center_crop(mask.labels[z], CROP) == organs.LEFT_LUNG
    assert gt.any()
    logits = predict_logits(model, apply_window(raw, model.meta.window))[0]
    probs = 1.0 / (1.0 + np.exp(-logits))
    inside, outside = probs[gt].mean(), probs[~gt].mean()
    assert inside > outside
    announce(
        "trained-branch ordering",
        time.time() - start,
        f"lung branch mean prob inside {inside:.3f} > outside {outside:.3f}",
    )


def test_organ_free_slice_predicts_background(exp1):
    plan, result, _ = exp1
    start = time.time()
    from segens.volume import CtVolume
    from segens.ensembles import predict_volume, build_ensemble
    from segens.experiments import _ensemble_spec

    # a soft-tissue body disc with no organs in it: every class should stay
    # below threshold, so the exclusive map is all background
    rng = np.random.default_rng(3)
    yy, xx = np.mgrid[0:512, 0:512]
    body = ((xx - 255.5) / 86.0) ** 2 + ((yy - 255.5) / 80.0) ** 2 <= 1.0
    voxels = rng.normal(-1000.0, 10.0, (2, 512, 512))
    voxels[:, body] = rng.normal(40.0, 10.0, (2, int(body.sum())))
    empty = CtVolume(
        voxels=np.clip(np.rint(voxels), -1024, 3071).astype(np.int16),
        spacing=(5.0, 1.2, 1.2),
        patient_id="organ_free",
    )
    argmax = build_ensemble(
        _ensemble_spec(plan, "argmax", [result.branch_paths[j] for j in plan.roster])
    )
    labels = predict_volume(argmax, empty, crop=CROP).exclusive()
    fraction_fg = float((labels != 0).mean())
    assert fraction_fg == 0.0, f"{fraction_fg:.4f} of pixels predicted as organ"
    announce("empty-slice prediction", time.time() - start, "organ-free body maps to background")


# -- spec interface shapes and the baseline trend example ----------------------


def test_stack_interface_shapes_at_challenge_crop(desk, exp1, exp2):
    plan1, result1, _ = exp1
    plan2, result2, _ = exp2
    start = time.time()
    volume, _ = load_volume(Path(desk["dataset"]) / "phantom_000")
    raw = volume.voxels[SLICES_PER_PATIENT // 2]

    six = Branches.load([result1.branch_paths[j] for j in plan1.roster], class_count=6)
    stack6 = stack_branch_logits(six, raw, crop=320)
    assert stack6.values.shape == (6, 320, 320)

    eight = Branches.load([result2.branch_paths[j] for j in plan2.roster], class_count=6)
    stack8 = stack_branch_logits(eight, raw, crop=320)
    assert stack8.values.shape == (8, 320, 320)
    elapsed = time.time() - start
    announce("interface shapes", elapsed, "(6, 320, 320) and (8, 320, 320) logit stacks")


def test_baseline_trend_argmax_vs_multiclass(desk, exp1):
    plan = make_plan(
        desk, "BASELINE", "baseline",
        fusion_train=FUSION_CFG,  # unused by baseline, kept for digest clarity
    )
    start = time.time()
    result = run_baseline(plan)
    elapsed = time.time() - start
    argmax = result.table.row("argmax")
    multiclass_best = max(
        result.table.row(f"multiclass_{b}").dice for b in plan.multiclass_baselines
    )
    assert argmax.dice >= multiclass_best - 0.02, (
        f"argmax {argmax.dice:.4f} vs best multiclass {multiclass_best:.4f}"
    )
    announce(
        "baseline trend",
        elapsed,
        f"argmax DSC {argmax.dice:.3f} vs best multiclass {multiclass_best:.3f}",
    )

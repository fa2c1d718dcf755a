"""Training loops: binary branches, multiclass baselines, ensemble heads.

One shared loop drives all three: Adam, learning rate decayed exponentially
per epoch with extra reductions on plateaus of the moving-average validation
loss, early stopping on the same smoothed curve, and restoration of the
parameters that achieved the minimum smoothed validation loss. Ensemble
training updates only the fusion parameters; with layer fusion the branches'
last feature blocks train too, and the frozen remainder is digest-checked
before and after.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from . import organs
from .checkpoint import (
    CheckpointInfo,
    module_param_prefixes,
    save_checkpoint,
    state_digest,
)
from .ensembles import (
    FULL_RANGE_WINDOW,
    EnsembleSpec,
    FusionEnsemble,
    Strategy,
    save_ensemble_checkpoint,
)
from .losses import composite_loss
from .models import MULTICLASS, BackboneKind, build_model
from .preprocess import (
    AugmentConfig,
    WindowSpec,
    apply_augment_params,
    apply_window,
    binarize_mask,
    center_crop,
    draw_augment_params,
)
from .volume import load_volume


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    lr_decay: float = 0.97  # exponential factor per epoch
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    moving_average_window: int = 5
    early_stop_patience: int = 15
    max_epochs: int = 30
    batch_size: int = 8
    rng_seed: int = 0
    width_multiplier: float = 0.5
    augment: bool = True
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        for name in ("lr_decay", "plateau_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        for name in ("plateau_patience", "moving_average_window", "early_stop_patience", "max_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")


def moving_average(values: Sequence[float], window: int) -> float:
    """Mean of the trailing `window` entries (all of them while warming up)."""
    if not values:
        raise ValueError("empty history")
    return float(np.mean(values[-window:]))


class LrSchedule:
    """Exponential decay with plateau reductions on the smoothed validation loss.

    lr(epoch) = initial * decay^epoch * plateau_factor^reductions. The first
    observed epoch seeds the best smoothed loss; afterwards every epoch
    without strict improvement advances a stall counter, and each time it
    reaches plateau_patience one reduction fires and the counter resets.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.reductions = 0
        self.best_smoothed = math.inf
        self.stall = 0
        self.raw_history: list[float] = []
        self.smoothed_history: list[float] = []

    def lr(self, epoch: int) -> float:
        return self.cfg.initial_lr * self.cfg.lr_decay**epoch * self.cfg.plateau_factor**self.reductions

    def observe(self, val_loss: float) -> float:
        self.raw_history.append(float(val_loss))
        smoothed = moving_average(self.raw_history, self.cfg.moving_average_window)
        self.smoothed_history.append(smoothed)
        if smoothed < self.best_smoothed:
            self.best_smoothed = smoothed
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.cfg.plateau_patience:
                self.reductions += 1
                self.stall = 0
        return smoothed

    def step(self, epoch: int, val_loss: float) -> float:
        """Observe one epoch's validation loss and return the next LR."""
        self.observe(val_loss)
        return self.lr(epoch + 1)


def early_stop_check(history: Sequence[float], patience: int) -> bool:
    """True iff the best (smoothed) loss is at least `patience` epochs old."""
    if not history:
        return False
    best_epoch = int(np.argmin(history))  # first occurrence: later ties are not improvements
    return (len(history) - 1 - best_epoch) >= patience


@dataclass
class SlicePool:
    """In-memory cropped slices of a patient subset: raw HU plus label maps."""

    raw: np.ndarray  # (M, H, W) int16
    labels: np.ndarray  # (M, H, W) uint8
    sources: list[tuple[str, int]]
    class_count: int

    def __len__(self) -> int:
        return self.raw.shape[0]


def load_slice_pool(
    root: str | Path,
    patient_ids: Iterable[str],
    crop: int = 320,
    class_count: int = organs.NUM_ORGANS,
    slice_step: int = 1,
) -> SlicePool:
    """Load, center-crop, and stack all (stride-subsampled) slices of the patients."""
    raws, labels, sources = [], [], []
    for pid in patient_ids:
        volume, mask = load_volume(Path(root) / pid, class_count=class_count)
        if mask is None:
            raise ValueError(f"patient {pid} has no label file; cannot build a training pool")
        vox = center_crop(volume.voxels, crop)
        lab = center_crop(mask.labels, crop)
        for z in range(0, vox.shape[0], slice_step):
            raws.append(vox[z])
            labels.append(lab[z])
            sources.append((pid, z))
    if not raws:
        raise ValueError("empty slice pool")
    return SlicePool(
        raw=np.stack(raws),
        labels=np.stack(labels),
        sources=sources,
        class_count=class_count,
    )


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    val_total: float
    val_dsc_macro: float
    smoothed_val: float


@dataclass
class TrainResult:
    checkpoint: CheckpointInfo | None
    checkpoint_path: Path
    history: list[EpochRecord]
    log_path: Path | None
    best_epoch: int
    best_smoothed_val: float
    frozen_digests_pre: dict[str, str] | None = None
    frozen_digests_post: dict[str, str] | None = None
    head_digests_pre: dict[str, str] | None = None
    head_digests_post: dict[str, str] | None = None


def _clone_state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _augment_seed(cfg: TrainConfig, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((cfg.rng_seed, epoch, index)).generate_state(1)[0])


def _training_loop(
    module: torch.nn.Module,
    trainable: list[torch.nn.Parameter],
    cfg: TrainConfig,
    batches_for_epoch: Callable[[int], Iterable[tuple[torch.Tensor, torch.Tensor]]],
    eval_val: Callable[[], tuple[float, float]],
    head: str,
    log_path: Path | None,
) -> tuple[list[EpochRecord], int, float]:
    torch.manual_seed(cfg.rng_seed)
    optimizer = torch.optim.Adam(trainable, lr=cfg.initial_lr, betas=cfg.adam_betas)
    schedule = LrSchedule(cfg)
    history: list[EpochRecord] = []
    best_state = None
    best_epoch = -1
    best_smoothed = math.inf

    log_file = writer = None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "lr", "train_total", "val_total", "val_dsc_macro"])

    try:
        for epoch in range(cfg.max_epochs):
            lr = schedule.lr(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            module.train()
            batch_totals, batch_sizes = [], []
            for x, y in batches_for_epoch(epoch):
                optimizer.zero_grad()
                loss, report = composite_loss(module(x), y, head)
                loss.backward()
                optimizer.step()
                batch_totals.append(report.total * x.shape[0])
                batch_sizes.append(x.shape[0])
            train_total = float(sum(batch_totals) / sum(batch_sizes))

            module.eval()
            val_total, val_dsc = eval_val()
            smoothed = schedule.observe(val_total)
            history.append(EpochRecord(epoch, lr, train_total, val_total, val_dsc, smoothed))
            if writer is not None:
                writer.writerow([epoch, f"{lr:.8g}", f"{train_total:.6f}", f"{val_total:.6f}", f"{val_dsc:.6f}"])
                log_file.flush()

            if smoothed < best_smoothed:
                best_smoothed = smoothed
                best_state = _clone_state(module)
                best_epoch = epoch
            if early_stop_check(schedule.smoothed_history, cfg.early_stop_patience):
                break
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is not None:
        module.load_state_dict(best_state)
    return history, best_epoch, best_smoothed


def _stack_batch(
    images: np.ndarray,
    targets: np.ndarray,
    idx: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
    augment: bool,
    target_dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for i in idx:
        img, tgt = images[i], targets[i]
        if augment:
            rng = np.random.default_rng(_augment_seed(cfg, epoch, int(i)))
            params = draw_augment_params(img.shape, rng, cfg.augment_cfg)
            img, tgt = apply_augment_params(img, tgt, params)
        xs.append(img)
        ys.append(tgt)
    x = torch.from_numpy(np.stack(xs)).float()[:, None]
    y = torch.as_tensor(np.stack(ys)).to(target_dtype)
    return x, y


def _epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.rng_seed, 0xE0C, epoch)))
    return rng.permutation(n)


def _global_dice(pred: np.ndarray, target: np.ndarray) -> float:
    inter = float(np.logical_and(pred, target).sum())
    denom = float(pred.sum() + target.sum())
    return 1.0 if denom == 0 else 2.0 * inter / denom


def _macro_dice_maps(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean global dice over class maps present in the target; (C, ...) inputs."""
    scores = [
        _global_dice(pred[c], target[c]) for c in range(target.shape[0]) if target[c].any()
    ]
    return float(np.mean(scores)) if scores else 1.0


def train_binary(
    organ: int,
    backbone: BackboneKind | str,
    train_pool: SlicePool,
    val_pool: SlicePool,
    cfg: TrainConfig,
    out_path: str | Path,
    window: WindowSpec | None = None,
    source: str | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train one single-organ branch; saves the best-validation checkpoint."""
    if len(train_pool) == 0 or len(val_pool) == 0:
        raise ValueError("empty dataset")
    backbone = BackboneKind(backbone)
    window = window or organs.ORGAN_WINDOWS[organ]

    train_images = apply_window(train_pool.raw, window)
    train_targets = binarize_mask(train_pool.labels, organ, train_pool.class_count)
    val_images = apply_window(val_pool.raw, window)
    val_targets = binarize_mask(val_pool.labels, organ, val_pool.class_count)

    model = build_model(
        backbone,
        out_channels=1,
        width=cfg.width_multiplier,
        organ=organ,
        window=window,
        seed=cfg.rng_seed,
    )

    def batches(epoch: int):
        order = _epoch_order(cfg, epoch, len(train_pool))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = _stack_batch(train_images, train_targets, idx, cfg, epoch, cfg.augment, torch.float32)
            yield x, y[:, None]

    def eval_val():
        losses, preds = [], []
        with torch.no_grad():
            for start in range(0, len(val_pool), cfg.batch_size):
                x = torch.from_numpy(val_images[start : start + cfg.batch_size]).float()[:, None]
                y = torch.from_numpy(val_targets[start : start + cfg.batch_size]).float()[:, None]
                logits = model(x)
                _, report = composite_loss(logits, y, "binary")
                losses.append(report.total * x.shape[0])
                preds.append((torch.sigmoid(logits) >= 0.5).numpy()[:, 0])
        pred = np.concatenate(preds)
        return float(sum(losses) / len(val_pool)), _global_dice(pred, val_targets)

    history, best_epoch, best_val = _training_loop(
        model, list(model.parameters()), cfg, batches, eval_val, "binary",
        Path(log_path) if log_path else None,
    )
    info = save_checkpoint(
        model,
        out_path,
        training={
            "organ": organ,
            "backbone": backbone.value,
            "epochs": len(history),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "seed": cfg.rng_seed,
            "source": source,
        },
    )
    return TrainResult(info, Path(out_path), history, Path(log_path) if log_path else None, best_epoch, best_val)


def train_multiclass(
    backbone: BackboneKind | str,
    train_pool: SlicePool,
    val_pool: SlicePool,
    cfg: TrainConfig,
    out_path: str | Path,
    source: str | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train one C+1-channel softmax model on the whole-range LUT."""
    if len(train_pool) == 0 or len(val_pool) == 0:
        raise ValueError("empty dataset")
    backbone = BackboneKind(backbone)
    c = train_pool.class_count

    train_images = apply_window(train_pool.raw, FULL_RANGE_WINDOW)
    val_images = apply_window(val_pool.raw, FULL_RANGE_WINDOW)

    model = build_model(
        backbone,
        out_channels=c + 1,
        width=cfg.width_multiplier,
        organ=MULTICLASS,
        window=FULL_RANGE_WINDOW,
        seed=cfg.rng_seed,
    )

    def batches(epoch: int):
        order = _epoch_order(cfg, epoch, len(train_pool))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            yield _stack_batch(train_images, train_pool.labels, idx, cfg, epoch, cfg.augment, torch.int64)

    def eval_val():
        losses, preds = [], []
        with torch.no_grad():
            for start in range(0, len(val_pool), cfg.batch_size):
                x = torch.from_numpy(val_images[start : start + cfg.batch_size]).float()[:, None]
                y = torch.from_numpy(val_pool.labels[start : start + cfg.batch_size]).long()
                logits = model(x)
                _, report = composite_loss(logits, y, "multiclass")
                losses.append(report.total * x.shape[0])
                preds.append(logits.argmax(dim=1).numpy())
        pred_labels = np.concatenate(preds)
        pred_maps = np.stack([pred_labels == cls for cls in range(1, c + 1)])
        gt_maps = np.stack([val_pool.labels == cls for cls in range(1, c + 1)])
        return float(sum(losses) / len(val_pool)), _macro_dice_maps(pred_maps, gt_maps)

    history, best_epoch, best_val = _training_loop(
        model, list(model.parameters()), cfg, batches, eval_val, "multiclass",
        Path(log_path) if log_path else None,
    )
    info = save_checkpoint(
        model,
        out_path,
        training={
            "organ": MULTICLASS,
            "backbone": backbone.value,
            "epochs": len(history),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "seed": cfg.rng_seed,
            "source": source,
        },
    )
    return TrainResult(info, Path(out_path), history, Path(log_path) if log_path else None, best_epoch, best_val)


def frozen_branch_digests(ensemble: FusionEnsemble) -> dict[str, str]:
    """Digest of each branch's declared-frozen parameter set.

    For layer fusion the branch's last feature block is excluded (it trains);
    for every other strategy the whole branch must stay bit-identical.
    """
    digests = {}
    for i, model in enumerate(ensemble.branches.pool):
        exclude = ()
        if ensemble.strategy is Strategy.LAYER_FUSION:
            exclude = module_param_prefixes(model, model.feature_head)
        digests[f"branch_{i}"] = state_digest(model.state_dict(), exclude_prefixes=exclude)
    return digests


def feature_head_digests(ensemble: FusionEnsemble) -> dict[str, str]:
    """Digest of each branch's feature-head parameters (layer-fusion trainables)."""
    out = {}
    for i, model in enumerate(ensemble.branches.pool):
        prefix = module_param_prefixes(model, model.feature_head)[0]
        sub = {k: v for k, v in model.state_dict().items() if k.startswith(prefix)}
        out[f"branch_{i}"] = state_digest(sub)
    return out


def _multihot(labels: np.ndarray, class_count: int) -> np.ndarray:
    return np.stack([(labels == c).astype(np.float32) for c in range(1, class_count + 1)], axis=-3)


def train_ensemble(
    ensemble: FusionEnsemble,
    spec: EnsembleSpec,
    train_pool: SlicePool,
    val_pool: SlicePool,
    cfg: TrainConfig,
    out_path: str | Path,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train the fusion parameters of a built ensemble; branches stay frozen.

    With augmentation off, frozen-branch work (stacked logits or windowed
    inputs) is precomputed once and reused every epoch.
    """
    if ensemble.strategy is Strategy.ARGMAX:
        raise ValueError("the argmax ensemble has no trainable parameters")
    if len(train_pool) == 0 or len(val_pool) == 0:
        raise ValueError("empty dataset")
    c = ensemble.class_count
    digests_pre = frozen_branch_digests(ensemble)
    heads_pre = feature_head_digests(ensemble)

    uses_features = ensemble.strategy is Strategy.LAYER_FUSION

    def prepare_inputs(raw: np.ndarray) -> torch.Tensor:
        """Module input for a raw HU batch: branch views or stacked logits."""
        inputs = ensemble.branches.branch_inputs(raw)
        return inputs if uses_features else ensemble.branches.stacked_logits(inputs)

    train_targets = _multihot(train_pool.labels, c)
    val_targets = _multihot(val_pool.labels, c)
    ensemble.branches.eval()

    cached_train = None if cfg.augment else _in_chunks(prepare_inputs, train_pool.raw, cfg.batch_size)
    cached_val = _in_chunks(prepare_inputs, val_pool.raw, cfg.batch_size)
    val_target_t = torch.from_numpy(val_targets)

    def batches(epoch: int):
        order = _epoch_order(cfg, epoch, len(train_pool))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cached_train is not None:
                yield cached_train[idx], torch.from_numpy(train_targets[idx])
            else:
                raws, tgts = [], []
                for i in idx:
                    rng = np.random.default_rng(_augment_seed(cfg, epoch, int(i)))
                    params = draw_augment_params(train_pool.raw[i].shape, rng, cfg.augment_cfg)
                    raw, lab = apply_augment_params(
                        train_pool.raw[i].astype(np.float32), train_pool.labels[i], params
                    )
                    raws.append(raw)
                    tgts.append(_multihot(lab, c))
                yield prepare_inputs(np.stack(raws)), torch.from_numpy(np.stack(tgts))

    def eval_val():
        losses, preds = [], []
        with torch.no_grad():
            for start in range(0, len(val_pool), cfg.batch_size):
                x = cached_val[start : start + cfg.batch_size]
                y = val_target_t[start : start + cfg.batch_size]
                logits = ensemble(x)
                _, report = composite_loss(logits, y, "multilabel")
                losses.append(report.total * x.shape[0])
                preds.append((torch.sigmoid(logits) >= ensemble.threshold).numpy())
        pred = np.concatenate(preds).transpose(1, 0, 2, 3)
        gt = val_targets.transpose(1, 0, 2, 3)
        return float(sum(losses) / len(val_pool)), _macro_dice_maps(pred, gt)

    history, best_epoch, best_val = _training_loop(
        ensemble, ensemble.trainable_parameters(), cfg, batches, eval_val, "multilabel",
        Path(log_path) if log_path else None,
    )

    digests_post = frozen_branch_digests(ensemble)
    heads_post = feature_head_digests(ensemble)
    if digests_pre != digests_post:
        raise RuntimeError("frozen branch parameters changed during ensemble training")

    save_ensemble_checkpoint(
        ensemble,
        spec,
        out_path,
        training={
            "strategy": ensemble.strategy.value,
            "epochs": len(history),
            "best_epoch": best_epoch,
            "best_val_loss": best_val,
            "seed": cfg.rng_seed,
            "frozen_digests": digests_pre,
        },
    )
    return TrainResult(
        None,
        Path(out_path),
        history,
        Path(log_path) if log_path else None,
        best_epoch,
        best_val,
        frozen_digests_pre=digests_pre,
        frozen_digests_post=digests_post,
        head_digests_pre=heads_pre,
        head_digests_post=heads_post,
    )


def _in_chunks(fn: Callable[[np.ndarray], torch.Tensor], raw: np.ndarray, batch: int) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(raw[i : i + batch]) for i in range(0, raw.shape[0], batch)])

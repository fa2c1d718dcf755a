"""Four fusion strategies over a pool of trained single-organ branches.

ARGMAX picks, per pixel, the most confident thresholded branch. LOGITS_CONV
learns a 1x1 convolution over the stacked branch logits. META_MODEL feeds the
stacked logits to a small U-Net. LAYER_FUSION concatenates the branches'
penultimate feature maps and projects them with a trainable 1x1 convolution;
only there do the branches' last feature blocks stay trainable.

Every branch applies its own Hounsfield window to the raw HU slice before
inference. A multiclass branch contributes its per-class logit channels
(background dropped) to the stack, and its feature block to layer fusion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import (
    CheckpointInfo,
    IntegrityError,
    _deserialize_state,
    _serialize_state,
    load_checkpoint,
    read_checkpoint_info,
    read_container,
    state_digest,
    write_container,
)
from .models import MULTICLASS, SegmentationBackbone
from .models.unet import UNet
from .preprocess import WindowSpec, apply_window, center_crop

DEFAULT_THRESHOLD = 0.5
# Whole-range LUT used by multiclass models, which cannot favor one organ.
FULL_RANGE_WINDOW = WindowSpec(width=4095, level=1023.5)

ENSEMBLE_SPEC_SCHEMA = 1


class Strategy(str, Enum):
    ARGMAX = "argmax"
    LOGITS_CONV = "logits_conv"
    META_MODEL = "meta_model"
    LAYER_FUSION = "layer_fusion"


class ConfigurationError(Exception):
    """Ensemble description does not match the available checkpoints."""


@dataclass(frozen=True)
class EnsembleSpec:
    """Declarative ensemble description, serialized as JSON."""

    strategy: Strategy
    branches: tuple[str, ...]  # checkpoint paths
    class_count: int
    threshold: float = DEFAULT_THRESHOLD
    includes_multiclass_branch: bool = False
    fusion_init: str = "identity"  # identity | random
    meta_width: float = 0.125

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.branches:
            raise ValueError("an ensemble needs at least one branch")

    def to_json(self) -> dict:
        # Branch entries carry organ/backbone/window read from the referenced
        # checkpoints when available, for human review of the document.
        branch_entries = []
        for path in self.branches:
            entry: dict = {"path": str(path)}
            try:
                meta = read_checkpoint_info(path).meta
                entry["organ"] = meta.organ
                entry["backbone"] = meta.backbone.value
                if meta.window is not None:
                    entry["window"] = {"width": meta.window.width, "level": meta.window.level}
            except OSError:
                pass
            branch_entries.append(entry)
        return {
            "schema_version": ENSEMBLE_SPEC_SCHEMA,
            "strategy": self.strategy.value,
            "branches": branch_entries,
            "class_count": self.class_count,
            "threshold": self.threshold,
            "includes_multiclass_branch": self.includes_multiclass_branch,
            "fusion_init": self.fusion_init,
            "meta_width": self.meta_width,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EnsembleSpec":
        if d.get("schema_version") != ENSEMBLE_SPEC_SCHEMA:
            raise ValueError(f"unsupported ensemble spec schema {d.get('schema_version')}")
        branches = tuple(
            b["path"] if isinstance(b, dict) else b for b in d["branches"]
        )
        return cls(
            strategy=Strategy(d["strategy"]),
            branches=branches,
            class_count=int(d["class_count"]),
            threshold=float(d.get("threshold", DEFAULT_THRESHOLD)),
            includes_multiclass_branch=bool(d.get("includes_multiclass_branch", False)),
            fusion_init=d.get("fusion_init", "identity"),
            meta_width=float(d.get("meta_width", 0.125)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EnsembleSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LogitStack:
    """Stacked raw branch outputs for one slice, one row per logit channel."""

    values: np.ndarray  # (N, H, W) float32
    branch_meta: tuple[tuple[int, str, str], ...]  # (organ, backbone, digest) per row

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or self.values.shape[0] != len(self.branch_meta):
            raise ValueError("values must be (N, H, W) with one meta row per channel")
        if not np.isfinite(self.values).all():
            raise ValueError("logit stack contains non-finite values")


@dataclass(frozen=True)
class MultiLabelPrediction:
    """Per-class binary maps (class axis first), optionally with probabilities."""

    binary: np.ndarray  # (C, ...) uint8 in {0, 1}
    probs: np.ndarray | None = None  # same shape float32

    def exclusive(self) -> np.ndarray:
        """Exclusive label map: argmax over positive classes, 0 where none fire."""
        any_fg = self.binary.any(axis=0)
        if self.probs is None:
            scores = self.binary.astype(np.float32)
        else:
            scores = np.where(self.binary > 0, self.probs, -np.inf)
        labels = (scores.argmax(axis=0) + 1).astype(np.uint8)
        labels[~any_fg] = 0
        return labels


class Branches(nn.Module):
    """Loaded branch pool; owns the frozen models and their preprocessing."""

    def __init__(self, models: list[SegmentationBackbone], infos: list[CheckpointInfo], class_count: int):
        super().__init__()
        self.pool = nn.ModuleList(models)
        self.infos = list(infos)
        self.class_count = class_count
        for model in self.pool:
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
        covered = set()
        for model in self.pool:
            organ = model.meta.organ
            covered.update(range(1, class_count + 1) if organ == MULTICLASS else [organ])
        missing = set(range(1, class_count + 1)) - covered
        if missing:
            raise ConfigurationError(f"no branch covers organ(s) {sorted(missing)}")

    @classmethod
    def load(cls, paths: list[str | Path], class_count: int) -> "Branches":
        models, infos = [], []
        for path in paths:
            if not Path(path).exists():
                raise ConfigurationError(f"missing branch checkpoint: {path}")
            model, info = load_checkpoint(path)
            models.append(model)
            infos.append(info)
        return cls(models, infos, class_count)

    def __len__(self) -> int:
        return len(self.pool)

    def window_of(self, i: int) -> WindowSpec:
        return self.pool[i].meta.window or FULL_RANGE_WINDOW

    def channel_meta(self) -> tuple[tuple[int, str, str], ...]:
        """(organ, backbone, digest) per stacked logit channel, in branch order."""
        rows = []
        for model, info in zip(self.pool, self.infos):
            if model.meta.organ == MULTICLASS:
                rows.extend(
                    (c, model.meta.backbone.value, info.digest)
                    for c in range(1, self.class_count + 1)
                )
            else:
                rows.append((model.meta.organ, model.meta.backbone.value, info.digest))
        return tuple(rows)

    def feature_channels(self) -> int:
        return sum(m.feature_count for m in self.pool)

    def branch_inputs(self, raw_hu: np.ndarray) -> torch.Tensor:
        """Windowed per-branch views of raw HU slices: (B, n_branches, H, W)."""
        raw_hu = np.asarray(raw_hu)
        batch = raw_hu[None] if raw_hu.ndim == 2 else raw_hu
        views = [apply_window(batch, self.window_of(i)) for i in range(len(self.pool))]
        return torch.from_numpy(np.stack(views, axis=1))

    def stacked_logits(self, branch_inputs: torch.Tensor) -> torch.Tensor:
        """Frozen-branch logits (B, N, H, W); multiclass rows drop background."""
        outs = []
        with torch.no_grad():
            for i, model in enumerate(self.pool):
                logits = model(branch_inputs[:, i : i + 1])
                outs.append(logits[:, 1:] if model.meta.organ == MULTICLASS else logits)
        return torch.cat(outs, dim=1)

    def stacked_features(self, branch_inputs: torch.Tensor) -> torch.Tensor:
        """Concatenated penultimate maps; gradients flow into feature heads only."""
        return torch.cat(
            [m.features(branch_inputs[:, i : i + 1]) for i, m in enumerate(self.pool)], dim=1
        )


def stack_branch_logits(branches: Branches, raw_slice_hu: np.ndarray, crop: int = 320) -> LogitStack:
    """Stack every branch's logits for one raw HU slice."""
    raw = center_crop(np.asarray(raw_slice_hu), crop)
    inputs = branches.branch_inputs(raw)
    for model in branches.pool:
        model.eval()
    values = branches.stacked_logits(inputs)[0].numpy().astype(np.float32)
    return LogitStack(values=values, branch_meta=branches.channel_meta())


def fuse_argmax(
    stack: LogitStack, threshold: float = DEFAULT_THRESHOLD, class_count: int | None = None
) -> np.ndarray:
    """Per-pixel most-confident class above threshold, 0 (background) otherwise.

    With redundant branches the per-class probability is the max over that
    class's channels before the argmax; ties break to the lowest class index.
    """
    organs_per_row = [meta[0] for meta in stack.branch_meta]
    c = class_count or max(organs_per_row)
    probs = 1.0 / (1.0 + np.exp(-stack.values.astype(np.float64)))
    class_probs = np.full((c, *stack.values.shape[1:]), -np.inf)
    for row, organ in enumerate(organs_per_row):
        class_probs[organ - 1] = np.maximum(class_probs[organ - 1], probs[row])
    winner = class_probs.argmax(axis=0)
    labels = (winner + 1).astype(np.uint8)
    labels[class_probs.max(axis=0) < threshold] = 0
    return labels


class FusionEnsemble(nn.Module):
    """Common trunk for the trainable strategies and the argmax wrapper."""

    strategy: Strategy

    def __init__(self, branches: Branches, class_count: int, threshold: float):
        super().__init__()
        self.branches = branches
        self.class_count = class_count
        self.threshold = threshold

    def train(self, mode: bool = True) -> "FusionEnsemble":
        super().train(mode)
        self.branches.eval()  # frozen parts always run in inference mode
        return self

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def head_logits(self, raw_batch: np.ndarray) -> torch.Tensor:
        """(B, C, H, W) fused logits from raw HU slices (already cropped)."""
        raise NotImplementedError

    def predict_slice(self, raw_slice_hu: np.ndarray, crop: int | None = None) -> MultiLabelPrediction:
        raw = center_crop(np.asarray(raw_slice_hu), crop) if crop else np.asarray(raw_slice_hu)
        with torch.no_grad():
            self.eval()
            logits = self.head_logits(raw[None])
            probs = torch.sigmoid(logits)[0].numpy().astype(np.float32)
        return MultiLabelPrediction(binary=(probs >= self.threshold).astype(np.uint8), probs=probs)


class ArgmaxEnsemble(FusionEnsemble):
    """Untrained baseline: threshold + argmax over branch probabilities."""

    strategy = Strategy.ARGMAX

    def predict_slice(self, raw_slice_hu: np.ndarray, crop: int | None = None) -> MultiLabelPrediction:
        raw = center_crop(np.asarray(raw_slice_hu), crop) if crop else np.asarray(raw_slice_hu)
        stack = stack_branch_logits(self.branches, raw, crop=raw.shape[-1])
        labels = fuse_argmax(stack, self.threshold, self.class_count)
        binary = np.stack([(labels == c).astype(np.uint8) for c in range(1, self.class_count + 1)])
        probs = 1.0 / (1.0 + np.exp(-stack.values.astype(np.float64)))
        class_probs = np.zeros_like(binary, dtype=np.float32)
        for row, (organ, _, _) in enumerate(stack.branch_meta):
            class_probs[organ - 1] = np.maximum(class_probs[organ - 1], probs[row].astype(np.float32))
        return MultiLabelPrediction(binary=binary, probs=class_probs)


class LogitsConvEnsemble(FusionEnsemble):
    """1x1 convolution over stacked branch logits -> per-class logit maps."""

    strategy = Strategy.LOGITS_CONV

    def __init__(self, branches, class_count, threshold=DEFAULT_THRESHOLD, init="identity"):
        super().__init__(branches, class_count, threshold)
        n = len(branches.channel_meta())
        self.fusion = nn.Conv2d(n, class_count, kernel_size=1)
        if init == "identity":
            self.init_identity_selection()
        elif init != "random":
            raise ValueError(f"unknown init {init!r}")

    def init_identity_selection(self) -> None:
        """Weights that reproduce each class's first branch exactly (selection)."""
        with torch.no_grad():
            self.fusion.weight.zero_()
            self.fusion.bias.zero_()
            seen = set()
            for row, (organ, _, _) in enumerate(self.branches.channel_meta()):
                if organ not in seen:
                    self.fusion.weight[organ - 1, row, 0, 0] = 1.0
                    seen.add(organ)

    def class_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """(C, N) weight matrix and (C,) bias, for per-model weight analysis."""
        return (
            self.fusion.weight.detach().numpy()[:, :, 0, 0].copy(),
            self.fusion.bias.detach().numpy().copy(),
        )

    def forward(self, stacked_logits: torch.Tensor) -> torch.Tensor:
        if stacked_logits.shape[1] != self.fusion.in_channels:
            raise ConfigurationError(
                f"expected {self.fusion.in_channels} stacked channels, got {stacked_logits.shape[1]}"
            )
        return self.fusion(stacked_logits)

    def head_logits(self, raw_batch: np.ndarray) -> torch.Tensor:
        inputs = self.branches.branch_inputs(raw_batch)
        return self.forward(self.branches.stacked_logits(inputs))


class MetaModelEnsemble(FusionEnsemble):
    """A reduced-depth U-Net reading the stacked logits."""

    strategy = Strategy.META_MODEL

    def __init__(self, branches, class_count, threshold=DEFAULT_THRESHOLD, meta_width=0.125, seed=None):
        super().__init__(branches, class_count, threshold)
        if seed is not None:
            torch.manual_seed(seed)
        n = len(branches.channel_meta())
        self.meta = UNet(in_channels=n, out_channels=class_count, width=meta_width, depth=3)

    def forward(self, stacked_logits: torch.Tensor) -> torch.Tensor:
        expected = self.meta.encoders[0][0].in_channels
        if stacked_logits.shape[1] != expected:
            raise ConfigurationError(
                f"meta model expects {expected} stacked channels, got {stacked_logits.shape[1]}"
            )
        return self.meta(stacked_logits)

    def head_logits(self, raw_batch: np.ndarray) -> torch.Tensor:
        inputs = self.branches.branch_inputs(raw_batch)
        return self.forward(self.branches.stacked_logits(inputs))


class LayerFusionEnsemble(FusionEnsemble):
    """Concatenated penultimate features -> trainable 1x1 projection.

    Each branch's last feature block is unfrozen and trains with the fusion
    layer; everything upstream stays frozen.
    """

    strategy = Strategy.LAYER_FUSION

    def __init__(self, branches, class_count, threshold=DEFAULT_THRESHOLD, init="identity"):
        super().__init__(branches, class_count, threshold)
        self.fusion = nn.Conv2d(branches.feature_channels(), class_count, kernel_size=1)
        for model in self.branches.pool:
            for p in model.feature_head.parameters():
                p.requires_grad_(True)
        if init == "identity":
            self.init_from_branch_projections()
        elif init != "random":
            raise ValueError(f"unknown init {init!r}")

    def init_from_branch_projections(self) -> None:
        """Block-diagonal start: each class reads its first branch's own projection."""
        with torch.no_grad():
            self.fusion.weight.zero_()
            self.fusion.bias.zero_()
            seen: set[int] = set()
            offset = 0
            for model in self.branches.pool:
                f = model.feature_count
                proj = model.final_projection
                if model.meta.organ == MULTICLASS:
                    pairs = [(c, c) for c in range(1, self.class_count + 1)]  # (organ, proj row)
                else:
                    pairs = [(model.meta.organ, 0)]
                for organ, row in pairs:
                    if organ in seen:
                        continue
                    self.fusion.weight[organ - 1, offset : offset + f] = proj.weight[row]
                    self.fusion.bias[organ - 1] = proj.bias[row]
                    seen.add(organ)
                offset += f

    def forward(self, branch_inputs: torch.Tensor) -> torch.Tensor:
        feats = self.branches.stacked_features(branch_inputs)
        if feats.shape[2:] != branch_inputs.shape[2:]:
            raise RuntimeError(
                f"feature maps {tuple(feats.shape[2:])} misaligned with input {tuple(branch_inputs.shape[2:])}"
            )
        return self.fusion(feats)

    def head_logits(self, raw_batch: np.ndarray) -> torch.Tensor:
        return self.forward(self.branches.branch_inputs(raw_batch))


def build_ensemble(spec: EnsembleSpec, seed: int | None = None) -> FusionEnsemble:
    """Load branches and assemble the strategy named by the spec."""
    branches = Branches.load(list(spec.branches), spec.class_count)
    if spec.strategy is Strategy.ARGMAX:
        return ArgmaxEnsemble(branches, spec.class_count, spec.threshold)
    if spec.strategy is Strategy.LOGITS_CONV:
        if seed is not None:
            torch.manual_seed(seed)
        return LogitsConvEnsemble(branches, spec.class_count, spec.threshold, init=spec.fusion_init)
    if spec.strategy is Strategy.META_MODEL:
        return MetaModelEnsemble(
            branches, spec.class_count, spec.threshold, meta_width=spec.meta_width, seed=seed
        )
    if spec.strategy is Strategy.LAYER_FUSION:
        if seed is not None:
            torch.manual_seed(seed)
        return LayerFusionEnsemble(branches, spec.class_count, spec.threshold, init=spec.fusion_init)
    raise ValueError(f"unknown strategy {spec.strategy}")


def _argmax_batch(ensemble: "ArgmaxEnsemble", chunk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched argmax fusion: per-slice binary maps and class probabilities."""
    inputs = ensemble.branches.branch_inputs(chunk)
    with torch.no_grad():
        stacked = ensemble.branches.stacked_logits(inputs).numpy()
    meta = ensemble.branches.channel_meta()
    c = ensemble.class_count
    binaries, probs = [], []
    for values in stacked:
        stack = LogitStack(values=values.astype(np.float32), branch_meta=meta)
        labels = fuse_argmax(stack, ensemble.threshold, c)
        binaries.append(np.stack([(labels == cls).astype(np.uint8) for cls in range(1, c + 1)]))
        row_probs = 1.0 / (1.0 + np.exp(-values.astype(np.float64)))
        class_probs = np.zeros((c, *values.shape[1:]), np.float32)
        for row, (organ, _, _) in enumerate(meta):
            class_probs[organ - 1] = np.maximum(class_probs[organ - 1], row_probs[row].astype(np.float32))
        probs.append(class_probs)
    return binaries, probs


def predict_volume(
    ensemble: FusionEnsemble, volume, crop: int = 320, batch_size: int = 8
) -> MultiLabelPrediction:
    """Per-slice inference assembled along z; returns (C, Z, H, W) maps."""
    voxels = center_crop(np.asarray(volume.voxels, dtype=np.float32), crop)
    z = voxels.shape[0]
    binaries, probs = [], []
    ensemble.eval()
    for start in range(0, z, batch_size):
        chunk = voxels[start : start + batch_size]
        if isinstance(ensemble, ArgmaxEnsemble):
            b, p = _argmax_batch(ensemble, chunk)
            binaries.extend(b)
            probs.extend(p)
        else:
            with torch.no_grad():
                logits = ensemble.head_logits(chunk)
                p = torch.sigmoid(logits).numpy().astype(np.float32)
            binaries.extend((pi >= ensemble.threshold).astype(np.uint8) for pi in p)
            probs.extend(p)
    binary = np.stack(binaries, axis=1)  # (C, Z, H, W)
    prob = np.stack(probs, axis=1).astype(np.float32)
    return MultiLabelPrediction(binary=binary, probs=prob)


# --- trained-ensemble checkpointing ------------------------------------------

def save_ensemble_checkpoint(
    ensemble: FusionEnsemble,
    spec: EnsembleSpec,
    path: str | Path,
    training: dict | None = None,
) -> str:
    """Persist fusion parameters plus references (path + digest) to every branch."""
    head_state = {
        k: v for k, v in ensemble.state_dict().items() if not k.startswith("branches.")
    }
    if ensemble.strategy is Strategy.LAYER_FUSION:
        # branch feature heads train in this strategy, so they belong to the head state
        for i, model in enumerate(ensemble.branches.pool):
            prefix = _feature_head_prefix(model)
            head_state.update(
                {
                    f"branches.pool.{i}.{name}": value
                    for name, value in model.state_dict().items()
                    if name.startswith(prefix)
                }
            )
    manifest, blob = _serialize_state(head_state)
    header = {
        "kind": "ensemble",
        "spec": spec.to_json(),
        "branch_refs": [
            {"path": str(p), "digest": info.digest}
            for p, info in zip(spec.branches, ensemble.branches.infos)
        ],
        "training": training or {},
        "tensors": manifest,
        "digest": state_digest(head_state),
    }
    write_container(path, header, blob)
    return header["digest"]


def _feature_head_prefix(model: SegmentationBackbone) -> str:
    for name, mod in model.named_modules():
        if mod is model.feature_head:
            return name + "."
    raise ValueError("feature head not found")


def load_ensemble_checkpoint(path: str | Path, seed: int | None = None) -> tuple[FusionEnsemble, EnsembleSpec, dict]:
    """Rebuild a trained ensemble; fails if any referenced branch file changed."""
    header, blob = read_container(path)
    if header.get("kind") != "ensemble":
        raise OSError(f"{path}: not an ensemble checkpoint")
    spec = EnsembleSpec.from_json(header["spec"])
    ensemble = build_ensemble(spec, seed=seed)
    for ref, info in zip(header["branch_refs"], ensemble.branches.infos):
        if ref["digest"] != info.digest:
            raise IntegrityError(
                f"branch checkpoint {ref['path']} changed since this ensemble was trained"
            )
    state = _deserialize_state(header["tensors"], blob)
    if state_digest(state) != header["digest"]:
        raise IntegrityError(f"{path}: fusion parameter digest mismatch")
    ensemble.load_state_dict(state, strict=False)
    return ensemble, spec, header.get("training", {})

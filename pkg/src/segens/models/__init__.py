"""Segmentation backbones behind one contract.

Every backbone produces penultimate feature maps at input resolution (64
channels for the U-Net family, 256 for DeepLabV3) and derives its logits by
one final 1x1 projection of those maps, so `forward(x)` equals
`final_projection(features(x))` exactly. Binary and multiclass variants
differ only in the projection's output channel count. Internal widths scale
with a multiplier (default 0.5) but penultimate counts are fixed at every
scale because layer fusion depends on them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from ..preprocess import WindowSpec


class BackboneKind(str, Enum):
    # Definition order is the tie-break order for model selection.
    UNET = "unet"
    SE_RESUNET = "se_resunet"
    DEEPLABV3 = "deeplabv3"


PENULTIMATE_FEATURES = {
    BackboneKind.UNET: 64,
    BackboneKind.SE_RESUNET: 64,
    BackboneKind.DEEPLABV3: 256,
}

MULTICLASS = "multiclass"  # organ field value for C+1-channel variants


@dataclass(frozen=True)
class ModelMeta:
    """Identity of a trained model: what it segments and how input is windowed."""

    backbone: BackboneKind
    organ: int | str | None  # organ id, MULTICLASS, or None (e.g. meta fusion net)
    window: WindowSpec | None
    in_channels: int
    out_channels: int
    width: float


class SegmentationBackbone(nn.Module):
    """Common contract; subclasses implement `features` and set `final_projection`."""

    feature_count: int
    final_projection: nn.Conv2d

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @property
    def feature_head(self) -> nn.Module:
        """The last block producing the penultimate maps (unfrozen in layer fusion)."""
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.final_projection(self.features(x))


def init_weights(module: nn.Module) -> None:
    """He-uniform convolutions, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_model(
    backbone: BackboneKind | str,
    in_channels: int = 1,
    out_channels: int = 1,
    width: float = 0.5,
    organ: int | str | None = None,
    window: WindowSpec | None = None,
    seed: int | None = None,
) -> SegmentationBackbone:
    """Construct one backbone; `seed` fixes the parameter initialization."""
    from .deeplab import DeepLabV3
    from .seresunet import SEResUNet
    from .unet import UNet

    backbone = BackboneKind(backbone)
    if seed is not None:
        torch.manual_seed(seed)
    cls = {
        BackboneKind.UNET: UNet,
        BackboneKind.SE_RESUNET: SEResUNet,
        BackboneKind.DEEPLABV3: DeepLabV3,
    }[backbone]
    model = cls(in_channels=in_channels, out_channels=out_channels, width=width)
    model.meta = ModelMeta(
        backbone=backbone,
        organ=organ,
        window=window,
        in_channels=in_channels,
        out_channels=out_channels,
        width=width,
    )
    return model


def _to_input_tensor(model: nn.Module, pixels) -> torch.Tensor:
    arr = np.asarray(pixels, dtype=np.float32) if not torch.is_tensor(pixels) else pixels
    t = torch.as_tensor(arr, dtype=torch.float32)
    want = model.meta.in_channels if hasattr(model, "meta") else 1
    if t.ndim == 2:
        if want != 1:
            raise ValueError(f"model expects {want} input channels, got a single-channel slice")
        t = t[None, None]
    elif t.ndim == 3:
        if t.shape[0] != want:
            raise ValueError(f"model expects {want} input channels, got {t.shape[0]}")
        t = t[None]
    else:
        raise ValueError(f"expected (H, W) or (C, H, W) input, got shape {tuple(t.shape)}")
    return t


def predict_logits(model: SegmentationBackbone, pixels) -> np.ndarray:
    """Eval-mode forward pass; returns (out_channels, H, W) float32 logits."""
    t = _to_input_tensor(model, pixels)
    model.eval()
    with torch.no_grad():
        logits = model(t)
    return logits[0].numpy()


def extract_features(model: SegmentationBackbone, pixels) -> np.ndarray:
    """Eval-mode penultimate features, (feature_count, H, W) float32."""
    t = _to_input_tensor(model, pixels)
    model.eval()
    with torch.no_grad():
        feats = model.features(t)
    return feats[0].numpy()

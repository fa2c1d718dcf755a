"""Atrous-pyramid encoder-decoder (DeepLabV3 style), output stride 8.

The head projects ASPP output to a fixed 256 maps; `features` returns those
maps bilinearly upsampled to input resolution (the kept final upsampling),
so the 1x1 projection applies at full resolution.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from . import SegmentationBackbone, init_weights

ASPP_RATES = (6, 12, 18)


def _conv_bn_relu(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1):
    padding = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        padding = dilation
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        self.skip = (
            nn.Identity()
            if in_ch == out_ch and stride == 1
            else nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.body(x) + self.skip(x))


class ASPP(nn.Module):
    """Parallel atrous branches plus image-level pooling, fused by a 1x1 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.branches = nn.ModuleList(
            [_conv_bn_relu(in_ch, out_ch, kernel=1)]
            + [_conv_bn_relu(in_ch, out_ch, dilation=r) for r in ASPP_RATES]
        )
        # No norm here: the pooled map is 1x1, which batch norm cannot handle.
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_ch, out_ch, 1),
            nn.ReLU(inplace=True),
        )
        self.project = _conv_bn_relu(out_ch * (len(ASPP_RATES) + 2), out_ch, kernel=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[2:]
        pooled = F.interpolate(self.image_pool(x), size=size, mode="bilinear", align_corners=False)
        out = torch.cat([branch(x) for branch in self.branches] + [pooled], dim=1)
        return self.project(out)


class DeepLabV3(SegmentationBackbone):
    feature_count = 256

    def __init__(self, in_channels: int = 1, out_channels: int = 1, width: float = 0.5):
        super().__init__()
        c1 = max(16, round(64 * width))
        c2 = max(16, round(128 * width))
        c3 = max(16, round(256 * width))
        aspp_ch = max(16, round(256 * width))

        self.stem = _conv_bn_relu(in_channels, c1, stride=2)
        self.layer1 = ResidualBlock(c1, c2, stride=2)
        self.layer2 = ResidualBlock(c2, c3, stride=2)
        self.layer3 = ResidualBlock(c3, c3, dilation=2)
        self.aspp = ASPP(c3, aspp_ch)
        self.head = _conv_bn_relu(aspp_ch, self.feature_count)
        self.final_projection = nn.Conv2d(self.feature_count, out_channels, 1)
        init_weights(self)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[2:]
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        x = self.aspp(x)
        x = self.head(x)
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)

    @property
    def feature_head(self) -> nn.Module:
        return self.head

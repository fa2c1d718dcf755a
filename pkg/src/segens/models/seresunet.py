"""Residual U-Net with squeeze-and-excitation channel recalibration.

Residual double-conv blocks on both paths, each followed by an SE block
(reduction ratio 16). The last decoder block emits 64 maps at any width.
"""

from __future__ import annotations

import torch
from torch import nn

from . import SegmentationBackbone, init_weights


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        squeezed = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, squeezed)
        self.fc2 = nn.Linear(squeezed, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = x.mean(dim=(2, 3))
        w = torch.relu(self.fc1(w))
        w = torch.sigmoid(self.fc2(w))
        return x * w[:, :, None, None]


class ResidualSEBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
        )
        self.skip = (
            nn.Identity()
            if in_ch == out_ch
            else nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch))
        )
        self.se = SEBlock(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.se(self.body(x)) + self.skip(x))


class SEResUNet(SegmentationBackbone):
    feature_count = 64

    def __init__(self, in_channels: int = 1, out_channels: int = 1, width: float = 0.5, depth: int = 4):
        super().__init__()
        if depth < 2:
            raise ValueError("depth must be >= 2")
        chans = [max(8, round(64 * width * 2**i)) for i in range(depth)]
        bottleneck = max(8, round(64 * width * 2**depth))

        self.pool = nn.MaxPool2d(2)
        self.encoders = nn.ModuleList()
        prev = in_channels
        for c in chans:
            self.encoders.append(ResidualSEBlock(prev, c))
            prev = c
        self.bottleneck = ResidualSEBlock(prev, bottleneck)

        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        prev = bottleneck
        for i, c in reversed(list(enumerate(chans))):
            out = self.feature_count if i == 0 else c
            self.upconvs.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            self.decoders.append(ResidualSEBlock(2 * c, out))
            prev = out

        self.final_projection = nn.Conv2d(self.feature_count, out_channels, 1)
        init_weights(self)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return x

    @property
    def feature_head(self) -> nn.Module:
        return self.decoders[-1]

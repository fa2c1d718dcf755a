"""Symmetric encoder-decoder with skip connections (U-Net style).

The decoder's last block always emits 64 maps regardless of the width
multiplier; everything upstream scales.
"""

from __future__ import annotations

import torch
from torch import nn

from . import SegmentationBackbone, init_weights


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(SegmentationBackbone):
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
            self.encoders.append(_conv_block(prev, c))
            prev = c
        self.bottleneck = _conv_block(prev, bottleneck)

        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        prev = bottleneck
        for i, c in reversed(list(enumerate(chans))):
            out = self.feature_count if i == 0 else c
            self.upconvs.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            self.decoders.append(_conv_block(2 * c, out))
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

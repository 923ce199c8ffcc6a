"""Skip-connected upsampling decoder producing per-pixel needle logits."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .encoders import ConvBlock
from .errors import ShapeError


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2)
        self.conv = ConvBlock(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(f"skip {tuple(skip.shape)} does not match upsampled {tuple(x.shape)}")
        return self.conv(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    """Three 2x upsampling stages, each concatenating its skip, then a 1x1 head.

    Outputs raw logits; no sigmoid.
    """

    def __init__(self, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.stage1 = DecoderStage(8 * c, 4 * c, 4 * c)
        self.stage2 = DecoderStage(4 * c, 2 * c, 2 * c)
        self.stage3 = DecoderStage(2 * c, c, c)
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, bottleneck, skips):
        if len(skips) != 3:
            raise ShapeError(f"decoder needs 3 skips, got {len(skips)}")
        x = self.stage1(bottleneck, skips[2])
        x = self.stage2(x, skips[1])
        x = self.stage3(x, skips[0])
        return self.head(x)


def binarize(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Threshold sigmoid(logits) at `threshold`; ties go to foreground.

    Implemented as a logit-space comparison so threshold 0.5 is exactly
    `logits >= 0`.
    """
    if not (0.0 < threshold < 1.0):
        raise ShapeError(f"threshold must be in (0, 1), got {threshold}")
    if not torch.isfinite(logits).all():
        raise ShapeError("logits contain non-finite values")
    cut = math.log(threshold / (1.0 - threshold))
    return (logits >= cut).to(torch.uint8)

"""Three interchangeable encoders sharing one skip/bottleneck shape contract.

For input (B, in_ch, H, W) with H, W divisible by 8 and base channel count c:

    skips      [(B, c, H, W), (B, 2c, H/2, W/2), (B, 4c, H/4, W/4)]
    bottleneck (B, 8c, H/8, W/8)

The shared contract is what lets the decoder and the temporal blocks stay
identical while encoders are swapped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, ShapeError, WeightsMismatch

ENCODER_VARIANTS = ("vanilla", "resnet", "hybrid")


@dataclass
class EncoderConfig:
    variant: str = "vanilla"
    in_channels: int = 1
    base_channels: int = 64
    image_size: int = 256
    vit_dim: int = 256
    vit_layers: int = 4
    vit_heads: int = 4
    vit_mlp_ratio: int = 2

    def __post_init__(self) -> None:
        if self.variant not in ENCODER_VARIANTS:
            raise InvalidConfig(f"unknown encoder variant {self.variant!r}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise InvalidConfig("channel counts must be >= 1")
        if self.image_size % 8 != 0:
            raise InvalidConfig("image_size must be divisible by 8")
        if self.variant == "hybrid" and self.vit_dim % self.vit_heads != 0:
            raise InvalidConfig("vit_dim must be divisible by vit_heads")

    @property
    def channel_plan(self) -> tuple[int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    @property
    def bottleneck_channels(self) -> int:
        return 8 * self.base_channels


@dataclass
class EncoderOutput:
    bottleneck: torch.Tensor
    skips: list[torch.Tensor]


class ConvBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        return F.relu(self.conv2(x))


class ConvStageStack(nn.Module):
    """The three downsampling conv stages shared by vanilla and hybrid."""

    def __init__(self, in_ch: int, plan: tuple[int, int, int]):
        super().__init__()
        self.block1 = ConvBlock(in_ch, plan[0])
        self.block2 = ConvBlock(plan[0], plan[1])
        self.block3 = ConvBlock(plan[1], plan[2])
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        s0 = self.block1(x)
        s1 = self.block2(self.pool(s0))
        s2 = self.block3(self.pool(s1))
        return [s0, s1, s2], self.pool(s2)


class VanillaEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.prefix = ConvStageStack(cfg.in_channels, cfg.channel_plan)
        self.bottleneck = ConvBlock(cfg.channel_plan[2], cfg.bottleneck_channels)

    def forward(self, x):
        skips, pooled = self.prefix(x)
        return skips, self.bottleneck(pooled)


class BasicBlock(nn.Module):
    """Standard two-conv residual block with BatchNorm."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _residual_stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(BasicBlock(in_ch, out_ch, stride), BasicBlock(out_ch, out_ch, 1))


class ResNetEncoder(nn.Module):
    """18-layer-style residual encoder on the shared skip grid.

    The stem keeps stride 1 (no max-pool) so the three strided stages land
    on H/2, H/4, H/8; 1x1 convs project stage outputs to the skip plan.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c0, c1, c2 = cfg.channel_plan
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c0, 7, stride=1, padding=3, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(inplace=True),
        )
        self.stage1 = _residual_stage(c0, c0, stride=1)
        self.stage2 = _residual_stage(c0, c1, stride=2)
        self.stage3 = _residual_stage(c1, c2, stride=2)
        self.stage4 = _residual_stage(c2, cfg.bottleneck_channels, stride=2)
        self.proj0 = nn.Conv2d(c0, c0, 1)
        self.proj1 = nn.Conv2d(c1, c1, 1)
        self.proj2 = nn.Conv2d(c2, c2, 1)

    def forward(self, x):
        f0 = self.stage1(self.stem(x))
        f1 = self.stage2(f0)
        f2 = self.stage3(f1)
        bottleneck = self.stage4(f2)
        return [self.proj0(f0), self.proj1(f1), self.proj2(f2)], bottleneck


class ViTBottleneck(nn.Module):
    """Transformer over the H/8 grid with 1x1 patches and learned positions."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        grid = cfg.image_size // 8
        self.grid = grid
        self.proj_in = nn.Conv2d(cfg.channel_plan[2], cfg.vit_dim, 1)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid * grid, cfg.vit_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.vit_dim,
            nhead=cfg.vit_heads,
            dim_feedforward=cfg.vit_dim * cfg.vit_mlp_ratio,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=cfg.vit_layers, enable_nested_tensor=False
        )
        self.proj_out = nn.Conv2d(cfg.vit_dim, cfg.bottleneck_channels, 1)

    def _positions(self, h: int, w: int) -> torch.Tensor:
        if h == self.grid and w == self.grid:
            return self.pos_embed
        # re-grid the learned positions for off-size inputs
        pos = self.pos_embed.reshape(1, self.grid, self.grid, -1).permute(0, 3, 1, 2)
        pos = F.interpolate(pos, size=(h, w), mode="bilinear", align_corners=False)
        return pos.permute(0, 2, 3, 1).reshape(1, h * w, -1)

    def forward(self, x):
        b, _, h, w = x.shape
        tokens = self.proj_in(x).flatten(2).transpose(1, 2)  # (B, N, D)
        tokens = self.transformer(tokens + self._positions(h, w))
        grid = tokens.transpose(1, 2).reshape(b, -1, h, w)
        return self.proj_out(grid)


class HybridEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.prefix = ConvStageStack(cfg.in_channels, cfg.channel_plan)
        self.vit = ViTBottleneck(cfg)

    def forward(self, x):
        skips, pooled = self.prefix(x)
        return skips, self.vit(pooled)


class Encoder(nn.Module):
    """Wrapper enforcing the shape contract around one encoder variant."""

    def __init__(self, cfg: EncoderConfig, body: nn.Module):
        super().__init__()
        self.config = cfg
        self.body = body

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[2] % 8 != 0 or x.shape[3] % 8 != 0:
            raise ShapeError(f"spatial dims must be divisible by 8, got {tuple(x.shape[2:])}")
        skips, bottleneck = self.body(x)
        return EncoderOutput(bottleneck=bottleneck, skips=skips)


def kaiming_init(module: nn.Module) -> None:
    """He-normal conv weights (fan-in, ReLU gain), zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_encoder(cfg: EncoderConfig, init_seed: int = 0, pretrained_weights=None) -> Encoder:
    """Construct and initialize an encoder; deterministic for a given seed.

    The conv-stage prefix is built and Kaiming-initialized before anything
    variant-specific, so vanilla and hybrid share bit-identical prefix
    parameters for the same seed.
    """
    if pretrained_weights is not None and cfg.variant == "vanilla":
        raise InvalidConfig("pretrained weights are only supported for resnet/hybrid")
    torch.manual_seed(init_seed)
    if cfg.variant == "vanilla":
        body = VanillaEncoder(cfg)
        kaiming_init(body)
    elif cfg.variant == "hybrid":
        body = HybridEncoder(cfg)
        kaiming_init(body.prefix)
    else:
        body = ResNetEncoder(cfg)
    enc = Encoder(cfg, body)
    if pretrained_weights is not None:
        load_weights_file(enc, pretrained_weights)
    return enc


def save_weights_file(module: nn.Module, path) -> None:
    """Flat archive of parameter/buffer names to arrays (npz container)."""
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_weights_file(module: nn.Module, path) -> None:
    path = Path(path)
    if not path.exists():
        raise WeightsMismatch(f"weights file not found: {path}")
    with np.load(path) as archive:
        state = module.state_dict()
        names = set(archive.files)
        expected = set(state.keys())
        if names != expected:
            missing = sorted(expected - names)[:3]
            extra = sorted(names - expected)[:3]
            raise WeightsMismatch(f"weight names differ (missing {missing}, extra {extra})")
        loaded = {}
        for k in state:
            arr = archive[k]
            if tuple(arr.shape) != tuple(state[k].shape):
                raise WeightsMismatch(
                    f"{k}: file shape {arr.shape} vs model shape {tuple(state[k].shape)}"
                )
            loaded[k] = torch.from_numpy(arr).to(state[k].dtype)
    module.load_state_dict(loaded)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

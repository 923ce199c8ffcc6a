"""Bottleneck block variants compared against the KF-style block.

Every variant maps (B, C, h, w) -> (B, C, h, w) so the encoder/decoder
code path is identical across the comparison grid:

    none      identity (plain encoder-decoder)
    attn      identity at the bottleneck; attention gates on the skips
    stack     identity; temporal context enters as stacked input channels
    lstm      vector LSTM cell in a learned low-dim embedding
    convlstm  convolutional LSTM cell at full spatial resolution
    kf        the KF-style block (kfblock module)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import VideoSequence
from .errors import InvalidConfig, ShapeError, StateMismatch
from .kfblock import KFBlock

BLOCK_KINDS = ("none", "attn", "stack", "lstm", "convlstm", "kf")
RECURRENT_KINDS = ("lstm", "convlstm", "kf")


@dataclass
class BlockConfig:
    kind: str = "none"
    stack_depth: int = 5

    def __post_init__(self) -> None:
        if self.kind not in BLOCK_KINDS:
            raise InvalidConfig(f"unknown block kind {self.kind!r}")
        if self.stack_depth < 1:
            raise InvalidConfig("stack_depth must be >= 1")

    @property
    def recurrent(self) -> bool:
        return self.kind in RECURRENT_KINDS


class StatelessBlock(nn.Module):
    """Identity bottleneck used by the none / attn / stack variants."""

    recurrent = False

    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward_step(self, z, state=None):
        if state is not None:
            raise StateMismatch(f"{self.kind!r} block is stateless, got a state")
        return z, None

    def init_state(self, z0):
        return None


class AttentionGate(nn.Module):
    """Additive attention: coefficients in (0,1) from (skip, gating signal)."""

    def __init__(self, skip_ch: int, gate_ch: int):
        super().__init__()
        inter = max(skip_ch // 2, 1)
        self.theta = nn.Conv2d(skip_ch, inter, 1)
        self.phi = nn.Conv2d(gate_ch, inter, 1)
        self.psi = nn.Conv2d(inter, 1, 1)

    def forward(self, skip, gating):
        g = F.interpolate(gating, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        coeff = torch.sigmoid(self.psi(F.relu(self.theta(skip) + self.phi(g))))
        return skip * coeff, coeff


class AttentionGatesBlock(StatelessBlock):
    def __init__(self, channels: int, skip_channels: tuple[int, int, int]):
        super().__init__("attn")
        self.gates = nn.ModuleList(AttentionGate(sc, channels) for sc in skip_channels)

    def gate_skips(self, skips, gating):
        if len(skips) != len(self.gates):
            raise ShapeError(f"expected {len(self.gates)} skips, got {len(skips)}")
        return [gate(skip, gating)[0] for gate, skip in zip(self.gates, skips)]

    def gate_coefficients(self, skips, gating):
        return [gate(skip, gating)[1] for gate, skip in zip(self.gates, skips)]


class LSTMBlock(nn.Module):
    """One LSTM cell in a learned embedding of the flattened bottleneck.

    No adjacency information survives the flatten; this is the deliberate
    contrast to the convolutional recurrent variants.
    """

    kind = "lstm"
    recurrent = True

    def __init__(self, channels: int, grid: tuple[int, int]):
        super().__init__()
        self.channels = channels
        self.grid = tuple(grid)
        flat = channels * grid[0] * grid[1]
        self.down = nn.Linear(flat, channels)
        self.cell = nn.LSTMCell(channels, channels)
        self.up = nn.Linear(channels, flat)

    def init_state(self, z0):
        b = z0.shape[0]
        h = z0.new_zeros(b, self.channels)
        return h, torch.zeros_like(h)

    def forward_step(self, z, state):
        if state is None:
            raise StateMismatch("lstm block needs an initialized state")
        if z.shape[1] != self.channels or tuple(z.shape[2:]) != self.grid:
            raise ShapeError(f"expected (B, {self.channels}, {self.grid}), got {tuple(z.shape)}")
        v = self.down(z.flatten(1))
        h, c = self.cell(v, state)
        x = self.up(h).reshape(z.shape)
        return x, (h, c)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden_ch: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_ch + hidden_ch, 4 * hidden_ch, kernel_size, padding=kernel_size // 2)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = torch.chunk(self.conv(torch.cat([x, h], dim=1)), 4, dim=1)
        i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
        c = f * c + i * torch.tanh(g)
        h = o * torch.tanh(c)
        return h, c


class ConvLSTMBlock(nn.Module):
    kind = "convlstm"
    recurrent = True

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.cell = ConvLSTMCell(channels, channels)

    def init_state(self, z0):
        h = torch.zeros_like(z0)
        return h, torch.zeros_like(h)

    def forward_step(self, z, state):
        if state is None:
            raise StateMismatch("convlstm block needs an initialized state")
        if z.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {z.shape[1]}")
        h, c = self.cell(z, state)
        return h, (h, c)


def build_block(cfg: BlockConfig, channels: int, grid: tuple[int, int],
                skip_channels: tuple[int, int, int]) -> nn.Module:
    if cfg.kind in ("none", "stack"):
        return StatelessBlock(cfg.kind)
    if cfg.kind == "attn":
        return AttentionGatesBlock(channels, skip_channels)
    if cfg.kind == "lstm":
        return LSTMBlock(channels, grid)
    if cfg.kind == "convlstm":
        return ConvLSTMBlock(channels)
    return KFBlock(channels)


def block_forward(block: nn.Module, state, z_t: torch.Tensor):
    """Uniform step entry point: (x_t, new_state)."""
    if block.recurrent and state is None:
        raise StateMismatch(f"{block.kind!r} block requires a state; reset first")
    return block.forward_step(z_t, state)


def stack_window(frames: np.ndarray, t: int, depth: int) -> np.ndarray:
    """Frames [t-depth+1 .. t] of a (T, H, W) array, clamped at the left edge."""
    if t < 0 or t >= frames.shape[0]:
        raise IndexError(f"frame {t} outside sequence of {frames.shape[0]}")
    if depth < 1:
        raise InvalidConfig("stack depth must be >= 1")
    idx = [max(0, t - depth + 1 + k) for k in range(depth)]
    return np.stack([frames[i] for i in idx])


def stack_frames(seq: VideoSequence, t: int, depth: int) -> torch.Tensor:
    """stack_window over a VideoSequence, as a (1, depth, H, W) tensor."""
    window = stack_window(seq.frame_array(), t, depth)
    return torch.from_numpy(window).float().unsqueeze(0)

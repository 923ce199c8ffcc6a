"""Learnable Kalman-filter-style recurrent block over bottleneck feature maps.

Each time step runs a prediction step and an update step on the current
observation z_t (the encoder bottleneck):

    x_hat = f1(x_prev)              dynamics model
    z_hat = f2(x_hat)               observation model
    dx    = x_prev - x_hat          dynamics error
    dz    = z_t    - z_hat          observation error
    gain, hidden' = f3(dx, dz, hidden)
    x_t   = x_hat + gain * dz       gated blend handed to the decoder

f1 and f2 are residual conv pairs whose final conv is zero-initialized, so
both start as the identity (constant-position prior). f3 is a convolutional
GRU cell over the concatenated errors followed by a 1x1 conv and a sigmoid,
so every gain entry lies in (0, 1) and the cell accumulates error history
at full spatial resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeError, UninitializedState


@dataclass
class KFState:
    """Recurrent state for one in-flight sequence; single-owner."""

    x_prev: torch.Tensor
    gain_hidden: torch.Tensor
    initialized: bool = True


@dataclass
class KFStepTrace:
    """Detached intermediate tensors of one step, for diagnostics/tests."""

    z_t: torch.Tensor
    x_hat: torch.Tensor
    z_hat: torch.Tensor
    dx: torch.Tensor
    dz: torch.Tensor
    gain: torch.Tensor
    x_out: torch.Tensor


class ResidualConvPair(nn.Module):
    """x + conv3x3(relu(conv3x3(x))), final conv zero-initialized."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(torch.relu(self.conv1(x)))


class ConvGRUCell(nn.Module):
    def __init__(self, in_ch: int, hidden_ch: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.gates = nn.Conv2d(in_ch + hidden_ch, 2 * hidden_ch, kernel_size, padding=pad)
        self.candidate = nn.Conv2d(in_ch + hidden_ch, hidden_ch, kernel_size, padding=pad)

    def forward(self, x, h):
        r, z = torch.chunk(torch.sigmoid(self.gates(torch.cat([x, h], dim=1))), 2, dim=1)
        n = torch.tanh(self.candidate(torch.cat([x, r * h], dim=1)))
        return (1.0 - z) * n + z * h


class GainNetwork(nn.Module):
    """ConvGRU over the error history, squashed to a per-element gain."""

    def __init__(self, channels: int):
        super().__init__()
        self.cell = ConvGRUCell(2 * channels, channels)
        self.head = nn.Conv2d(channels, channels, 1)

    def forward(self, dx, dz, hidden):
        new_hidden = self.cell(torch.cat([dx, dz], dim=1), hidden)
        gain = torch.sigmoid(self.head(new_hidden))
        return gain, new_hidden


class KFBlock(nn.Module):
    kind = "kf"
    recurrent = True

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.f1 = ResidualConvPair(channels)
        self.f2 = ResidualConvPair(channels)
        self.f3 = GainNetwork(channels)

    def _check_obs(self, z: torch.Tensor) -> None:
        if z.ndim != 4 or z.shape[1] != self.channels:
            raise ShapeError(f"expected (B, {self.channels}, h, w), got {tuple(z.shape)}")

    def reset_state(self, z0: torch.Tensor) -> KFState:
        """Fresh state: x_prev starts at the first observation, memory at zero."""
        self._check_obs(z0)
        return KFState(x_prev=z0.clone(), gain_hidden=torch.zeros_like(z0))

    def predict_step(self, state: KFState) -> tuple[torch.Tensor, torch.Tensor]:
        if not isinstance(state, KFState) or not state.initialized:
            raise UninitializedState("call reset_state before stepping")
        x_hat = self.f1(state.x_prev)
        z_hat = self.f2(x_hat)
        return x_hat, z_hat

    def update_step(self, state, z_t, x_hat, z_hat):
        for t in (z_t, x_hat, z_hat, state.x_prev):
            if t.shape != z_t.shape:
                raise ShapeError("prediction/observation shapes disagree")
        self._check_obs(z_t)
        dx = state.x_prev - x_hat
        dz = z_t - z_hat
        gain, new_hidden = self.f3(dx, dz, state.gain_hidden)
        x_t = x_hat + gain * dz
        if __debug__:
            with torch.no_grad():
                recon = (x_t - (x_hat + gain * dz)).abs().max()
                assert float(recon) <= 1e-6 * max(1.0, float(x_t.abs().max()))
        new_state = KFState(x_prev=x_t, gain_hidden=new_hidden)
        trace = KFStepTrace(
            z_t=z_t.detach(),
            x_hat=x_hat.detach(),
            z_hat=z_hat.detach(),
            dx=dx.detach(),
            dz=dz.detach(),
            gain=gain.detach(),
            x_out=x_t.detach(),
        )
        return x_t, new_state, trace

    def forward_step(self, z_t, state, return_trace: bool = False):
        """One prediction + update step; the returned x_t feeds the decoder."""
        x_hat, z_hat = self.predict_step(state)
        x_t, new_state, trace = self.update_step(state, z_t, x_hat, z_hat)
        if return_trace:
            return x_t, new_state, trace
        return x_t, new_state

    def init_state(self, z0: torch.Tensor) -> KFState:
        return self.reset_state(z0)

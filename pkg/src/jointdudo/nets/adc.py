"""Adaptive data consistency: learned voxelwise fusion of auxiliary and primary projections.

All fusion helpers broadcast the per-detector mask ``delta`` over the last
(angle) axis, so they work for ``(U, V, A)`` as well as ``(B, C, U, V, A)``
tensors.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


def _same_shape(*ts):
    shapes = {tuple(t.shape) for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"fusion inputs disagree in shape: {sorted(shapes)}")


def _expand_r(r: torch.Tensor, ndim: int) -> list[torch.Tensor]:
    """Split ``(..., 3)`` recalibration weights into three broadcastable factors."""
    return [r[..., k].reshape(*r.shape[:-1], *([1] * (ndim - r.dim() + 1))) for k in range(3)]


def adc_fuse(aux, primary, delta, gamma, r):
    """``r1*(aux*delta*gamma) + r2*(primary*delta*(1-gamma)) + r3*(primary*(1-delta))``."""
    _same_shape(aux, primary)
    if gamma.shape != aux.shape:
        raise ShapeError(f"gamma shape {tuple(gamma.shape)} != projection shape {tuple(aux.shape)}")
    delta = torch.as_tensor(delta, dtype=aux.dtype, device=aux.device)
    if delta.shape[-1] != aux.shape[-1]:
        raise ShapeError("delta length does not match the angle axis")
    r1, r2, r3 = _expand_r(torch.as_tensor(r, dtype=aux.dtype), aux.dim())
    central_aux = aux * delta * gamma
    central_primary = primary * delta * (1 - gamma)
    outer = primary * (1 - delta)
    return r1 * central_aux + r2 * central_primary + r3 * outer


def fusion_components(aux, primary, delta, gamma):
    """The three weighted projections that feed the channel recalibration."""
    delta = torch.as_tensor(delta, dtype=aux.dtype, device=aux.device)
    return aux * delta * gamma, primary * delta * (1 - gamma), primary * (1 - delta)


def normal_dc_fuse(aux, primary, delta):
    """Hard replacement of the acquired (central) detectors by the auxiliary prediction."""
    _same_shape(aux, primary)
    delta = torch.as_tensor(delta, dtype=aux.dtype, device=aux.device)
    if delta.shape[-1] != aux.shape[-1]:
        raise ShapeError("delta length does not match the angle axis")
    return aux * delta + primary * (1 - delta)


class AdaptiveMask(nn.Module):
    """Densely connected conv stack with a sigmoid head producing gamma in (0, 1)."""

    def __init__(self, growth: int = 8, layers: int = 3):
        super().__init__()
        self.layers = nn.ModuleList([nn.Conv3d(2 + i * growth, growth, 3, padding=1) for i in range(layers)])
        self.head = nn.Conv3d(2 + layers * growth, 1, 1)

    def forward(self, aux, primary):
        _same_shape(aux, primary)
        feats = [aux, primary]
        for conv in self.layers:
            feats.append(F.silu(conv(torch.cat(feats, dim=1))))
        return torch.sigmoid(self.head(torch.cat(feats, dim=1)))


class ChannelRecalibration(nn.Module):
    """Squeeze-excitation over the three fused components, returning ``(B, 3)`` weights."""

    def __init__(self, hidden: int = 4, init_bias: float = 3.0):
        super().__init__()
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, 3)
        # start close to pass-through (r ~ 0.95) rather than halving the signal
        nn.init.constant_(self.fc2.bias, init_bias)

    def forward(self, p1, p2, p3):
        _same_shape(p1, p2, p3)
        x = torch.cat([p1, p2, p3], dim=1)
        z = x.mean(dim=tuple(range(2, x.dim())))
        return torch.sigmoid(self.fc2(F.silu(self.fc1(z))))


class ADC(nn.Module):
    def __init__(self, growth: int = 8, hidden: int = 4):
        super().__init__()
        self.mask = AdaptiveMask(growth)
        self.recal = ChannelRecalibration(hidden)

    def forward(self, aux, primary, delta):
        gamma = self.mask(aux, primary)
        r = self.recal(*fusion_components(aux, primary, delta, gamma))
        return adc_fuse(aux, primary, delta, gamma, r), gamma, r

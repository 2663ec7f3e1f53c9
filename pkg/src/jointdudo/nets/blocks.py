"""3D (Attention) U-Net building blocks.

Activations are SiLU throughout and downsampling is average pooling; both
keep the networks smooth so finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1),
            nn.SiLU(),
            nn.Conv3d(out_ch, out_ch, 3, padding=1),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.body(x)


class AttentionGate(nn.Module):
    """Additive attention gate: ``skip * sigmoid(psi(act(W_x skip + W_g gate)))``."""

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int):
        super().__init__()
        self.w_x = nn.Conv3d(skip_ch, inter_ch, 1, bias=False)
        self.w_g = nn.Conv3d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv3d(inter_ch, 1, 1)

    def forward(self, skip, gate):
        a = torch.sigmoid(self.psi(F.silu(self.w_x(skip) + self.w_g(gate))))
        return skip * a


class AttentionUNet3d(nn.Module):
    """U-Net over 3D tensors ``(B, C, D1, D2, D3)`` with one output channel.

    Parameters
    ----------
    in_channels : int
    width : int
        Channels at the first level; doubled at every level below.
    depth : int
        Number of 2x downsamplings.  Spatial dims must be divisible by ``2**depth``.
    attention : bool
        Gate skip connections with additive attention; ``False`` gives a plain U-Net.
    """

    def __init__(self, in_channels: int, width: int = 16, depth: int = 2, attention: bool = True):
        super().__init__()
        self.depth = depth
        self.attention = attention
        chs = [width * 2**i for i in range(depth + 1)]
        self.enc = nn.ModuleList([ConvBlock(in_channels, chs[0])] + [ConvBlock(chs[i - 1], chs[i]) for i in range(1, depth)])
        self.bottleneck = ConvBlock(chs[depth - 1] if depth else in_channels, chs[depth])
        self.up = nn.ModuleList([nn.ConvTranspose3d(chs[i + 1], chs[i], 2, stride=2) for i in reversed(range(depth))])
        self.gates = nn.ModuleList(
            [AttentionGate(chs[i], chs[i], max(chs[i] // 2, 1)) if attention else nn.Identity() for i in reversed(range(depth))]
        )
        self.dec = nn.ModuleList([ConvBlock(2 * chs[i], chs[i]) for i in reversed(range(depth))])
        self.head = nn.Conv3d(chs[0], 1, 1)

    def forward(self, x):
        k = 2**self.depth
        if any(s % k for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} not divisible by {k}")
        skips = []
        for blk in self.enc:
            x = blk(x)
            skips.append(x)
            x = F.avg_pool3d(x, 2)
        x = self.bottleneck(x)
        for up, gate, dec, skip in zip(self.up, self.gates, self.dec, reversed(skips)):
            x = up(x)
            s = gate(skip, x) if self.attention else skip
            x = dec(torch.cat([x, s], dim=1))
        return self.head(x)


def angle_padding(n_angles: int, depth: int) -> int:
    k = 2**depth
    return (-n_angles) % k


def zero_head(net: AttentionUNet3d) -> None:
    nn.init.zeros_(net.head.weight)
    nn.init.zeros_(net.head.bias)


class ProjectionUNet(nn.Module):
    """Runs an :class:`AttentionUNet3d` on projections, zero-padding the angle axis.

    Input ``(B, C, U, V, A)``; the angle axis is padded at the end to a
    multiple of ``2**depth`` and the output is cropped back to ``A``.

    With ``anchor`` set, the U-Net predicts a correction to input channel
    ``anchor`` and its head starts at zero, so the untrained block passes
    that channel through.
    """

    def __init__(self, in_channels: int, width: int = 16, depth: int = 2, attention: bool = True, anchor: int | None = None):
        super().__init__()
        if anchor is not None and not 0 <= anchor < in_channels:
            raise ShapeError(f"anchor channel {anchor} outside 0..{in_channels - 1}")
        self.in_channels = in_channels
        self.anchor = anchor
        self.net = AttentionUNet3d(in_channels, width, depth, attention)
        if anchor is not None:
            zero_head(self.net)

    def forward(self, x):
        a = x.shape[-1]
        pad = angle_padding(a, self.net.depth)
        out = self.net(F.pad(x, (0, pad)) if pad else x)[..., :a]
        if self.anchor is not None:
            out = out + x[:, self.anchor : self.anchor + 1]
        return out


class ImgNet(nn.Module):
    """Four-layer residual CNN; the last layer starts at zero so the initial map is the identity."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(1, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv3d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv3d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv3d(width, 1, 3, padding=1),
        )
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return x + self.body(x)

"""Dual-domain iterative network and its baselines.

Tensor layout: projections ``(B, 1, U, V, A)``, volumes ``(B, 1, X, Y, Z)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal, Optional

import numpy as np
import torch
import torch.nn as nn

from ..errors import ConfigurationError, NumericalError, ShapeError
from ..projector import SystemOperator, project_torch
from .adc import ADC, normal_dc_fuse
from .blocks import AttentionUNet3d, ImgNet, ProjectionUNet, zero_head

Kind = Literal["joint_dudo", "joint_dudo_no_adc", "joint_dudo_no_prior", "unet_proj", "attnunet_proj", "attnunet_img"]
KINDS = ("joint_dudo", "joint_dudo_no_adc", "joint_dudo_no_prior", "unet_proj", "attnunet_proj", "attnunet_img")
JOINT_KINDS = ("joint_dudo", "joint_dudo_no_adc", "joint_dudo_no_prior")


@dataclass(frozen=True)
class ModelVariant:
    kind: Kind = "joint_dudo"
    iterations: int = 4
    width: int = 16
    depth: int = 2
    attention: bool = True
    img_width: int = 16
    adc_growth: int = 8
    se_hidden: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.kind == "unet_proj" and self.attention:
            object.__setattr__(self, "attention", False)

    @property
    def is_joint(self) -> bool:
        return self.kind in JOINT_KINDS

    @property
    def uses_prior(self) -> bool:
        return self.kind in ("joint_dudo", "joint_dudo_no_adc")

    @property
    def uses_adc(self) -> bool:
        return self.kind in ("joint_dudo", "joint_dudo_no_prior")

    @property
    def comb_channels(self) -> int:
        return 2 if self.uses_prior else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelVariant":
        return cls(**d)


@dataclass
class ForwardTrace:
    prior: Optional[torch.Tensor] = None
    aux: list[torch.Tensor] = field(default_factory=list)
    primary: list[torch.Tensor] = field(default_factory=list)
    fused: list[torch.Tensor] = field(default_factory=list)
    image: Optional[torch.Tensor] = None
    gammas: list[torch.Tensor] = field(default_factory=list)
    recalibrations: list[torch.Tensor] = field(default_factory=list)

    @property
    def output(self) -> torch.Tensor:
        """The network's FD&19A projection estimate."""
        if self.fused:
            return self.fused[-1]
        if self.primary:
            return self.primary[-1]
        if self.prior is not None:
            return self.prior
        raise ConfigurationError("empty forward trace")


def build_pcomb(x_tilde: Optional[torch.Tensor], p_ld_9a: torch.Tensor, variant: ModelVariant) -> torch.Tensor:
    """Channel 0 is the prior projection, channel 1 the LD&9A input (prior-free variants: input only)."""
    if not variant.uses_prior:
        return p_ld_9a
    if x_tilde is None:
        raise ConfigurationError(f"variant {variant.kind} needs a prior projection")
    if x_tilde.shape != p_ld_9a.shape:
        raise ShapeError(f"prior {tuple(x_tilde.shape)} and input {tuple(p_ld_9a.shape)} differ in shape")
    return torch.cat([x_tilde, p_ld_9a], dim=1)


class JointDuDo(nn.Module):
    """Image-domain prior plus N interleaved DN-Net / Joint-Net iterations.

    Handles the three joint variants: full, ``no_adc`` (hard data
    consistency instead of ADC) and ``no_prior`` (no image branch).
    """

    def __init__(self, variant: ModelVariant, op: SystemOperator, delta: np.ndarray, prior_gain: float = 1.0):
        super().__init__()
        if not variant.is_joint:
            raise ConfigurationError(f"{variant.kind} is not a joint variant")
        self.variant = variant
        self.op = op
        self.prior_gain = float(prior_gain)
        self.register_buffer("delta", torch.as_tensor(np.asarray(delta, dtype=np.float32)))
        v = variant
        c = v.comb_channels
        self.img_net = ImgNet(v.img_width) if v.uses_prior else None
        # each block refines one of its inputs: DN_1 the LD&9A channel, DN_i the previous aux,
        # J_1 the prior (or the input without prior), J_i the latest fused estimate
        self.dn_nets = nn.ModuleList(
            [ProjectionUNet(c if i == 0 else 2, v.width, v.depth, v.attention, anchor=c - 1 if i == 0 else 1) for i in range(v.iterations)]
        )
        self.joint_nets = nn.ModuleList(
            [ProjectionUNet(c + i, v.width, v.depth, v.attention, anchor=0 if i == 0 else c + i - 1) for i in range(v.iterations)]
        )
        self.adcs = nn.ModuleList([ADC(v.adc_growth, v.se_hidden) for _ in range(v.iterations)]) if v.uses_adc else None

    def forward(self, p_ld_9a: torch.Tensor, i_ld_9a: Optional[torch.Tensor] = None) -> ForwardTrace:
        trace = ForwardTrace()
        delta = self.delta.to(p_ld_9a.dtype)
        if self.img_net is not None:
            if i_ld_9a is None:
                raise ConfigurationError("the image-domain prior needs the LD&9A reconstruction")
            trace.image = self.img_net(i_ld_9a)
            trace.prior = self.prior_gain * project_torch(self.op, trace.image)
        p_comb = build_pcomb(trace.prior, p_ld_9a, self.variant)

        for i in range(self.variant.iterations):
            if i == 0:
                aux = self.dn_nets[0](p_comb)
                primary = self.joint_nets[0](p_comb)
            else:
                aux = self.dn_nets[i](torch.cat([trace.fused[-1], trace.aux[-1]], dim=1))
                primary = self.joint_nets[i](torch.cat([p_comb, *trace.fused], dim=1))
            if self.adcs is not None:
                fused, gamma, r = self.adcs[i](aux, primary, delta)
                trace.gammas.append(gamma)
                trace.recalibrations.append(r)
            else:
                fused = normal_dc_fuse(aux, primary, delta)
            trace.aux.append(aux)
            trace.primary.append(primary)
            trace.fused.append(fused)
        return trace

    def adc_parameters(self):
        return list(self.adcs.parameters()) if self.adcs is not None else []


class ProjectionBaseline(nn.Module):
    """Single (Attention) U-Net mapping the LD&9A projection to FD&19A."""

    def __init__(self, variant: ModelVariant):
        super().__init__()
        self.variant = variant
        self.net = ProjectionUNet(1, variant.width, variant.depth, variant.attention, anchor=0)

    def forward(self, p_ld_9a, i_ld_9a=None) -> ForwardTrace:
        return ForwardTrace(primary=[self.net(p_ld_9a)])

    def adc_parameters(self):
        return []


class ImageBaseline(nn.Module):
    """Attention U-Net mapping the LD&9A reconstruction to the FD&19A image."""

    def __init__(self, variant: ModelVariant, op: SystemOperator, prior_gain: float = 1.0):
        super().__init__()
        self.variant = variant
        self.op = op
        self.prior_gain = float(prior_gain)
        self.net = AttentionUNet3d(1, variant.width, variant.depth, variant.attention)
        zero_head(self.net)

    def forward(self, p_ld_9a, i_ld_9a=None) -> ForwardTrace:
        if i_ld_9a is None:
            raise ConfigurationError("attnunet_img needs the LD&9A reconstruction")
        image = i_ld_9a + self.net(i_ld_9a)
        return ForwardTrace(image=image, prior=self.prior_gain * project_torch(self.op, image))

    def adc_parameters(self):
        return []


def build_model(variant: ModelVariant, op: SystemOperator, delta: np.ndarray, prior_gain: float = 1.0) -> nn.Module:
    """``prior_gain`` converts normalised volume units to normalised projection units."""
    if variant.is_joint:
        return JointDuDo(variant, op, delta, prior_gain)
    if variant.kind in ("unet_proj", "attnunet_proj"):
        return ProjectionBaseline(variant)
    return ImageBaseline(variant, op, prior_gain)


@dataclass
class LossBreakdown:
    l_image: torch.Tensor
    l_projection: torch.Tensor
    l_total: torch.Tensor
    aux_terms: list[torch.Tensor] = field(default_factory=list)
    fused_terms: list[torch.Tensor] = field(default_factory=list)

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).detach().item() for k in ("l_image", "l_projection", "l_total")}


def _l1(a, b):
    return torch.mean(torch.abs(a - b))


def _masked_l1(a, b, delta):
    w = torch.broadcast_to(delta.to(a.dtype), a.shape)
    return torch.sum(torch.abs(a - b) * w) / torch.sum(w)


def compute_losses(
    trace: ForwardTrace,
    targets: dict[str, torch.Tensor],
    delta: torch.Tensor,
    w_image: float = 0.5,
    w_projection: float = 0.5,
) -> LossBreakdown:
    """Mean-reduced L1 losses.

    ``targets`` holds ``p_fd_19a``, ``p_fd_9a`` (zero-filled) and ``i_fd_19a``.
    The auxiliary term is averaged over the acquired detectors only.
    """
    zero = targets["p_fd_19a"].new_zeros(())
    l_image = _l1(trace.image, targets["i_fd_19a"]) if trace.image is not None else zero
    aux_terms = [_masked_l1(a, targets["p_fd_9a"], delta) for a in trace.aux]
    if trace.fused:
        fused_terms = [_l1(s, targets["p_fd_19a"]) for s in trace.fused]
    elif trace.primary:
        fused_terms = [_l1(p, targets["p_fd_19a"]) for p in trace.primary]
    else:
        fused_terms = []
    l_projection = sum(aux_terms, zero) + sum(fused_terms, zero)
    l_total = w_image * l_image + w_projection * l_projection
    for name, val in (("l_image", l_image), ("l_projection", l_projection), ("l_total", l_total)):
        if not torch.isfinite(val):
            raise NumericalError(f"loss term {name} is not finite")
    return LossBreakdown(l_image, l_projection, l_total, aux_terms, fused_terms)

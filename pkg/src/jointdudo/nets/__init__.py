from .adc import ADC, AdaptiveMask, ChannelRecalibration, adc_fuse, normal_dc_fuse
from .blocks import AttentionUNet3d, ImgNet, ProjectionUNet
from .model import (
    ForwardTrace,
    ImageBaseline,
    JointDuDo,
    LossBreakdown,
    ModelVariant,
    ProjectionBaseline,
    build_model,
    build_pcomb,
    compute_losses,
)

__all__ = [
    "ADC",
    "AdaptiveMask",
    "AttentionUNet3d",
    "ChannelRecalibration",
    "ForwardTrace",
    "ImageBaseline",
    "ImgNet",
    "JointDuDo",
    "LossBreakdown",
    "ModelVariant",
    "ProjectionBaseline",
    "ProjectionUNet",
    "adc_fuse",
    "build_model",
    "build_pcomb",
    "compute_losses",
    "normal_dc_fuse",
]

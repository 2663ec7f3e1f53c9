"""Joint denoising and few-angle reconstruction for multi-pinhole cardiac SPECT."""

__version__ = "0.1.0"

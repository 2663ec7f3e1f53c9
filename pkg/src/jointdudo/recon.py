"""MLEM reconstruction restricted to a subset of detectors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericalError, ShapeError, ValidationError
from .geometry import AngleMask
from .projector import SENSITIVITY_FLOOR, SystemOperator, back_project, forward_project, sensitivity_image, support_mask


@dataclass(frozen=True)
class MlemSettings:
    iterations: int = 30
    mask: Optional[AngleMask] = None  # None means every detector
    sensitivity_floor: float = SENSITIVITY_FLOOR

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("MLEM needs at least one iteration")


def poisson_log_likelihood(y: np.ndarray, ybar: np.ndarray, rows: np.ndarray) -> float:
    """``sum(y*log(ybar) - ybar)`` over the selected rows, dropping the ``log(y!)`` constant."""
    y = y[rows]
    ybar = ybar[rows]
    pos = y > 0
    if np.any(ybar[pos] <= 0):
        return -np.inf
    return float(np.sum(y[pos] * np.log(ybar[pos])) - np.sum(ybar))


def mlem(
    op: SystemOperator,
    y: np.ndarray,
    settings: MlemSettings = MlemSettings(),
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Multiplicative EM update ``x <- x / sens * A^T (y / A x)`` on the masked detectors.

    Starts from the uniform image ``sum(y) / sum(A 1)`` (masked sums).  Voxels
    whose sensitivity is below ``sensitivity_floor * max`` stay at zero.
    ``callback(k, x)`` is invoked after every iteration ``k = 1..iterations``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != op.projection_shape:
        raise ShapeError(f"projection shape {y.shape} != {op.projection_shape}")
    if not np.all(np.isfinite(y)) or y.min() < 0:
        raise ValidationError("MLEM input must be finite and nonnegative")
    mask = settings.mask if settings.mask is not None else AngleMask.full(op.geometry.n_detectors)
    rows = op.row_mask(mask) > 0

    sens = sensitivity_image(op, mask, fov_only_warning=False)
    support = support_mask(sens, settings.sensitivity_floor)
    if not support.any():
        raise ConfigurationError("sensitivity is zero everywhere for this mask")
    inv_sens = np.where(support, 1.0 / np.where(support, sens, 1.0), 0.0)

    ymask = np.where(rows, y, 0.0)
    fp_ones = forward_project(op, support.astype(np.float64))
    denom = fp_ones[rows].sum()
    x = np.where(support, ymask.sum() / denom, 0.0)

    for k in range(1, settings.iterations + 1):
        ybar = forward_project(op, x)
        ratio = np.divide(ymask, ybar, out=np.zeros_like(ybar), where=rows & (ybar > 0))
        x = x * back_project(op, ratio) * inv_sens
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"MLEM produced non-finite values at iteration {k}")
        if callback is not None:
            callback(k, x)
    return x

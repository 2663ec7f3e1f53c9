"""Image-quality metrics, the paired t-test and per-method metric reports.

NMSE and NMAE are stored as fractions; tables print them in percent.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, special

from .errors import DegenerateInputError, ShapeError, ValidationError

PSNR_CAP_DB = 200.0
SSIM_SIGMA = 1.5
SSIM_WIDTH = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValidationError("reference is identically zero")
    return pred, ref


def nmse(pred, ref) -> float:
    pred, ref = _check(pred, ref)
    return float(np.sum((pred - ref) ** 2) / np.sum(ref**2))


def nmae(pred, ref) -> float:
    pred, ref = _check(pred, ref)
    return float(np.sum(np.abs(pred - ref)) / np.sum(np.abs(ref)))


def psnr(pred, ref) -> float:
    pred, ref = _check(pred, ref)
    rmse = math.sqrt(float(np.mean((pred - ref) ** 2)))
    peak = float(ref.max())
    if rmse == 0.0:
        return PSNR_CAP_DB
    if peak <= 0:
        raise ValidationError("psnr needs a positive reference maximum")
    return min(20.0 * math.log10(peak / rmse), PSNR_CAP_DB)


def _gaussian_window():
    r = SSIM_WIDTH // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _local_mean(a: np.ndarray, norm: np.ndarray) -> np.ndarray:
    w = _gaussian_window()
    out = a
    for ax in range(a.ndim):
        out = ndimage.correlate1d(out, w, axis=ax, mode="constant", cval=0.0)
    return out / norm


def _ssim_map(x: np.ndarray, y: np.ndarray, data_range: float) -> np.ndarray:
    # window truncated at the borders and renormalised over the in-bounds part
    norm = np.ones_like(x)
    w = _gaussian_window()
    for ax in range(x.ndim):
        norm = ndimage.correlate1d(norm, w, axis=ax, mode="constant", cval=0.0)
    mx, my = _local_mean(x, norm), _local_mean(y, norm)
    sxx = _local_mean(x * x, norm) - mx * mx
    syy = _local_mean(y * y, norm) - my * my
    sxy = _local_mean(x * y, norm) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, ref, data_range: Optional[float] = None, per_slice_axis: Optional[int] = None) -> float:
    """Mean local SSIM with an 11-wide, sigma 1.5 Gaussian window.

    ``data_range`` defaults to ``max(ref) - min(ref)``.  With
    ``per_slice_axis`` set, SSIM is computed in 2D on every slice along that
    axis and averaged (projections use the detector axis, ``-1``).
    """
    pred, ref = _check(pred, ref)
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if data_range <= 0:
        raise ValidationError("ssim needs a positive data range")
    if per_slice_axis is None:
        return float(np.mean(_ssim_map(pred, ref, data_range)))
    px = np.moveaxis(pred, per_slice_axis, 0)
    rx = np.moveaxis(ref, per_slice_axis, 0)
    return float(np.mean([np.mean(_ssim_map(a, b, data_range)) for a, b in zip(px, rx)]))


def projection_metrics(pred, ref) -> dict[str, float]:
    return {"nmse": nmse(pred, ref), "nmae": nmae(pred, ref), "ssim": ssim(pred, ref, per_slice_axis=-1), "psnr": psnr(pred, ref)}


def volume_metrics(pred, ref) -> dict[str, float]:
    return {"nmse": nmse(pred, ref), "nmae": nmae(pred, ref), "ssim": ssim(pred, ref), "psnr": psnr(pred, ref)}


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired Student t-test on ``a - b``; returns ``(t, p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise DegenerateInputError("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("differences have zero variance")
    t = float(np.mean(d) / (sd / math.sqrt(n)))
    dof = n - 1
    # two-sided tail of Student's t via the regularised incomplete beta
    p = float(special.betainc(0.5 * dof, 0.5, dof / (dof + t * t)))
    return t, p


METRIC_NAMES = ("nmse", "nmae", "ssim", "psnr")


@dataclass
class MetricReport:
    method: str
    case_ids: list[str]
    values: dict[str, list[float]]
    p_value: Optional[float] = None
    reference_method: Optional[str] = None

    def __post_init__(self):
        lengths = {len(self.case_ids)} | {len(v) for v in self.values.values()}
        if len(lengths) != 1:
            raise ShapeError("per-case metric lists must all have the same length")

    @classmethod
    def from_rows(cls, method: str, rows: list[tuple[str, dict[str, float]]]) -> "MetricReport":
        return cls(method, [cid for cid, _ in rows], {m: [r[m] for _, r in rows] for m in METRIC_NAMES})

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def std(self, metric: str) -> float:
        return float(np.std(self.values[metric]))

    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: (self.mean(m), self.std(m)) for m in self.values}

    def compare_to(self, reference: "MetricReport", metric: str = "nmse") -> float:
        """Store and return the paired t-test p-value against ``reference``."""
        if reference.case_ids != self.case_ids:
            raise ShapeError("reports cover different cases")
        _, p = paired_t_test(self.values[metric], reference.values[metric])
        self.p_value = p
        self.reference_method = reference.method
        return p

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", *METRIC_NAMES])
        for i, cid in enumerate(self.case_ids):
            w.writerow([cid, *(f"{self.values[m][i]:.10g}" for m in METRIC_NAMES)])
        w.writerow(["mean±std", *(f"{self.mean(m):.10g}±{self.std(m):.10g}" for m in METRIC_NAMES)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "case_ids": self.case_ids,
            "values": self.values,
            "summary": {m: {"mean": mu, "std": sd} for m, (mu, sd) in self.summary().items()},
            "p_value": self.p_value,
            "reference_method": self.reference_method,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["method"], list(d["case_ids"]), {k: list(v) for k, v in d["values"].items()}, d.get("p_value"), d.get("reference_method"))

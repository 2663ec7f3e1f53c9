"""Synthetic cardiac phantoms, Poisson emission and binomial count thinning."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ValidationError
from .geometry import GridSpec

Family = Literal["cardiac_ellipsoid", "hot_spheres", "uniform_cylinder"]


@dataclass(frozen=True)
class Defect:
    position_mm: tuple[float, float, float]
    radius_mm: float
    severity: float


@dataclass(frozen=True)
class PhantomSpec:
    family: Family = "cardiac_ellipsoid"
    myocardium_to_background_ratio: float = 5.0
    defect: Optional[Defect] = None
    rng_seed: int = 0
    wall_thickness_mm: float = 9.0

    def __post_init__(self):
        if self.family not in ("cardiac_ellipsoid", "hot_spheres", "uniform_cylinder"):
            raise ValidationError(f"unknown phantom family {self.family!r}")
        if self.family == "cardiac_ellipsoid" and not self.myocardium_to_background_ratio > 1:
            raise ValidationError("myocardium_to_background_ratio must be > 1")
        if self.defect is not None and not 0.0 <= self.defect.severity <= 1.0:
            raise ValidationError("defect severity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if d.get("defect") is not None:
            df = d["defect"]
            d["defect"] = Defect(tuple(df["position_mm"]), float(df["radius_mm"]), float(df["severity"]))
        return cls(**d)


def _ellipsoid(coords, center, semi_axes, rot=None):
    rel = coords - center
    if rot is not None:
        rel = rel @ rot.as_matrix()  # world -> body frame
    return np.sum((rel / semi_axes) ** 2, axis=-1)


def generate_phantom(spec: PhantomSpec, grid: GridSpec) -> np.ndarray:
    """Voxelised activity volume (float64, nonnegative), sampled at voxel centres.

    Sizes scale with the grid's field-of-view radius so the same phantom
    family works at 8^3 and 32^3.  All randomness (pose jitter, sphere
    placement) comes from ``spec.rng_seed``.
    """
    rng = np.random.default_rng(spec.rng_seed)
    xyz = grid.voxel_centers()
    c0 = grid.center_mm
    fov = grid.fov_radius_mm
    vol = np.zeros(grid.shape)

    # elliptical body cylinder along z
    body = ((xyz[..., 0] - c0[0]) / (0.85 * fov)) ** 2 + ((xyz[..., 1] - c0[1]) / (0.7 * fov)) ** 2 <= 1.0
    body &= np.abs(xyz[..., 2] - c0[2]) <= 0.9 * fov

    if spec.family == "uniform_cylinder":
        vol[body] = 1.0
    elif spec.family == "hot_spheres":
        vol[body] = 1.0
        for _ in range(3):
            r = fov * rng.uniform(0.12, 0.22)
            ang = rng.uniform(0, 2 * np.pi)
            rho = rng.uniform(0, 0.45 * fov)
            ctr = c0 + np.array([rho * np.cos(ang), 0.8 * rho * np.sin(ang), rng.uniform(-0.4, 0.4) * fov])
            vol[np.linalg.norm(xyz - ctr, axis=-1) <= r] = spec.myocardium_to_background_ratio
    else:
        vol[body] = 1.0
        jitter = rng.normal(0.0, 0.06 * fov, size=3)
        center = c0 + jitter
        angles = np.array([0.0, 0.0, 45.0]) + rng.normal(0.0, 10.0, size=3)
        rot = Rotation.from_euler("xyz", angles, degrees=True)
        outer = fov * np.array([0.38, 0.38, 0.62]) * rng.uniform(0.9, 1.1, size=3)
        t = min(spec.wall_thickness_mm, 0.45 * outer.min())
        inner = np.maximum(outer - t, 1e-3)
        q_out = _ellipsoid(xyz, center, outer, rot)
        q_in = _ellipsoid(xyz, center, inner, rot)
        # long axis along body-frame z; cut the base to open the ventricle
        body_z = ((xyz - center) @ rot.as_matrix())[..., 2]
        shell = (q_out <= 1.0) & (q_in > 1.0) & (body_z <= 0.35 * outer[2])
        cavity = (q_in <= 1.0) & (body_z <= 0.35 * outer[2])
        vol[cavity] = 0.6
        vol[shell] = spec.myocardium_to_background_ratio

    if spec.defect is not None:
        d = spec.defect
        pos = np.asarray(d.position_mm, dtype=float)
        lo = np.asarray(grid.origin_mm)
        hi = lo + grid.voxel_size_mm * (np.asarray(grid.shape) - 1)
        if np.any(pos < lo) or np.any(pos > hi) or d.radius_mm <= 0:
            raise ValidationError(f"defect at {tuple(pos)} lies outside the grid")
        region = np.linalg.norm(xyz - pos, axis=-1) <= d.radius_mm
        vol[region] *= 1.0 - d.severity
    return vol


def defect_region(spec: PhantomSpec, grid: GridSpec) -> np.ndarray:
    if spec.defect is None:
        return np.zeros(grid.shape, dtype=bool)
    return np.linalg.norm(grid.voxel_centers() - np.asarray(spec.defect.position_mm), axis=-1) <= spec.defect.radius_mm


def random_cardiac_spec(rng: np.random.Generator, grid: GridSpec, seed: int) -> PhantomSpec:
    """Draw a cardiac phantom spec with a random uptake ratio and, half the time, a defect."""
    ratio = float(rng.uniform(3.0, 7.0))
    defect = None
    if rng.uniform() < 0.5:
        fov = grid.fov_radius_mm
        ang = rng.uniform(0, 2 * np.pi)
        pos = grid.center_mm + 0.3 * fov * np.array([np.cos(ang), np.sin(ang), rng.uniform(-0.8, 0.5)])
        defect = Defect(tuple(float(v) for v in pos), float(fov * rng.uniform(0.12, 0.22)), float(rng.uniform(0.4, 1.0)))
    return PhantomSpec("cardiac_ellipsoid", ratio, defect, seed)


def poisson_emit(p_clean: np.ndarray, total_counts: int, rng_seed: int) -> np.ndarray:
    """Scale ``p_clean`` to an expected total of ``total_counts`` and draw Poisson counts."""
    p = np.asarray(p_clean, dtype=np.float64)
    if not np.all(np.isfinite(p)) or p.min() < 0:
        raise ValidationError("clean projection must be finite and nonnegative")
    s = p.sum()
    if s <= 0:
        raise ValidationError("clean projection is identically zero")
    if total_counts <= 0:
        raise ValidationError("total_counts must be positive")
    rng = np.random.default_rng(rng_seed)
    return rng.poisson(p * (total_counts / s)).astype(np.float64)


def thin_counts(p_counts: np.ndarray, dose_ratio: float, rng_seed: int) -> np.ndarray:
    """Keep each recorded event independently with probability ``dose_ratio``.

    Per-bin Binomial(count, dose_ratio) sampling is distributionally the same
    as decimating the underlying event list.
    """
    c = np.asarray(p_counts, dtype=np.float64)
    if not 0.0 < dose_ratio <= 1.0:
        raise ValidationError(f"dose_ratio must lie in (0, 1], got {dose_ratio}")
    if not np.all(np.isfinite(c)) or c.min() < 0 or np.any(c != np.round(c)):
        raise ValidationError("thinning needs nonnegative integer counts")
    if dose_ratio == 1.0:
        return c.copy()
    rng = np.random.default_rng(rng_seed)
    return rng.binomial(c.astype(np.int64), dose_ratio).astype(np.float64)

"""Multi-pinhole scanner layout, image grid and the few-angle detector mask.

The default scanner has 19 pinhole detectors on a cylinder around the z axis,
arranged in three columns.  Detector indices are a fixed convention:

* 0-4   bottom column (below the transaxial plane, tilted up)
* 5-13  central column (in the transaxial plane)
* 14-18 top column (above the transaxial plane, tilted down)

Projection arrays are laid out as ``(bins_u, bins_v, n_detectors)``; volume
arrays as ``(nx, ny, nz)`` with voxel ``(i, j, k)`` centred at
``origin_mm + voxel_size_mm * (i, j, k)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

ColumnTag = Literal["bottom", "central", "top"]

MIN_DIMENSION = 8
BOTTOM = tuple(range(0, 5))
CENTRAL = tuple(range(5, 14))
TOP = tuple(range(14, 19))

# Layout constants of the default build (artifact conventions, all in mm/deg).
_CENTRAL_AZIMUTHS_DEG = np.linspace(-90.0, 90.0, 9)
_OUTER_AZIMUTHS_DEG = np.linspace(-80.0, 80.0, 5)
_OUTER_TILT_DEG = 25.0
_RADIUS_PER_FOV = 2.5
_FOCAL_PER_RADIUS = 0.5


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    nz: int
    voxel_size_mm: float
    origin_mm: tuple[float, float, float]

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ConfigurationError(f"grid counts must be >= 1, got {self.shape}")
        if not self.voxel_size_mm > 0:
            raise ConfigurationError(f"voxel_size_mm must be > 0, got {self.voxel_size_mm}")

    @classmethod
    def centered(cls, shape: Sequence[int], voxel_size_mm: float) -> "GridSpec":
        origin = tuple(-0.5 * (n - 1) * voxel_size_mm for n in shape)
        return cls(int(shape[0]), int(shape[1]), int(shape[2]), float(voxel_size_mm), origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def center_mm(self) -> np.ndarray:
        return np.asarray(self.origin_mm) + 0.5 * self.voxel_size_mm * (np.asarray(self.shape) - 1)

    @property
    def fov_radius_mm(self) -> float:
        """Radius of the sphere inscribed in the voxel bounding box."""
        return 0.5 * self.voxel_size_mm * min(self.shape)

    def voxel_centers(self) -> np.ndarray:
        """Voxel centre coordinates, shape ``(nx, ny, nz, 3)``."""
        axes = [o + self.voxel_size_mm * np.arange(n) for o, n in zip(self.origin_mm, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "nz": self.nz,
            "voxel_size_mm": self.voxel_size_mm,
            "origin_mm": list(self.origin_mm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["nx"]), int(d["ny"]), int(d["nz"]), float(d["voxel_size_mm"]), tuple(map(float, d["origin_mm"])))


@dataclass(frozen=True)
class DetectorPose:
    pinhole_position: tuple[float, float, float]
    aim_direction: tuple[float, float, float]
    bins_u: int
    bins_v: int
    pixel_pitch_mm: float
    column_tag: ColumnTag
    focal_length_mm: float

    def __post_init__(self):
        if self.bins_u < 1 or self.bins_v < 1:
            raise ConfigurationError("detector bin counts must be >= 1")
        norm = math.sqrt(sum(c * c for c in self.aim_direction))
        if abs(norm - 1.0) > 1e-9:
            raise ConfigurationError(f"aim_direction must be a unit vector (norm {norm})")
        if self.column_tag not in ("bottom", "central", "top"):
            raise ConfigurationError(f"unknown column tag {self.column_tag!r}")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Aim direction and the in-plane detector axes ``(a, e_u, e_v)``."""
        a = np.asarray(self.aim_direction, dtype=np.float64)
        e_u = np.cross([0.0, 0.0, 1.0], a)
        n = np.linalg.norm(e_u)
        if n < 1e-12:
            e_u = np.array([1.0, 0.0, 0.0])
        else:
            e_u = e_u / n
        e_v = np.cross(a, e_u)
        return a, e_u, e_v

    def to_dict(self) -> dict:
        return {
            "pinhole_position": list(self.pinhole_position),
            "aim_direction": list(self.aim_direction),
            "bins_u": self.bins_u,
            "bins_v": self.bins_v,
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "focal_length_mm": self.focal_length_mm,
            "column_tag": self.column_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorPose":
        return cls(
            tuple(map(float, d["pinhole_position"])),
            tuple(map(float, d["aim_direction"])),
            int(d["bins_u"]),
            int(d["bins_v"]),
            float(d["pixel_pitch_mm"]),
            d["column_tag"],
            float(d["focal_length_mm"]),
        )


@dataclass(frozen=True)
class ScannerGeometry:
    detectors: tuple[DetectorPose, ...]
    radius_mm: float
    image_grid: GridSpec

    def __post_init__(self):
        if not self.detectors:
            raise ConfigurationError("geometry needs at least one detector")
        shapes = {(d.bins_u, d.bins_v) for d in self.detectors}
        if len(shapes) != 1:
            raise ConfigurationError("all detectors must share one bin layout")
        for i, d in enumerate(self.detectors):
            r = math.hypot(d.pinhole_position[0], d.pinhole_position[1])
            if abs(r - self.radius_mm) > 1e-9 * self.radius_mm:
                raise ConfigurationError(f"detector {i} is off the cylinder (r={r})")

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    @property
    def bins(self) -> tuple[int, int]:
        d = self.detectors[0]
        return (d.bins_u, d.bins_v)

    @property
    def projection_shape(self) -> tuple[int, int, int]:
        return (*self.bins, self.n_detectors)

    @property
    def column_tags(self) -> tuple[str, ...]:
        return tuple(d.column_tag for d in self.detectors)

    def to_dict(self) -> dict:
        return {
            "radius_mm": self.radius_mm,
            "image_grid": self.image_grid.to_dict(),
            "detectors": [d.to_dict() for d in self.detectors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScannerGeometry":
        return cls(
            tuple(DetectorPose.from_dict(x) for x in d["detectors"]),
            float(d["radius_mm"]),
            GridSpec.from_dict(d["image_grid"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScannerGeometry":
        return cls.from_dict(json.loads(text))

    @property
    def geometry_id(self) -> str:
        """Content hash; identical geometries share an id."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AngleMask:
    """Binary per-detector mask; ``True`` marks an acquired detector."""

    flags: tuple[bool, ...] = field()

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def count(self) -> int:
        return sum(self.flags)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.flags) if f)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.flags, dtype=bool)

    def complement(self) -> "AngleMask":
        return AngleMask(tuple(not f for f in self.flags))

    @classmethod
    def full(cls, n: int) -> "AngleMask":
        return cls((True,) * n)


def _pose(azimuth_deg: float, z_mm: float, radius: float, focal: float, bins, pitch, tag) -> DetectorPose:
    phi = math.radians(azimuth_deg)
    p = np.array([radius * math.cos(phi), radius * math.sin(phi), z_mm])
    a = -p / np.linalg.norm(p)
    return DetectorPose(tuple(p.tolist()), tuple(a.tolist()), int(bins[0]), int(bins[1]), float(pitch), tag, float(focal))


def build_default_geometry(
    image_size: Sequence[int] = (32, 32, 32),
    detector_bins: Sequence[int] = (32, 32),
    voxel_size_mm: float = 4.0,
) -> ScannerGeometry:
    """Build the deterministic 19-detector, three-column geometry.

    Every pinhole aims at the grid centre.  The cylinder radius and pixel
    pitch scale with the grid such that each detector's field of view
    covers the sphere inscribed in the image grid.
    """
    if len(image_size) != 3 or len(detector_bins) != 2:
        raise ConfigurationError("image_size is a triple and detector_bins a pair")
    if min(image_size) < MIN_DIMENSION or min(detector_bins) < MIN_DIMENSION:
        raise ConfigurationError(
            f"all dimensions must be >= {MIN_DIMENSION}, got {tuple(image_size)}, {tuple(detector_bins)}"
        )
    grid = GridSpec.centered(image_size, voxel_size_mm)
    fov = grid.fov_radius_mm
    radius = _RADIUS_PER_FOV * fov
    focal = _FOCAL_PER_RADIUS * radius
    # cone tangent to the FOV sphere for the closest (central) pinholes
    half_angle = math.asin(fov / radius)
    pitch = 2.0 * focal * math.tan(half_angle) / min(detector_bins)
    z_outer = radius * math.tan(math.radians(_OUTER_TILT_DEG))

    dets = []
    for az in _OUTER_AZIMUTHS_DEG:
        dets.append(_pose(az, -z_outer, radius, focal, detector_bins, pitch, "bottom"))
    for az in _CENTRAL_AZIMUTHS_DEG:
        dets.append(_pose(az, 0.0, radius, focal, detector_bins, pitch, "central"))
    for az in _OUTER_AZIMUTHS_DEG:
        dets.append(_pose(az, z_outer, radius, focal, detector_bins, pitch, "top"))
    return ScannerGeometry(tuple(dets), radius, grid)


def central_column_mask(geometry: ScannerGeometry) -> AngleMask:
    return AngleMask(tuple(tag == "central" for tag in geometry.column_tags))


def apply_angle_mask(p: np.ndarray, mask: AngleMask, mode: str = "zero_fill") -> np.ndarray:
    """Restrict a projection to the detectors flagged in ``mask``.

    ``zero_fill`` keeps the shape and zeroes unflagged detectors (the
    network-facing layout); ``drop`` removes them (the recon-facing layout).
    Works on any array whose last axis is the detector axis.
    """
    if p.shape[-1] != len(mask):
        raise ShapeError(f"mask length {len(mask)} != projection angle count {p.shape[-1]}")
    flags = mask.as_array()
    if mode == "zero_fill":
        return np.where(flags, p, np.zeros((), dtype=p.dtype))
    if mode == "drop":
        return p[..., flags]
    raise ConfigurationError(f"unknown mask mode {mode!r}")

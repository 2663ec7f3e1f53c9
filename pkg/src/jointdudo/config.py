"""Experiment configuration and named presets."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError
from .geometry import ScannerGeometry, build_default_geometry
from .nets.model import ModelVariant

OUTPUT_ROOT_ENV = "JOINTDUDO_OUTPUT_ROOT"

PRESETS = {
    # CI-speed defaults
    "desk": {"splits": (40, 8, 16), "epochs_joint": 10, "epochs_baseline": 40},
    # split sizes and epoch budgets of the clinical study
    "full": {"splits": (200, 74, 200), "epochs_joint": 50, "epochs_baseline": 200},
}


@dataclass(frozen=True)
class ExperimentConfig:
    image_size: tuple[int, int, int] = (32, 32, 32)
    detector_bins: tuple[int, int] = (32, 32)
    voxel_size_mm: float = 4.0
    rays_per_bin: int = 1
    phantom_family: str = "cardiac_ellipsoid"
    splits: tuple[int, int, int] = (40, 8, 16)
    dose_ratio: float = 0.1
    total_counts: int = 2_000_000
    mlem_iterations: int = 30
    variant: ModelVariant = field(default_factory=ModelVariant)
    preset: str = "desk"
    epochs: Optional[int] = None
    batch_size: int = 2
    lr_main: float = 1e-3
    lr_adc: float = 1e-4
    decay_per_epoch: float = 0.99
    w_image: float = 0.5
    w_projection: float = 0.5
    master_seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if not (self.lr_main > 0 and self.lr_adc > 0):
            raise ConfigurationError("learning rates must be positive")
        if not 0 < self.decay_per_epoch <= 1:
            raise ConfigurationError("decay_per_epoch must lie in (0, 1]")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0 < self.dose_ratio <= 1:
            raise ConfigurationError("dose_ratio must lie in (0, 1]")
        if len(self.splits) != 3 or min(self.splits) < 1:
            raise ConfigurationError("splits must be three positive sizes (train, val, test)")
        if self.batch_size < 1 or self.total_counts < 1 or self.mlem_iterations < 1:
            raise ConfigurationError("batch_size, total_counts and mlem_iterations must be positive")

    @property
    def effective_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        p = PRESETS[self.preset]
        return p["epochs_joint"] if self.variant.is_joint else p["epochs_baseline"]

    def geometry(self) -> ScannerGeometry:
        return build_default_geometry(self.image_size, self.detector_bins, self.voxel_size_mm)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def with_variant(self, **changes) -> "ExperimentConfig":
        return replace(self, variant=replace(self.variant, **changes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if "variant" in d and isinstance(d["variant"], dict):
            d["variant"] = ModelVariant.from_dict(d["variant"])
        for key in ("image_size", "detector_bins", "splits"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}")
        return cls(splits=PRESETS[name]["splits"], preset=name, **overrides)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json())

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


def resolve_output(path: str | os.PathLike) -> Path:
    """Relative paths are placed under ``$JOINTDUDO_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p

"""Dataset assembly: phantom -> projection -> counts -> LD/few-angle inputs + MLEM images.

On-disk layout of a dataset directory::

    manifest.json     splits, per-case files/checksums/offsets, normalisation
    geometry.json     the scanner geometry
    cases/<id>.nta    named-tensor archive per case (see :mod:`jointdudo.archive`)

Tensors are stored in count units.  :func:`normalized_case` produces the
network-facing representation: full-dose projections are divided by the
dataset constant ``projection_scale`` (mean FD count per bin) and full-dose
volumes by ``volume_scale`` (mean FD MLEM voxel value); low-dose tensors are
additionally divided by ``dose_ratio``.  A normalised volume ``v`` therefore
projects to normalised counts ``prior_gain * F(v)``, with
``prior_gain = volume_scale / projection_scale``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .config import ExperimentConfig
from .errors import ConfigurationError, ValidationError
from .geometry import AngleMask, ScannerGeometry, apply_angle_mask, central_column_mask
from .phantoms import PhantomSpec, generate_phantom, poisson_emit, random_cardiac_spec, thin_counts
from .projector import SystemOperator, cached_operator, forward_project
from .recon import MlemSettings, mlem

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CASE_TENSORS = ("p_fd_19a", "p_fd_9a", "p_ld_9a", "i_fd_19a", "i_ld_9a", "activity")
FORMAT = "jointdudo-dataset/1"


def case_seed(master_seed: int, case_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{case_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _sub_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class DatasetCase:
    case_id: str
    p_fd_19a: np.ndarray
    p_fd_9a: np.ndarray
    p_ld_9a: np.ndarray
    i_fd_19a: np.ndarray
    i_ld_9a: np.ndarray
    dose_ratio: float
    activity: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {k: getattr(self, k) for k in CASE_TENSORS if getattr(self, k) is not None}
        return out


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, list[str]]
    cases: dict[str, dict]
    geometry_id: str
    normalization: dict[str, float]
    master_seed: int
    dose_ratio: float
    config: dict = field(default_factory=dict)

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    def split_sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.splits[s]) for s in SPLITS)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "splits": self.splits,
            "cases": [self.cases[c] for s in SPLITS for c in self.splits[s]],
            "geometry_id": self.geometry_id,
            "geometry_file": "geometry.json",
            "normalization": self.normalization,
            "master_seed": self.master_seed,
            "dose_ratio": self.dose_ratio,
            "config": self.config,
        }

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise ValidationError(f"no dataset manifest in {root}")
        d = json.loads(path.read_text())
        if d.get("format") != FORMAT:
            raise ValidationError(f"unsupported dataset format {d.get('format')!r}")
        return cls(
            root,
            {k: list(v) for k, v in d["splits"].items()},
            {c["case_id"]: c for c in d["cases"]},
            d["geometry_id"],
            d["normalization"],
            d["master_seed"],
            d["dose_ratio"],
            d.get("config", {}),
        )

    def geometry(self) -> ScannerGeometry:
        g = ScannerGeometry.from_json((self.root / "geometry.json").read_text())
        if g.geometry_id != self.geometry_id:
            raise ValidationError("geometry.json does not match the manifest's geometry id")
        return g

    def verify(self) -> None:
        """Check every case file exists and matches its checksum."""
        for cid, rec in self.cases.items():
            path = self.root / rec["file"]
            if not path.exists():
                raise ValidationError(f"case file missing: {path}")
            if archive.file_sha256(path) != rec["sha256"]:
                raise ValidationError(f"checksum mismatch for case {cid}")

    def load_case(self, case_id: str) -> DatasetCase:
        rec = self.cases[case_id]
        t = archive.load(self.root / rec["file"], rec["sha256"])
        return DatasetCase(case_id, dose_ratio=rec["dose_ratio"], **t)

    def split_ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise ValidationError(f"unknown split {split!r}")
        return self.splits[split]


def simulate_case(
    case_id: str,
    seed: int,
    geometry: ScannerGeometry,
    op: SystemOperator,
    config: ExperimentConfig,
    dose_ratio: float,
) -> tuple[DatasetCase, PhantomSpec]:
    """Run the full per-case chain for one phantom."""
    grid = geometry.image_grid
    rng = np.random.default_rng(_sub_seed(seed, 0))
    if config.phantom_family == "cardiac_ellipsoid":
        spec = random_cardiac_spec(rng, grid, _sub_seed(seed, 1))
    else:
        spec = PhantomSpec(config.phantom_family, float(rng.uniform(3.0, 7.0)), None, _sub_seed(seed, 1))
    activity = generate_phantom(spec, grid)
    clean = forward_project(op, activity)
    fd19 = poisson_emit(clean, config.total_counts, _sub_seed(seed, 2))
    delta = central_column_mask(geometry)
    full = AngleMask.full(geometry.n_detectors)
    fd9 = apply_angle_mask(fd19, delta, "zero_fill")
    ld9 = apply_angle_mask(thin_counts(fd19, dose_ratio, _sub_seed(seed, 3)), delta, "zero_fill")
    n_it = config.mlem_iterations
    i_fd = mlem(op, fd19, MlemSettings(n_it, full))
    i_ld = mlem(op, ld9, MlemSettings(n_it, delta))
    case = DatasetCase(case_id, fd19, fd9, ld9, i_fd, i_ld, dose_ratio, activity)
    return case, spec


def build_dataset(config: ExperimentConfig, out_dir: str | os.PathLike, dose_ratio: float | None = None) -> DatasetManifest:
    """Simulate every split and write the dataset directory atomically.

    Output is assembled in a sibling temporary directory and moved into
    place only once complete; on failure the partial output is removed.
    """
    dose = config.dose_ratio if dose_ratio is None else dose_ratio
    if not 0 < dose <= 1:
        raise ValidationError(f"dose_ratio must lie in (0, 1], got {dose}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigurationError(f"output directory {out_dir} is not empty")
    geometry = config.geometry()
    op = cached_operator(geometry, config.rays_per_bin)

    ids = {s: [f"{s}-{i:04d}" for i in range(n)] for s, n in zip(SPLITS, config.splits)}
    seeds = {cid: case_seed(config.master_seed, cid) for s in SPLITS for cid in ids[s]}
    if len(set(seeds.values())) != len(seeds):
        raise ValidationError("case seed collision across splits")

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.partial-", dir=out_dir.parent))
    try:
        (tmp / "cases").mkdir()
        (tmp / "geometry.json").write_text(geometry.to_json())
        records, fd_totals, fd_means = {}, [], []
        for split in SPLITS:
            for cid in ids[split]:
                case, spec = simulate_case(cid, seeds[cid], geometry, op, config, dose)
                meta = archive.save(tmp / "cases" / f"{cid}.nta", case.tensors())
                fd_totals.append(float(case.p_fd_19a.sum()))
                fd_means.append(float(case.i_fd_19a.mean()))
                records[cid] = {
                    "case_id": cid,
                    "split": split,
                    "file": f"cases/{cid}.nta",
                    "sha256": meta["sha256"],
                    "tensors": meta["tensors"],
                    "seed": seeds[cid],
                    "dose_ratio": dose,
                    "phantom": spec.to_dict(),
                    "fd_sha256": hashlib.sha256(np.asarray(case.p_fd_19a, "<f4").tobytes()).hexdigest(),
                    "totals": {k: float(getattr(case, k).sum()) for k in ("p_fd_19a", "p_fd_9a", "p_ld_9a")},
                }
                log.info("simulated %s", cid)
        n_bins = int(np.prod(geometry.projection_shape))
        mean_total = float(np.mean(fd_totals))
        manifest = DatasetManifest(
            out_dir,
            ids,
            records,
            geometry.geometry_id,
            {
                "mean_fd_total_counts": mean_total,
                "projection_scale": mean_total / n_bins,
                "volume_scale": float(np.mean(fd_means)),
            },
            config.master_seed,
            dose,
            config.to_dict(),
        )
        (tmp / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
        if out_dir.exists():
            out_dir.rmdir()
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def normalized_case(manifest: DatasetManifest, case: DatasetCase) -> dict[str, np.ndarray]:
    """Network-facing float32 tensors (see module docstring for the scaling)."""
    s = manifest.normalization["projection_scale"]
    v = manifest.normalization["volume_scale"]
    a = case.dose_ratio
    return {
        "p_fd_19a": (case.p_fd_19a / s).astype(np.float32),
        "p_fd_9a": (case.p_fd_9a / s).astype(np.float32),
        "p_ld_9a": (case.p_ld_9a / (s * a)).astype(np.float32),
        "i_fd_19a": (case.i_fd_19a / v).astype(np.float32),
        "i_ld_9a": (case.i_ld_9a / (v * a)).astype(np.float32),
    }


def prior_gain(manifest: DatasetManifest) -> float:
    n = manifest.normalization
    return n["volume_scale"] / n["projection_scale"]


def load_split(manifest: DatasetManifest, split: str) -> tuple[list[str], dict[str, np.ndarray]]:
    """Stack the normalised tensors of a split along a leading case axis."""
    ids = manifest.split_ids(split)
    if not ids:
        raise ValidationError(f"split {split!r} is empty")
    rows = [normalized_case(manifest, manifest.load_case(c)) for c in ids]
    return ids, {k: np.stack([r[k] for r in rows]) for k in rows[0]}

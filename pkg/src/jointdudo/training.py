"""Training, checkpointing and evaluation of one experiment run.

A run directory holds::

    config.json          the ExperimentConfig
    checkpoint.nta       best-validation parameters (named-tensor archive)
    checkpoint.json      descriptor: variant, seeds, geometry id, best epoch
    training_log.json    per-epoch losses, validation NMSE and learning rates
    timing.json          wall-clock times (kept apart so the log is reproducible)
    eval_<split>/        metric reports written by :func:`evaluate_run`
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import archive
from .config import ExperimentConfig
from .dataset import DatasetManifest, load_split, prior_gain
from .errors import ConfigurationError, NumericalError, ValidationError
from .geometry import AngleMask, central_column_mask
from .metrics import MetricReport, nmse, projection_metrics, volume_metrics
from .nets.model import build_model, compute_losses
from .projector import cached_operator
from .recon import MlemSettings, mlem

log = logging.getLogger(__name__)


def _seed(master: int, tag: str) -> int:
    return int(np.random.SeedSequence([master, int.from_bytes(tag.encode(), "little") % 2**32]).generate_state(1)[0])


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingLog":
        return cls(list(d["epochs"]), d["best_epoch"])

    def val_nmse(self) -> list[float]:
        return [e["val_nmse"] for e in self.epochs]


def _to_torch(arrays: dict[str, np.ndarray], idx) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.ascontiguousarray(v[idx][:, None])) for k, v in arrays.items()}


def _model_for(config: ExperimentConfig, manifest: DatasetManifest) -> torch.nn.Module:
    geometry = manifest.geometry()
    if geometry != config.geometry():
        raise ConfigurationError("dataset geometry does not match the experiment config")
    if config.dose_ratio != manifest.dose_ratio:
        raise ConfigurationError(f"config dose_ratio {config.dose_ratio} differs from the dataset's {manifest.dose_ratio}")
    op = cached_operator(geometry, config.rays_per_bin)
    delta = central_column_mask(geometry).as_array().astype(np.float32)
    return build_model(config.variant, op, delta, prior_gain(manifest))


def _predict(model, batch) -> torch.Tensor:
    return model(batch["p_ld_9a"], batch["i_ld_9a"]).output


def validation_nmse(model, arrays: dict[str, np.ndarray], batch_size: int) -> float:
    model.eval()
    values = []
    with torch.no_grad():
        for start in range(0, len(arrays["p_ld_9a"]), batch_size):
            idx = np.arange(start, min(start + batch_size, len(arrays["p_ld_9a"])))
            batch = _to_torch(arrays, idx)
            out = _predict(model, batch).numpy()[:, 0]
            values += [nmse(o, t) for o, t in zip(out, arrays["p_fd_19a"][idx])]
    return float(np.mean(values))


def train(
    config: ExperimentConfig,
    manifest: DatasetManifest,
    run_dir: str | os.PathLike | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[Path | None, TrainingLog, torch.nn.Module]:
    """Adam training with per-epoch exponential decay; keeps the best-validation weights.

    Returns ``(checkpoint_path, log, model)`` where ``model`` carries the
    best-validation parameters.  With ``run_dir=None`` nothing is written.
    """
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(_seed(config.master_seed, "model-init"))
    model = _model_for(config, manifest)
    _, train_arrays = load_split(manifest, "train")
    _, val_arrays = load_split(manifest, "val")
    delta = model.delta if hasattr(model, "delta") else torch.as_tensor(
        central_column_mask(manifest.geometry()).as_array().astype(np.float32)
    )

    adc_ids = {id(p) for p in model.adc_parameters()}
    main = [p for p in model.parameters() if id(p) not in adc_ids]
    groups = [{"params": main, "lr": config.lr_main, "name": "main", "initial_lr": config.lr_main}]
    if adc_ids:
        groups.append({"params": model.adc_parameters(), "lr": config.lr_adc, "name": "adc", "initial_lr": config.lr_adc})
    opt = torch.optim.Adam(groups)

    tlog = TrainingLog()
    timing = {"epochs": []}
    best_state, best = None, float("inf")
    n = len(train_arrays["p_ld_9a"])
    order_gen = torch.Generator().manual_seed(_seed(config.master_seed, "data-order"))
    t_start = time.perf_counter()
    for epoch in range(config.effective_epochs):
        t0 = time.perf_counter()
        for g in opt.param_groups:
            g["lr"] = g["initial_lr"] * config.decay_per_epoch**epoch
        model.train()
        sums = {"l_image": 0.0, "l_projection": 0.0, "l_total": 0.0}
        perm = torch.randperm(n, generator=order_gen).numpy()
        steps = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = _to_torch(train_arrays, perm[start : start + config.batch_size])
            trace = model(batch["p_ld_9a"], batch["i_ld_9a"])
            try:
                losses = compute_losses(trace, batch, delta, config.w_image, config.w_projection)
            except NumericalError as e:
                raise NumericalError(f"training diverged at epoch {epoch}, step {step}: {e}") from e
            opt.zero_grad(set_to_none=True)
            losses.l_total.backward()
            opt.step()
            for k, v in losses.as_floats().items():
                sums[k] += v
            steps += 1
        val = validation_nmse(model, val_arrays, config.batch_size)
        if not np.isfinite(val):
            raise NumericalError(f"validation NMSE is not finite at epoch {epoch}")
        record = {
            "epoch": epoch,
            "train": {k: v / steps for k, v in sums.items()},
            "val_nmse": val,
            "lr": {g["name"]: g["lr"] for g in opt.param_groups},
        }
        tlog.epochs.append(record)
        if val < best:
            best, best_state = val, copy.deepcopy(model.state_dict())
            tlog.best_epoch = epoch
        timing["epochs"].append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f val_nmse %.5f", epoch, record["train"]["l_total"], val)
        if progress is not None:
            progress(record)
    timing["total"] = time.perf_counter() - t_start
    model.load_state_dict(best_state)

    ckpt = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / "config.json")
        ckpt = save_checkpoint(run_dir, model, config, manifest, tlog)
        (run_dir / "training_log.json").write_text(tlog.to_json())
        (run_dir / "timing.json").write_text(json.dumps(timing, indent=2))
    return ckpt, tlog, model


def save_checkpoint(run_dir: Path, model, config: ExperimentConfig, manifest: DatasetManifest, tlog: TrainingLog) -> Path:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = archive.save(run_dir / "checkpoint.nta", state)
    descriptor = {
        "variant": config.variant.to_dict(),
        "iterations": config.variant.iterations,
        "widths": {"unet": config.variant.width, "img": config.variant.img_width, "adc_growth": config.variant.adc_growth},
        "master_seed": config.master_seed,
        "rng": {"model_init_seed": _seed(config.master_seed, "model-init"), "data_order_seed": _seed(config.master_seed, "data-order")},
        "geometry_id": manifest.geometry_id,
        "prior_gain": prior_gain(manifest),
        "best_epoch": tlog.best_epoch,
        "sha256": meta["sha256"],
    }
    (run_dir / "checkpoint.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True))
    return run_dir / "checkpoint.nta"


def load_checkpoint(run_dir: str | os.PathLike, manifest: DatasetManifest) -> tuple[torch.nn.Module, ExperimentConfig]:
    run_dir = Path(run_dir)
    if not (run_dir / "checkpoint.json").exists():
        raise ValidationError(f"no checkpoint in {run_dir}")
    desc = json.loads((run_dir / "checkpoint.json").read_text())
    config = ExperimentConfig.load(run_dir / "config.json")
    if desc["geometry_id"] != manifest.geometry_id:
        raise ConfigurationError("checkpoint was trained on a different geometry")
    model = _model_for(config, manifest)
    state = archive.load(run_dir / "checkpoint.nta", desc["sha256"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    model.eval()
    return model, config


# --- evaluation ---------------------------------------------------------------


class ModelPredictor:
    """Adapts a trained network to the evaluation interface."""

    def __init__(self, model, batch_size: int = 2):
        self.model = model
        self.batch_size = batch_size
        self.name = model.variant.kind
        self.direct_image = model.variant.kind == "attnunet_img"

    def __call__(self, arrays: dict[str, np.ndarray]) -> tuple[np.ndarray, Optional[np.ndarray]]:
        self.model.eval()
        projs, images = [], []
        n = len(arrays["p_ld_9a"])
        with torch.no_grad():
            for start in range(0, n, self.batch_size):
                batch = _to_torch(arrays, np.arange(start, min(start + self.batch_size, n)))
                trace = self.model(batch["p_ld_9a"], batch["i_ld_9a"])
                projs.append(trace.output.numpy()[:, 0])
                if self.direct_image:
                    images.append(trace.image.numpy()[:, 0])
        return np.concatenate(projs), (np.concatenate(images) if self.direct_image else None)


class OraclePredictor:
    """Returns the ground truth; used to sanity-check the evaluation pipeline."""

    name = "oracle"
    direct_image = True

    def __call__(self, arrays):
        return arrays["p_fd_19a"].copy(), arrays["i_fd_19a"].copy()


def _reconstruct(manifest: DatasetManifest, projections: np.ndarray, iterations: int) -> np.ndarray:
    geometry = manifest.geometry()
    op = cached_operator(geometry, manifest.config.get("rays_per_bin", 1))
    settings = MlemSettings(iterations, AngleMask.full(geometry.n_detectors))
    gain = prior_gain(manifest)
    # network outputs may dip slightly below zero; MLEM needs nonnegative data
    return np.stack([mlem(op, np.clip(p.astype(np.float64), 0.0, None), settings) / gain for p in projections])


def evaluate(
    predictor,
    manifest: DatasetManifest,
    split: str = "test",
    mlem_iterations: int = 30,
) -> tuple[MetricReport, MetricReport]:
    """Projection report (output vs FD&19A) and image report (MLEM of the output vs the FD&19A image)."""
    if split not in ("val", "test"):
        raise ValidationError(f"evaluation split must be 'val' or 'test', got {split!r}")
    ids, arrays = load_split(manifest, split)
    proj, image = predictor(arrays)
    if image is None:
        image = _reconstruct(manifest, proj, mlem_iterations)
    name = getattr(predictor, "name", "model")
    p_rows = [(cid, projection_metrics(proj[i], arrays["p_fd_19a"][i])) for i, cid in enumerate(ids)]
    i_rows = [(cid, volume_metrics(image[i], arrays["i_fd_19a"][i])) for i, cid in enumerate(ids)]
    return MetricReport.from_rows(name, p_rows), MetricReport.from_rows(name, i_rows)


def baseline_reports(manifest: DatasetManifest, split: str = "test") -> tuple[MetricReport, MetricReport]:
    """Metrics of the unprocessed LD&9A input (projection and MLEM image) against FD&19A."""
    ids, arrays = load_split(manifest, split)
    p_rows = [(cid, projection_metrics(arrays["p_ld_9a"][i], arrays["p_fd_19a"][i])) for i, cid in enumerate(ids)]
    i_rows = [(cid, volume_metrics(arrays["i_ld_9a"][i], arrays["i_fd_19a"][i])) for i, cid in enumerate(ids)]
    return MetricReport.from_rows("baseline_ld_9a", p_rows), MetricReport.from_rows("baseline_ld_9a", i_rows)


def evaluate_run(run_dir: str | os.PathLike, manifest: DatasetManifest, split: str = "test") -> dict[str, MetricReport]:
    """Evaluate a run's checkpoint and write reports under ``run_dir/eval_<split>``."""
    run_dir = Path(run_dir)
    model, config = load_checkpoint(run_dir, manifest)
    predictor = ModelPredictor(model, config.batch_size)
    proj, img = evaluate(predictor, manifest, split, config.mlem_iterations)
    base_p, base_i = baseline_reports(manifest, split)
    out = run_dir / f"eval_{split}"
    out.mkdir(parents=True, exist_ok=True)
    reports = {"projection": proj, "image": img, "baseline_projection": base_p, "baseline_image": base_i}
    for key, rep in reports.items():
        (out / f"{key}.csv").write_text(rep.to_csv())
        (out / f"{key}.json").write_text(rep.to_json())
    _save_examples(out, predictor, manifest, split)
    return reports


def _save_examples(out: Path, predictor, manifest: DatasetManifest, split: str) -> None:
    ids, arrays = load_split(manifest, split)
    first = {k: v[:1] for k, v in arrays.items()}
    proj, image = predictor(first)
    tensors = {"prediction": proj[0], "target": first["p_fd_19a"][0], "input": first["p_ld_9a"][0]}
    if image is not None:
        tensors["image_prediction"] = image[0]
    archive.save(out / "example.nta", tensors)

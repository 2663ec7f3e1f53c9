"""Iteration and dose sweeps plus the report bundle built from finished runs.

Every trained model lives in its own run directory named after the variant
and the config hash, so sweep points never share output paths::

    <root>/<kind>-N<iterations>-<hash>/   one run (see :mod:`jointdudo.training`)
    <root>/sweep_iterations.csv           NMSE vs N
    <root>/sweep_dose.csv                 NMSE vs dose ratio
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive
from .config import ExperimentConfig
from .dataset import DatasetManifest, build_dataset
from .errors import ConfigurationError, ValidationError
from .metrics import METRIC_NAMES, MetricReport
from .training import evaluate_run, train

log = logging.getLogger(__name__)

MAX_ITERATIONS = 6
REFERENCE_METHOD = "joint_dudo"


def run_dir_for(config: ExperimentConfig, root: str | os.PathLike) -> Path:
    v = config.variant
    return Path(root) / f"{v.kind}-N{v.iterations}-{config.config_hash()}"


def is_complete(run_dir: str | os.PathLike, split: str = "test") -> bool:
    run_dir = Path(run_dir)
    needed = ["checkpoint.json", "training_log.json", f"eval_{split}/projection.json", f"eval_{split}/image.json"]
    return all((run_dir / n).exists() for n in needed)


def train_and_evaluate(config: ExperimentConfig, manifest: DatasetManifest, root: str | os.PathLike) -> Path:
    """Train and evaluate one configuration; a completed run with the same hash is reused."""
    run_dir = run_dir_for(config, root)
    if is_complete(run_dir):
        log.info("reusing completed run %s", run_dir)
        return run_dir
    train(config, manifest, run_dir)
    evaluate_run(run_dir, manifest, "test")
    return run_dir


def _summary_row(run_dir: Path) -> dict[str, float]:
    rep = load_report(run_dir, "projection")
    row = {}
    for m in METRIC_NAMES:
        row[f"{m}_mean"] = rep.mean(m)
        row[f"{m}_std"] = rep.std(m)
    return row


def _write_table(path: Path, rows: list[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{r[c]:.10g}" if isinstance(r[c], float) else r[c] for c in columns])
    path.write_text(buf.getvalue())


def _plot(path: Path, xs, series: dict[str, list[float]], xlabel: str, logx: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for name, ys in series.items():
        ax.plot(xs, [100 * y for y in ys], marker="o", label=name)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("projection NMSE (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_iterations(
    config: ExperimentConfig, manifest: DatasetManifest, n_values: Sequence[int], out_dir: str | os.PathLike
) -> list[dict]:
    """One joint model per iteration count; returns and writes the NMSE-vs-N table."""
    n_values = list(n_values)
    if not n_values or any(not 1 <= n <= MAX_ITERATIONS for n in n_values):
        raise ValidationError(f"iteration counts must lie in 1..{MAX_ITERATIONS}, got {n_values}")
    if not config.variant.is_joint:
        raise ConfigurationError("the iteration sweep needs a joint variant")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in n_values:
        run = train_and_evaluate(config.with_variant(iterations=n), manifest, out)
        rows.append({"iterations": n, **_summary_row(run), "run": run.name})
    cols = ["iterations", *[f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")], "run"]
    _write_table(out / "sweep_iterations.csv", rows, cols)
    _plot(out / "sweep_iterations.png", n_values, {config.variant.kind: [r["nmse_mean"] for r in rows]}, "iterations N")
    return rows


def sweep_dose(
    config: ExperimentConfig,
    dose_values: Sequence[float],
    out_dir: str | os.PathLike,
    kinds: Sequence[str] | None = None,
) -> list[dict]:
    """Re-thin a shared phantom set at every dose, then train and evaluate each variant.

    Datasets go to ``out_dir/data/dose_<d>``.  The full-dose projections of
    every case must be byte-identical across doses.
    """
    doses = list(dose_values)
    if not doses or any(not 0 < d <= 1 for d in doses):
        raise ValidationError(f"dose values must lie in (0, 1], got {doses}")
    kinds = list(kinds) if kinds else [config.variant.kind]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for d in doses:
        data_dir = out / "data" / f"dose_{d:g}"
        manifests[d] = DatasetManifest.load(data_dir) if (data_dir / "manifest.json").exists() else build_dataset(config, data_dir, d)
    check_shared_phantoms(list(manifests.values()))

    rows = []
    for kind in kinds:
        for d in doses:
            cfg = config.with_(dose_ratio=d).with_variant(kind=kind)
            run = train_and_evaluate(cfg, manifests[d], out)
            rows.append({"kind": kind, "dose_ratio": float(d), **_summary_row(run), "run": run.name})
    cols = ["kind", "dose_ratio", *[f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")], "run"]
    _write_table(out / "sweep_dose.csv", rows, cols)
    _plot(
        out / "sweep_dose.png",
        doses,
        {k: [r["nmse_mean"] for r in rows if r["kind"] == k] for k in kinds},
        "dose ratio",
        logx=True,
    )
    return rows


def check_shared_phantoms(manifests: Sequence[DatasetManifest]) -> None:
    if not manifests:
        return
    ref = {c: r["fd_sha256"] for c, r in manifests[0].cases.items()}
    for m in manifests[1:]:
        if {c: r["fd_sha256"] for c, r in m.cases.items()} != ref:
            raise ValidationError(f"dataset {m.root} does not share the phantom set of {manifests[0].root}")


# --- report bundle ---------------------------------------------------------------


def load_report(run_dir: str | os.PathLike, key: str, split: str = "test") -> MetricReport:
    path = Path(run_dir) / f"eval_{split}" / f"{key}.json"
    if not path.exists():
        raise ValidationError(f"missing report {path}")
    return MetricReport.from_dict(json.loads(path.read_text()))


def _method_name(run_dir: Path) -> str:
    cfg = json.loads((run_dir / "config.json").read_text())
    return cfg["variant"]["kind"]


def _fmt_cell(metric: str, rep: MetricReport) -> str:
    mu, sd = rep.mean(metric), rep.std(metric)
    if metric in ("nmse", "nmae"):
        return f"{100 * mu:.2f}±{100 * sd:.2f}"
    if metric == "ssim":
        return f"{mu:.4f}±{sd:.4f}"
    return f"{mu:.2f}±{sd:.2f}"


def comparison_table(reports: list[MetricReport], reference: str | None = REFERENCE_METHOD) -> str:
    """Table-style CSV: one row per method, mean±std per metric, p-value of NMSE vs ``reference``.

    NMSE and NMAE are given in percent.  The p-value column is present only
    when the reference method is among the reports and at least one other
    method can be compared.
    """
    ref = next((r for r in reports if r.method == reference), None)
    with_p = ref is not None and len(reports) > 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "NMSE(%)", "NMAE(%)", "SSIM", "PSNR", *(["p_nmse_vs_" + reference] if with_p else [])])
    for rep in reports:
        cells = [rep.method, *(_fmt_cell(m, rep) for m in METRIC_NAMES)]
        if with_p:
            if rep is ref:
                cells.append("")
            else:
                try:
                    cells.append(f"{rep.compare_to(ref):.3g}")
                except ValidationError:
                    cells.append("n/a")
        w.writerow(cells)
    return buf.getvalue()


def _image_grid(path: Path, examples: list[tuple[str, dict[str, np.ndarray]]]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    central = 9  # middle detector of the central column
    cols = [("input", "LD&9A"), ("target", "FD&19A")] + [("prediction", n) for n, _ in examples]
    fig, axes = plt.subplots(1, len(cols), figsize=(2.2 * len(cols), 2.4))
    first = examples[0][1]
    vmax = float(first["target"][..., central].max())
    for ax, (key, title), src in zip(axes, cols, [first, first, *[t for _, t in examples]]):
        ax.imshow(src[key][..., central].T, cmap="gray", vmin=0, vmax=vmax, origin="lower")
        ax.set_title(title, fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@dataclass
class ReportBundle:
    out_dir: Path
    methods: list[str] = field(default_factory=list)
    incomplete: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)


def report(run_dirs: Sequence[str | os.PathLike], out_dir: str | os.PathLike, split: str = "test") -> ReportBundle:
    """Collect finished runs into comparison tables and figures.

    Incomplete runs are listed in ``incomplete.txt`` and skipped; the
    bundle is still produced for the rest.  CSV output depends only on the
    run contents, so regenerating a bundle gives byte-identical tables.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out)
    done = []
    for rd in sorted({Path(r) for r in run_dirs}):
        if is_complete(rd, split) and (rd / "config.json").exists():
            done.append(rd)
        else:
            bundle.incomplete.append(str(rd))
    (out / "incomplete.txt").write_text("".join(f"{r}\n" for r in bundle.incomplete))
    bundle.files.append("incomplete.txt")
    if not done:
        log.warning("no completed runs to report")
        return bundle

    # reference method first, the rest alphabetical
    done.sort(key=lambda d: (_method_name(d) != REFERENCE_METHOD, _method_name(d), d.name))
    for domain, fname in (("projection", "table_projection.csv"), ("image", "table_image.csv")):
        reports = []
        for rd in done:
            rep = load_report(rd, domain, split)
            rep.method = _method_name(rd) if sum(_method_name(d) == _method_name(rd) for d in done) == 1 else rd.name
            reports.append(rep)
        base = load_report(done[0], f"baseline_{domain}", split)
        (out / fname).write_text(comparison_table([base, *reports]))
        bundle.files.append(fname)
    bundle.methods = [_method_name(d) for d in done]

    examples = []
    for rd in done:
        ex = rd / f"eval_{split}" / "example.nta"
        if ex.exists():
            examples.append((_method_name(rd), archive.load(ex)))
    if examples:
        _image_grid(out / "projection_grid.png", examples)
        bundle.files.append("projection_grid.png")
    for sweep in ("sweep_iterations", "sweep_dose"):
        for rd in done:
            src = rd.parent / f"{sweep}.csv"
            if src.exists():
                (out / f"{sweep}.csv").write_bytes(src.read_bytes())
                bundle.files.append(f"{sweep}.csv")
                break
    return bundle

"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
Relative output paths are placed under ``$JOINTDUDO_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from .config import OUTPUT_ROOT_ENV, PRESETS, ExperimentConfig, resolve_output
from .errors import ConfigurationError, NumericalError, ValidationError
from .nets.model import KINDS, ModelVariant

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("jointdudo")

_TUPLE_FIELDS = {"image_size": 3, "detector_bins": 2, "splits": 3}
_SKIP_FIELDS = {"variant", "preset"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named split/epoch preset")
    g = p.add_argument_group("experiment overrides")
    for f in fields(ExperimentConfig):
        if f.name in _SKIP_FIELDS:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name in _TUPLE_FIELDS:
            g.add_argument(flag, type=int, nargs=_TUPLE_FIELDS[f.name], dest=f.name)
        else:
            kind = {"float": float, "int": int, "str": str}.get(str(f.type).replace("Optional[", "").rstrip("]"), str)
            g.add_argument(flag, type=kind, dest=f.name)
    v = p.add_argument_group("model variant overrides")
    v.add_argument("--kind", choices=KINDS)
    for f in fields(ModelVariant):
        if f.name == "kind":
            continue
        if f.type in ("bool", bool):
            v.add_argument(f"--{f.name.replace('_', '-')}", type=_parse_bool, dest=f"variant_{f.name}")
        else:
            v.add_argument(f"--{f.name.replace('_', '-')}", type=int, dest=f"variant_{f.name}")


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.exists():
            raise ConfigurationError(f"config file {args.config} not found")
        cfg = ExperimentConfig.load(args.config)
        if args.preset:
            cfg = cfg.with_(preset=args.preset, splits=PRESETS[args.preset]["splits"])
    else:
        cfg = ExperimentConfig.from_preset(args.preset or "desk")
    changes = {}
    for f in fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if f.name not in _SKIP_FIELDS and val is not None:
            changes[f.name] = tuple(val) if f.name in _TUPLE_FIELDS else val
    if changes:
        cfg = cfg.with_(**changes)
    vchanges = {f.name: getattr(args, f"variant_{f.name}") for f in fields(ModelVariant) if getattr(args, f"variant_{f.name}", None) is not None}
    if getattr(args, "kind", None):
        vchanges["kind"] = args.kind
    if vchanges:
        cfg = cfg.with_variant(**vchanges)
    return cfg


def scale_splits(splits: Sequence[int], total: int) -> tuple[int, int, int]:
    """Distribute ``total`` cases over the splits in proportion to ``splits`` (at least one each)."""
    if total < 3:
        raise ValidationError("--cases needs at least 3 cases (one per split)")
    base = sum(splits)
    raw = [total * s / base for s in splits]
    out = [max(1, int(r)) for r in raw]
    # largest remainder
    while sum(out) < total:
        i = max(range(3), key=lambda k: raw[k] - out[k])
        out[i] += 1
    while sum(out) > total:
        i = max((k for k in range(3) if out[k] > 1), key=lambda k: out[k] - raw[k])
        out[i] -= 1
    return tuple(out)


# --- subcommands -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .dataset import build_dataset

    cfg = config_from_args(args)
    if args.dose is not None:
        cfg = cfg.with_(dose_ratio=args.dose)
    if args.cases is not None:
        cfg = cfg.with_(splits=scale_splits(cfg.splits, args.cases))
    if args.geometry is None and args.out is None:
        raise ValidationError("simulate needs --out and/or --geometry")
    if args.geometry is not None:
        path = resolve_output(args.geometry)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(cfg.geometry().to_json())
        print(json.dumps({"geometry": str(path), "geometry_id": cfg.geometry().geometry_id}))
    if args.out is not None:
        out = resolve_output(args.out)
        m = build_dataset(cfg, out)
        print(json.dumps({"dataset": str(out), "splits": dict(zip(("train", "val", "test"), m.split_sizes())), "dose_ratio": m.dose_ratio}))
    return EXIT_OK


def _manifest(path):
    from .dataset import DatasetManifest

    m = DatasetManifest.load(resolve_output(path))
    m.verify()
    return m


def cmd_train(args) -> int:
    from .experiments import run_dir_for
    from .training import train

    cfg = config_from_args(args)
    manifest = _manifest(args.data)
    if args.dose_ratio is None:
        cfg = cfg.with_(dose_ratio=manifest.dose_ratio)
    run_dir = resolve_output(args.run_dir) if args.run_dir else run_dir_for(cfg, resolve_output(cfg.output_dir))
    ckpt, tlog, _ = train(cfg, manifest, run_dir, progress=lambda r: log.info("epoch %d val_nmse %.6g", r["epoch"], r["val_nmse"]))
    print(json.dumps({"run_dir": str(run_dir), "checkpoint": str(ckpt), "best_epoch": tlog.best_epoch}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .training import evaluate_run

    manifest = _manifest(args.data)
    reports = evaluate_run(resolve_output(args.run), manifest, args.split)
    print(json.dumps({k: {"nmse": r.mean("nmse"), "ssim": r.mean("ssim"), "psnr": r.mean("psnr")} for k, r in reports.items()}, indent=2))
    return EXIT_OK


def cmd_sweep_iters(args) -> int:
    from .experiments import sweep_iterations

    cfg = config_from_args(args)
    manifest = _manifest(args.data)
    if args.dose_ratio is None:
        cfg = cfg.with_(dose_ratio=manifest.dose_ratio)
    rows = sweep_iterations(cfg, manifest, args.values, resolve_output(args.out))
    print(json.dumps([{"iterations": r["iterations"], "nmse_mean": r["nmse_mean"]} for r in rows]))
    return EXIT_OK


def cmd_sweep_dose(args) -> int:
    from .experiments import sweep_dose

    cfg = config_from_args(args)
    rows = sweep_dose(cfg, args.values, resolve_output(args.out), args.kinds)
    print(json.dumps([{"kind": r["kind"], "dose_ratio": r["dose_ratio"], "nmse_mean": r["nmse_mean"]} for r in rows]))
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiments import report

    bundle = report([resolve_output(r) for r in args.runs], resolve_output(args.out), args.split)
    print(json.dumps({"out": str(bundle.out_dir), "methods": bundle.methods, "incomplete": bundle.incomplete, "files": bundle.files}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointdudo",
        description="Joint denoising and few-angle reconstruction for multi-pinhole cardiac SPECT.",
        epilog=f"Relative output paths are resolved under ${OUTPUT_ROOT_ENV} when it is set.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset and/or write the scanner geometry")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="dataset directory to create")
    p.add_argument("--dose", type=float, help="low-dose ratio in (0, 1]")
    p.add_argument("--cases", type=int, help="total case count, split in the configured proportions")
    p.add_argument("--geometry", type=Path, help="write the geometry JSON here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--run-dir", type=Path, help="run directory (default: <output_dir>/<kind>-N<n>-<hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a trained run")
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-iters", help="train and evaluate one model per iteration count")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--values", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep_iters)

    p = sub.add_parser("sweep-dose", help="re-thin the dataset per dose, then train and evaluate")
    _add_config_flags(p)
    p.add_argument("--values", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.2, 0.4, 0.8])
    p.add_argument("--kinds", choices=KINDS, nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep_dose)

    p = sub.add_parser("report", help="build comparison tables and figures from finished runs")
    p.add_argument("runs", type=Path, nargs="+", help="run directories")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ConfigurationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

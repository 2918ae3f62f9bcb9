"""Command-line entry point: ``deaps <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Relative output
paths are resolved against ``$DEAPS_OUT_ROOT`` when it is set.  Every
output directory receives ``run_config.yaml`` with the resolved options and
their content hash.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import evalkit
from .io import config_hash
from .model import EncoderConfig, Network, count_parameters, encoder_parameter_count
from .pipeline import preprocess_manifest
from .sampling import Corpus
from .synthgen import generate_dataset
from .trainer import PRESETS, TrainConfig, fit, heads_for

log = logging.getLogger("deaps")

OUT_ROOT_ENV = "DEAPS_OUT_ROOT"
CONFIG_ECHO = "run_config.yaml"
ENCODER_KEYS = tuple(f.name for f in fields(EncoderConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "encoder")
RUN_CONFIG_KEYS = TRAIN_KEYS + ENCODER_KEYS
GRID_KEYS = ("window_size_s", "n_selected")

# default synthetic corpus for train/ablate runs without --data
DEFAULT_CORPUS = {"subjects": 16, "records": 2, "duration": 300}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- config


def flatten(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    enc = d.pop("encoder")
    return {**d, **enc}


def unflatten(flat: dict) -> TrainConfig:
    enc = {k: flat[k] for k in ENCODER_KEYS if k in flat}
    rest = {k: flat[k] for k in TRAIN_KEYS if k in flat}
    return TrainConfig(encoder=EncoderConfig(**enc), **rest)


def _coerce(key: str, value, reference: dict):
    ref = reference[key]
    if isinstance(ref, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(ref, int):
        return int(value)
    if isinstance(ref, float):
        return float(value)
    return str(value)


def load_config_file(path: str | Path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a flat key: value mapping")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise UsageError(f"{path}: key {k!r} must be a scalar (config is flat)")
    return data


def parse_assignments(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(preset_name: str = "paper", config_file: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """Preset, then file values, then command-line overrides.  Unknown keys are rejected."""
    if preset_name not in PRESETS:
        raise UsageError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    flat = flatten(PRESETS[preset_name])
    layers = [load_config_file(config_file) if config_file else {}, overrides or {}]
    for layer in layers:
        unknown = sorted(set(layer) - set(RUN_CONFIG_KEYS))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in layer.items():
            if v is None:
                continue
            try:
                flat[k] = _coerce(k, v, flat)
            except ValueError as exc:
                raise UsageError(f"bad value for {k}: {v!r}") from exc
    try:
        return unflatten(flat)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def echo_config(out_dir: str | Path, resolved: dict, digest: str | None = None) -> str:
    """Write the resolved options; training runs pass their TrainConfig hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = digest or config_hash(resolved)
    body = {**resolved, "config_hash": digest}
    (out_dir / CONFIG_ECHO).write_text(yaml.safe_dump(body, sort_keys=True))
    return digest


def out_path(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _args_dict(args: argparse.Namespace) -> dict:
    skip = {"func"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------- helpers


def _ensure_corpus(data: str | None, out_dir: Path, seed: int) -> Path:
    """Return a preprocessed manifest, synthesizing the default corpus if needed."""
    if data:
        return Path(data)
    raw = generate_dataset(
        DEFAULT_CORPUS["subjects"], DEFAULT_CORPUS["records"], DEFAULT_CORPUS["duration"], seed, out_dir / "data" / "raw"
    )
    return preprocess_manifest(raw, out_dir / "data" / "processed")


def _load_table(args) -> evalkit.RepresentationTable:
    if args.table:
        return evalkit.RepresentationTable.from_csv(args.table)
    if not (args.checkpoint and args.data):
        raise UsageError("give --table, or both --checkpoint and --data")
    return evalkit.embed(args.checkpoint, args.data)


def _state_rows(table: evalkit.RepresentationTable, label: str) -> evalkit.RepresentationTable:
    keep = np.asarray(table.labels[label]) >= 0
    return table.select(keep)


def _result_dict(res: evalkit.ProbeResult) -> dict:
    return {
        "accuracy": res.accuracy,
        "accuracy_std": res.accuracy_std,
        "sensitivity": res.sensitivity,
        "specificity": res.specificity,
        "confusion": res.confusion.tolist(),
        "classes": [int(c) for c in res.classes],
        "per_class_accuracy": {str(k): v for k, v in res.per_class_accuracy.items()},
        "folds": [{"test_subjects": [int(s) for s in f.test_subjects], "accuracy": f.accuracy, "n_test": f.n_test} for f in res.folds],
    }


def _write_result(args, res: evalkit.ProbeResult, name: str) -> None:
    print(f"{name} [{args.label}] {res.summary()}")
    for f in res.folds:
        print(f"  fold subjects={f.test_subjects} acc={100 * f.accuracy:.1f} n={f.n_test}")
    if args.out:
        out = out_path(args.out)
        echo_config(out, _args_dict(args))
        (out / f"{name}_result.json").write_text(json.dumps(_result_dict(res), indent=2, default=float))


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    out = out_path(args.out)
    manifest = generate_dataset(args.subjects, args.records, args.duration, args.seed, out)
    echo_config(out, _args_dict(args))
    print(f"wrote {manifest}")


def cmd_preprocess(args) -> None:
    out = out_path(args.out_dir)
    manifest = preprocess_manifest(args.in_manifest, out)
    echo_config(out, _args_dict(args))
    print(f"wrote {manifest}")


def _train_config(args) -> TrainConfig:
    overrides = parse_assignments(args.set)
    if args.method:
        overrides["method"] = args.method
    if args.seed is not None:
        overrides["seed"] = args.seed
    return resolve_config(args.preset, args.config, overrides)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    if args.dry_run:
        student = Network(cfg.encoder, heads=heads_for(cfg.method), predictors=cfg.method != "contrastive")
        print(f"encoder trainable parameters: {encoder_parameter_count(cfg.encoder)}")
        print(f"student trainable parameters (with heads): {count_parameters(student)}")
        print(f"config hash: {cfg.hash()}")
        return
    out = out_path(args.out or f"runs/{cfg.method}-{cfg.hash()}")
    echo_config(out, flatten(cfg), cfg.hash())
    manifest = _ensure_corpus(args.data, out, cfg.seed)
    ckpt = fit(cfg, Corpus.from_manifest(manifest), out, resume=args.resume)
    print(f"checkpoint {ckpt}")
    print(f"loss log {out / 'loss_log.csv'}")


def cmd_embed(args) -> None:
    table = evalkit.embed(args.checkpoint, args.data)
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out)
    echo_config(out.parent, _args_dict(args))
    print(f"wrote {len(table)} rows to {out}")


def cmd_probe(args) -> None:
    table = _state_rows(_load_table(args), args.label)
    subjects = np.unique(table.subject_id)
    if args.test_subjects:
        test = [int(s) for s in args.test_subjects.split(",")]
    else:
        rng = np.random.default_rng(args.seed or 0)
        n_test = max(1, int(round(len(subjects) * args.test_fraction)))
        test = sorted(rng.choice(subjects, n_test, replace=False).tolist())
    test_mask = np.isin(table.subject_id, test)
    probe = evalkit.fit_probe(table, args.label, ~test_mask)
    _write_result(args, evalkit.score_probe(probe, table, test_mask), "probe")


def cmd_loo(args) -> None:
    table = _state_rows(_load_table(args), args.label)
    _write_result(args, evalkit.loo_cv(table, args.label), "loo")


def cmd_kfold(args) -> None:
    table = _state_rows(_load_table(args), args.label)
    _write_result(args, evalkit.kfold_cv(table, args.label, k=args.k, seed=args.seed or 0), "kfold")


def cmd_pca_report(args) -> None:
    table = _state_rows(_load_table(args), args.state_label)
    out = out_path(args.out)
    echo_config(out, _args_dict(args))
    report = evalkit.pca_report(table, args.static_label, args.state_label, plot_path=out / "pca_densities.png")
    report.to_frame().to_csv(out / "pca_report.csv", index=False)
    for c in report.components:
        flags = ("S" if c.static_discriminative else "-") + ("D" if c.state_discriminative else "-")
        print(f"PC{c.index} var={c.explained_variance_ratio:.3f} F={c.subject_f:.1f} static_d={c.static_d:+.2f} state_d={c.state_d:+.2f} {flags}")
    print(f"state-discriminative components: {report.state_flagged}")


def cmd_curve(args) -> None:
    out = out_path(args.out)
    echo_config(out, _args_dict(args))
    rows = evalkit.curve(args.run_dir, args.data, args.protocol, args.label, out)
    for it, acc in rows:
        print(f"{it}\t{acc:.4f}")


def parse_grid(items: list[str]) -> dict[str, list]:
    grid: dict[str, list] = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"grid entries look like key=v1,v2; got {item!r}")
        key, values = item.split("=", 1)
        key = key.strip()
        if key not in GRID_KEYS:
            raise UsageError(f"grid key must be one of {GRID_KEYS}, got {key!r}")
        vals = [int(v) for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid key {key!r} has no values")
        grid[key] = vals
    return grid


def ablate(
    grid: dict[str, list],
    base: TrainConfig,
    manifest: str | Path,
    out_dir: str | Path,
    protocol: str = "loo",
    label: str = "state",
) -> list[dict]:
    """Train and probe one run per grid point on a shared corpus."""
    if not grid or not all(grid.values()):
        raise ValueError("ablation grid is empty")
    out_dir = Path(out_dir)
    corpus = Corpus.from_manifest(manifest)
    keys = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        cfg = replace(base, **point)
        run_dir = out_dir / ("_".join(f"{k}-{v}" for k, v in point.items()))
        echo_config(run_dir, flatten(cfg), cfg.hash())
        ckpt = fit(cfg, corpus, run_dir)
        table = evalkit.embed(ckpt, manifest)
        res = evalkit.PROTOCOLS[protocol](_state_rows(table, label), label)
        rows.append(
            {
                **point,
                "config_hash": cfg.hash(),
                "accuracy": res.accuracy,
                "accuracy_std": res.accuracy_std,
                "sensitivity": res.sensitivity,
                "specificity": res.specificity,
                "checkpoint": str(ckpt),
            }
        )
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_ablate(args) -> None:
    grid = parse_grid(args.grid)
    if not grid:
        raise UsageError("--grid is required (e.g. window_size_s=90,120,150)")
    cfg = _train_config(args)
    for values in itertools.product(*grid.values()):
        try:
            replace(cfg, **dict(zip(grid, values)))
        except ValueError as exc:
            raise UsageError(f"grid point {dict(zip(grid, values))}: {exc}") from exc
    out = out_path(args.out or f"runs/ablate-{cfg.hash()}")
    echo_config(out, {**flatten(cfg), "grid": json.dumps(grid, sort_keys=True), "protocol": args.protocol})
    manifest = _ensure_corpus(args.data, out, cfg.seed)
    rows = ablate(grid, cfg, manifest, out, args.protocol, args.label)
    for r in rows:
        point = " ".join(f"{k}={r[k]}" for k in grid)
        print(f"{point}  acc={100 * r['accuracy']:.1f}±{100 * r['accuracy_std']:.1f}  hash={r['config_hash']}")
    print(f"wrote {out / 'ablation.csv'}")


# ---------------------------------------------------------------- parser


def _table_args(p: argparse.ArgumentParser, label: bool = True) -> None:
    p.add_argument("--table", help="representation CSV written by `embed`")
    p.add_argument("--checkpoint", help="checkpoint to embed on the fly")
    p.add_argument("--data", help="preprocessed manifest (with --checkpoint)")
    p.add_argument("--out", help="directory for result files")
    if label:
        p.add_argument("--label", default="state")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=["deaps", "byol", "contrastive"])
    p.add_argument("--preset", default="paper", help=f"one of {sorted(PRESETS)}")
    p.add_argument("--config", help="flat YAML file of config keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--data", help="preprocessed manifest; a synthetic corpus is generated when omitted")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="deaps", description="DEAPS self-supervised toolkit for quasiperiodic time series")
    parser.add_argument("--seed", type=int, default=None, help="global seed")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled corpus")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--records", type=int, required=True)
    p.add_argument("--duration", type=float, required=True, help="seconds per record")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="resample, filter, normalize and quality-check")
    p.add_argument("--in-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train DEAPS or a baseline")
    _train_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--dry-run", action="store_true", help="print parameter counts and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="write the representation table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", parents=[common], help="single subject-disjoint split")
    _table_args(p)
    p.add_argument("--test-subjects", help="comma-separated subject ids held out")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("loo", parents=[common], help="leave-one-subject-out probe")
    _table_args(p)
    p.set_defaults(func=cmd_loo)

    p = sub.add_parser("kfold", parents=[common], help="subject-level k-fold probe")
    _table_args(p)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("pca-report", parents=[common], help="per-component separability report")
    _table_args(p, label=False)
    p.add_argument("--static-label", default="static_class")
    p.add_argument("--state-label", default="state")
    p.set_defaults(func=cmd_pca_report)

    p = sub.add_parser("curve", parents=[common], help="probe accuracy per checkpoint")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=sorted(evalkit.PROTOCOLS), default="loo")
    p.add_argument("--label", default="state")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("ablate", parents=[common], help="train + probe over a hyperparameter grid")
    _train_args(p)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help=f"keys: {', '.join(GRID_KEYS)}")
    p.add_argument("--protocol", choices=sorted(evalkit.PROTOCOLS), default="loo")
    p.add_argument("--label", default="state")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        if "seed" not in vars(args):
            args.seed = None
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(message)s")
        if args.command == "synth" and args.seed is None:
            args.seed = 0
        args.func(args)
    except UsageError as exc:
        print(f"deaps: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"deaps: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``pstbln {gen-synth,train,grow,eval,predict}``.

Every command reads an optional JSON config (``--config``) whose ``command``
field must match the subcommand; explicit flags override config values.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .data import (
    AugmentConfig,
    DatasetError,
    SyntheticSpec,
    augment_dataset,
    format_dataset,
    generate_synthetic,
    load_dataset,
    split,
)
from .delaunay import DegenerateInputError
from .growth import GrowthConfig, progressive_build
from .landmarks import GraphTopology
from .model import NetworkSpec, build_model
from .pipeline import dataset_topology, feature_scale, prepare, to_arrays
from .tensor import NumericalError, TrainConfig
from .training import accuracy, eval_loss, train_epochs
from .uncertainty import PredictionDistribution, mc_samples, per_class_report, report_from_samples

log = logging.getLogger("pstbln")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FIXED_WIDTHS = [8, 16, 16, 32, 32, 64, 64]


class ConfigError(ValueError):
    pass


_COMMON = {"seed": 0, "out_dir": ".", "threads": None, "bit_exact": False}
_DATA = {"dataset": None, "validation_fraction": 0.2, "split_seed": 0, "frame_mode": "peak4",
         "frames": 4, "augment": False}
_TRAIN = {"lr": None, "momentum": 0.9, "weight_decay": 0.0005, "batch": 16, "dropout": 0.2,
          "temporal_kernel": 3}

DEFAULTS = {
    "gen-synth": {**_COMMON, "class_count": 3, "sequences_per_class": 20, "frames": 4, "jitter": 1.0,
                  "amplitude": 1.0, "max_phase": 0.4, "programs": None, "augment": False},
    "train": {**_COMMON, **_DATA, **_TRAIN, "widths": FIXED_WIDTHS, "epochs": 400},
    "grow": {**_COMMON, **_DATA, **_TRAIN, "epochs": 400, "block_size": 5, "eps_width": 1e-4,
             "eps_depth": 1e-4, "epochs_per_iteration": 30, "max_layers": 7, "max_width": 64},
    "eval": {**_COMMON, "checkpoint": None, "dataset": None, "mc_samples": 100, "subset": "validation"},
    "predict": {**_COMMON, "checkpoint": None, "dataset": None, "sequence_id": None, "mc_samples": 100,
                "class_names": None},
}
COMMANDS = tuple(DEFAULTS)

# flag name -> config key
FLAGS = {
    "seed": "seed", "dataset": "dataset", "checkpoint": "checkpoint", "out_dir": "out_dir",
    "mc_samples": "mc_samples", "dropout": "dropout", "lr": "lr", "epochs": "epochs", "batch": "batch",
    "block_size": "block_size", "eps_width": "eps_width", "eps_depth": "eps_depth", "threads": "threads",
    "bit_exact": "bit_exact", "sequence_id": "sequence_id",
}


# ----------------------------------------------------------------------------
# configuration


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pstbln", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON config file with a 'command' field")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out-dir", dest="out_dir", type=Path)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--eps-width", dest="eps_width", type=float)
    p.add_argument("--eps-depth", dest="eps_depth", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--bit-exact", dest="bit_exact", action="store_true", default=None)
    p.add_argument("--sequence-id", dest="sequence_id")
    return p


def resolve_config(command: str, file_config: dict | None, flags: dict) -> dict:
    """Defaults, then the config file, then explicit flags; unknown keys are rejected."""
    allowed = DEFAULTS[command]
    config = dict(allowed)
    if file_config is not None:
        if not isinstance(file_config, dict):
            raise ConfigError("config file must hold a JSON object")
        file_config = dict(file_config)
        declared = file_config.pop("command", command)
        if declared != command:
            raise ConfigError(f"config is for command {declared!r}, not {command!r}")
        unknown = sorted(set(file_config) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        config.update(file_config)
    for flag, value in flags.items():
        if value is None:
            continue
        key = FLAGS[flag]
        if key not in allowed:
            raise ConfigError(f"--{flag.replace('_', '-')} does not apply to {command}")
        config[key] = str(value) if isinstance(value, Path) else value
    _validate(command, config)
    return config


def _validate(command: str, c: dict):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(c["seed"], int), "seed must be an integer")
    need(c["threads"] is None or (isinstance(c["threads"], int) and c["threads"] >= 1), "threads must be >= 1")
    if command in ("train", "grow"):
        need(c["dataset"] is not None, "a dataset is required (--dataset)")
        need(0 < c["validation_fraction"] < 1, "validation_fraction must lie in (0, 1)")
        need(c["frame_mode"] in ("peak4", "uniform", "exact"), "frame_mode must be peak4, uniform or exact")
        need(c["frame_mode"] != "peak4" or c["frames"] == 4, "peak4 selection needs frames = 4")
        need(c["epochs"] >= 0, "epochs must be >= 0")
        need(c["batch"] >= 1, "batch must be >= 1")
        need(0 <= c["dropout"] < 1, "dropout must lie in [0, 1)")
        need(c["lr"] is None or c["lr"] > 0, "lr must be positive")
    if command == "train":
        need(isinstance(c["widths"], list) and c["widths"] and all(isinstance(w, int) and w >= 1 for w in c["widths"]),
             "widths must be a non-empty list of positive integers")
    if command == "grow":
        need(c["block_size"] >= 1, "block_size must be >= 1")
        need(c["eps_width"] > 0 and c["eps_depth"] > 0, "eps-width and eps-depth must be positive")
    if command in ("eval", "predict"):
        need(c["checkpoint"] is not None, "a checkpoint is required (--checkpoint)")
        need(c["dataset"] is not None, "a dataset is required (--dataset)")
        need(c["mc_samples"] >= 1, "mc-samples must be >= 1")
    if command == "eval":
        need(c["subset"] in ("validation", "train", "all"), "subset must be validation, train or all")


def _log_level() -> int:
    name = os.environ.get("STBLN_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigError(f"STBLN_LOG={name!r} is not a log level")
    return level


# ----------------------------------------------------------------------------
# output helpers


def _out(config: dict, name: str) -> Path:
    d = Path(config["out_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_rows(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _r(x: float) -> str:
    return repr(float(x))


# ----------------------------------------------------------------------------
# data preparation shared by train/grow and eval/predict


def _prepare_training_data(c: dict):
    seqs = load_dataset(c["dataset"])
    if not seqs:
        raise DatasetError("dataset holds no sequences")
    classes = max(s.label for s in seqs) + 1
    if classes < 2:
        raise DatasetError("dataset needs at least 2 classes")
    train, val = split(seqs, c["validation_fraction"], c["split_seed"])
    if c["augment"]:
        train = augment_dataset(train, AugmentConfig(seed=c["seed"]))
    ptr = prepare(train, c["frame_mode"], c["frames"])
    pva = prepare(val, c["frame_mode"], c["frames"])
    topo = dataset_topology(ptr)
    X, y = to_arrays(ptr, topo)
    Xv, yv = to_arrays(pva, topo)
    scale = feature_scale(X)
    X /= scale
    Xv /= scale
    meta = {
        "topology": topo.to_dict(),
        "feature_scale": float(scale),
        "frame_mode": c["frame_mode"],
        "frames": c["frames"],
        "validation_fraction": c["validation_fraction"],
        "split_seed": c["split_seed"],
        "classes": int(classes),
    }
    return X, y, Xv, yv, classes, meta


def _train_config(c: dict) -> TrainConfig:
    lr = c["lr"] if c["lr"] is not None else (0.1 if c["frame_mode"] == "peak4" else 0.01)
    return TrainConfig(learning_rate=lr, momentum=c["momentum"], weight_decay=c["weight_decay"],
                       epochs=c["epochs"], batch_size=c["batch"], seed=c["seed"])


def _arrays_for_checkpoint(meta: dict, seqs):
    try:
        topo = GraphTopology.from_dict(meta["topology"])
        scale = float(meta["feature_scale"])
        mode, frames = meta["frame_mode"], int(meta["frames"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint lacks pipeline metadata: {exc}") from exc
    X, y = to_arrays(prepare(seqs, mode, frames), topo)
    return X / scale, y


def _fit_metrics(model, X, y, Xv, yv) -> dict:
    m = {"params": model.count_params(), "widths": model.spec.widths,
         "train_accuracy": accuracy(model, X, y), "train_eval_loss": eval_loss(model, X, y)}
    if len(yv):
        m["validation_accuracy"] = accuracy(model, Xv, yv)
        m["validation_loss"] = eval_loss(model, Xv, yv)
    return m


# ----------------------------------------------------------------------------
# commands


def cmd_gen_synth(c: dict) -> dict:
    try:
        spec = SyntheticSpec(class_count=c["class_count"], sequences_per_class=c["sequences_per_class"],
                             frames=c["frames"], jitter=c["jitter"], amplitude=c["amplitude"],
                             max_phase=c["max_phase"], seed=c["seed"], programs=c["programs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    seqs = generate_synthetic(spec)
    if c["augment"]:
        seqs = augment_dataset(seqs, AugmentConfig(seed=c["seed"]))
    _out(c, "dataset.csv").write_text(format_dataset(seqs), encoding="utf-8")
    _write_json(_out(c, "synthetic_spec.json"), {**spec.to_dict(), "augment": c["augment"]})
    print(f"wrote {len(seqs)} sequences, {spec.class_count} classes, {spec.frames} frames each")
    return {"sequences": len(seqs)}


def cmd_train(c: dict) -> dict:
    X, y, Xv, yv, classes, meta = _prepare_training_data(c)
    spec = NetworkSpec.from_widths(c["widths"], X.shape[3], classes, c["frames"],
                                   k=c["temporal_kernel"], p=c["dropout"])
    tconf = _train_config(c)
    model = build_model(spec, c["seed"])
    losses = []
    last_good = model.clone()

    def on_epoch(epoch, loss):
        nonlocal last_good
        losses.append(loss)
        if all(np.all(np.isfinite(p.value)) for p in model.parameters()):
            last_good = model.clone()
        log.info("epoch %d loss %.6g", epoch, loss)

    meta = {**meta, "command": "train", "train_config": tconf.__dict__}
    try:
        train_epochs(model, X, y, tconf, on_epoch=on_epoch)
    except NumericalError:
        write_checkpoint(_out(c, "model.ckpt"), last_good, {**meta, "diverged": True, "epochs_completed": len(losses)})
        _write_rows(_out(c, "loss.csv"), ["epoch", "loss"], [[i, _r(l)] for i, l in enumerate(losses)])
        raise
    write_checkpoint(_out(c, "model.ckpt"), model, {**meta, "epochs_completed": len(losses)})
    _write_rows(_out(c, "loss.csv"), ["epoch", "loss"], [[i, _r(l)] for i, l in enumerate(losses)])
    metrics = {"epochs": len(losses), "train_loss": losses[-1] if losses else None, **_fit_metrics(model, X, y, Xv, yv)}
    _write_json(_out(c, "metrics.json"), metrics)
    print(f"train accuracy {metrics['train_accuracy']:.4f}, validation accuracy "
          f"{metrics.get('validation_accuracy', float('nan')):.4f}, {metrics['params']} parameters")
    return metrics


def cmd_grow(c: dict) -> dict:
    X, y, Xv, yv, classes, meta = _prepare_training_data(c)
    tconf = _train_config(c)
    try:
        gconf = GrowthConfig(block_size=c["block_size"], width_threshold=c["eps_width"],
                             depth_threshold=c["eps_depth"], epochs_per_iteration=c["epochs_per_iteration"],
                             max_layers=c["max_layers"], max_width=c["max_width"], final_epochs=c["epochs"],
                             temporal_kernel=c["temporal_kernel"], dropout=c["dropout"], seed=c["seed"],
                             train_config=tconf)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    spec, model, trace = progressive_build(X, y, gconf, Xv, yv, classes=classes)
    _out(c, "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    _out(c, "trace.csv").write_text(trace.to_csv(), encoding="utf-8")
    write_checkpoint(_out(c, "model.ckpt"), model, {**meta, "command": "grow", "train_config": tconf.__dict__})
    _write_json(_out(c, "metrics.json"), trace.metrics)
    print(f"grown widths {spec.widths}, {trace.metrics['params']} parameters, "
          f"validation accuracy {trace.metrics.get('validation_accuracy', float('nan')):.4f}")
    return trace.metrics


def _load_model(c: dict):
    model, meta = read_checkpoint(c["checkpoint"])
    return model, meta


def cmd_eval(c: dict) -> dict:
    model, meta = _load_model(c)
    seqs = load_dataset(c["dataset"])
    if c["subset"] != "all":
        if "split_seed" not in meta:
            raise CheckpointError("checkpoint does not record a split; use subset 'all'")
        train, val = split(seqs, meta["validation_fraction"], meta["split_seed"])
        seqs = val if c["subset"] == "validation" else train
    if not seqs:
        raise DatasetError("no sequences to evaluate")
    X, y = _arrays_for_checkpoint(meta, seqs)
    if X.shape[1:] != (model.spec.input_channels, model.spec.frames, model.spec.edge_count):
        raise CheckpointError(f"data shape {X.shape[1:]} does not match the checkpoint's spec")
    single = accuracy(model, X, y)
    samples = mc_samples(model, X, c["mc_samples"], c["seed"])
    report = report_from_samples(samples, y)
    metrics = {
        "wo_mcd_accuracy": single,
        "w_mcd_accuracy": report.ensemble_accuracy,
        "mc_samples": c["mc_samples"],
        "items": int(len(y)),
        "subset": c["subset"],
        "uncertainty": report.to_dict(),
    }
    _write_json(_out(c, "eval_metrics.json"), metrics)
    _write_rows(_out(c, "mc_accuracy.csv"), ["run", "accuracy"],
                [[r, _r(a)] for r, a in enumerate(report.per_run_accuracy)])
    print(f"wo/MCD {single:.4f}  w/MCD {report.ensemble_accuracy:.4f}  "
          f"runs {report.mean:.4f} +/- {report.stddev:.4f}")
    return metrics


def cmd_predict(c: dict) -> dict:
    model, meta = _load_model(c)
    seqs = load_dataset(c["dataset"])
    if c["sequence_id"] is not None:
        seqs = [s for s in seqs if s.sequence_id == c["sequence_id"]]
        if not seqs:
            raise DatasetError(f"no sequence {c['sequence_id']!r} in {c['dataset']}")
    elif len(seqs) != 1:
        raise ConfigError(f"dataset holds {len(seqs)} sequences; choose one with --sequence-id")
    seq = seqs[0]
    X, _ = _arrays_for_checkpoint(meta, [seq])
    C = model.spec.classes
    names = c["class_names"] or [str(k) for k in range(C)]
    if len(names) != C:
        raise ConfigError(f"{len(names)} class names for a {C}-class model")
    dist = PredictionDistribution.from_samples(mc_samples(model, X, c["mc_samples"], c["seed"])[:, 0])
    rows = [[names[k], r, _r(dist.samples[r, k])] for r in range(len(dist.samples)) for k in range(C)]
    rows += [[names[k], "mean", _r(dist.mean[k])] for k in range(C)]
    rows += [[names[k], "variance", _r(dist.variance[k])] for k in range(C)]
    _write_rows(_out(c, "prediction.csv"), ["class", "run", "probability"], rows)
    summary = {
        "sequence_id": seq.sequence_id,
        "predicted_class": dist.predicted_class,
        "predicted_name": names[dist.predicted_class],
        "mean_probability": float(dist.mean[dist.predicted_class]),
        "variance": dist.uncertainty,
        "mc_samples": c["mc_samples"],
        "per_class": per_class_report(dist, names),
    }
    _write_json(_out(c, "prediction.json"), summary)
    print(f"{seq.sequence_id}: class {names[dist.predicted_class]} "
          f"(mean probability {summary['mean_probability']:.4f}, variance {summary['variance']:.3g})")
    for row in summary["per_class"]:
        print(f"  {row['class']:>12}  mean {row['mean']:.4f}  var {row['variance']:.3g}")
    return summary


HANDLERS = {"gen-synth": cmd_gen_synth, "train": cmd_train, "grow": cmd_grow, "eval": cmd_eval,
            "predict": cmd_predict}


def run(command: str, config: dict) -> dict:
    limit = 1 if config["bit_exact"] else config["threads"]
    ctx = threadpool_limits(limits=limit) if limit is not None else contextlib.nullcontext()
    with ctx:
        return HANDLERS[command](config)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        logging.basicConfig(level=_log_level(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        file_config = None
        if args.config is not None:
            try:
                file_config = json.loads(args.config.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        flags = {k: getattr(args, k) for k in FLAGS}
        config = resolve_config(args.command, file_config, flags)
        run(args.command, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, DegenerateInputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

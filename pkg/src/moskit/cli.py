"""Command-line pipeline: stats, plan-batches, train, finetune, predict, evaluate.

Every constant has a default and can be set either in a flat key=value
config file (``--config``) or by a flag named after the config key; flags
override file values. Each run writes a ``resolved_config.cfg`` snapshot
next to its outputs, and re-running from that snapshot reproduces them.
Errors exit nonzero after printing a single ``error: ...`` line.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import (
    Dataset,
    FormatError,
    InvalidInputError,
    ModelConfig,
    MoskitError,
    PostConfig,
    SequenceData,
    TrainRunConfig,
    class_weights,
    class_to_mos,
    evaluate,
    finetune,
    load_checkpoint,
    load_manifest,
    mass_in_range,
    mean_std_scatter,
    mos_histogram,
    padding_cost,
    plan_random,
    plan_sorted,
    predict_sequences,
    save_checkpoint,
    train_classification,
    train_regression,
)
from .dataset import load_features
from .postprocess import decode_classification, pipeline
from .training import classification_phases, history_to_csv

#: key -> (type, default). ``bool`` parses true/false/1/0; ``opt_float``
#: additionally accepts "none".
CONFIG_SPEC: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    # model shape
    "projection_dim": ("opt_int", None),
    "lstm_hidden": ("int", 128),
    "lstm_layers": ("int", 2),
    "dense_hidden": ("int", 128),
    "num_classes": ("int", 33),
    "dropout_in": ("float", 0.375),
    "dropout_mid": ("float", 0.75),
    "dropout_out": ("float", 0.75),
    "dropout_enabled": ("opt_bool", None),
    # optimizer and schedule
    "micro_batch": ("int", 8),
    "accumulation_steps": ("int", 10),
    "max_epochs": ("int", 100),
    "patience": ("int", 5),
    "max_restarts": ("int", 3),
    "optimizer": ("str", "sgd_momentum"),
    "momentum": ("float", 0.9),
    "schedule": ("str", "cyclical"),
    "base_lr": ("float", 0.0005),
    "max_lr": ("float", 0.005),
    "cycle_len": ("int", 200),
    "constant_lr": ("float", 0.0005),
    "loss": ("str", "l1"),
    "clip_norm": ("opt_float", None),
    "coverage_low": ("float", 1.5),
    "coverage_high": ("float", 4.5),
    "eval_batch": ("int", 32),
    "target_train_loss": ("opt_float", None),
    # classification transfer phases
    "cls_lr": ("float", 0.0005),
    "cls_batch": ("int", 100),
    # fine-tuning
    "finetune_lr": ("float", 0.0001),
    "finetune_batch": ("int", 10),
    # post-processing
    "resolution": ("float", 0.125),
    "low_threshold": ("float", 1.3),
    "high_threshold": ("float", 4.2),
    "low_delta": ("float", -0.05),
    "high_delta": ("float", 0.25),
    "ensemble": ("bool", True),
    "decode": ("str", "argmax"),
    "postprocess_order": ("str", "correct_then_quantize"),
    # stats
    "bin_width": ("float", 0.125),
    "batch_size": ("int", 8),
    "plan_mode": ("str", "sorted"),
}


def _parse_value(key: str, raw: str):
    kind, _ = CONFIG_SPEC[key]
    raw = raw.strip()
    if kind.startswith("opt_") and raw.lower() in ("none", ""):
        return None
    base = kind.removeprefix("opt_")
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise InvalidInputError(f"config key {key}: bad {base} value {raw!r}")
    if base == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise InvalidInputError(f"config key {key}: bad boolean {raw!r}")
    return raw


def load_config_file(path) -> dict:
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep or key not in CONFIG_SPEC:
            raise FormatError(f"line {line_no}: unknown config entry {line!r}", str(path))
        values[key] = _parse_value(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- command-line flags."""
    cfg = {key: default for key, (_, default) in CONFIG_SPEC.items()}
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    for key in CONFIG_SPEC:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _parse_value(key, value)
    return cfg


def write_snapshot(out_dir: Path, cfg: dict) -> None:
    lines = [f"{k}={'none' if cfg[k] is None else cfg[k]}" for k in CONFIG_SPEC]
    (out_dir / "resolved_config.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_config(cfg: dict, input_dim: int, head: str) -> ModelConfig:
    return ModelConfig(
        input_dim=input_dim,
        projection_dim=cfg["projection_dim"],
        lstm_hidden=cfg["lstm_hidden"],
        lstm_layers=cfg["lstm_layers"],
        dense_hidden=cfg["dense_hidden"],
        head=head,
        num_classes=cfg["num_classes"],
        dropout_in=cfg["dropout_in"],
        dropout_mid=cfg["dropout_mid"],
        dropout_out=cfg["dropout_out"],
        dropout_enabled=False if head == "classification" else cfg["dropout_enabled"],
    )


def _train_config(cfg: dict) -> TrainRunConfig:
    return TrainRunConfig(
        micro_batch=cfg["micro_batch"],
        accumulation_steps=cfg["accumulation_steps"],
        seed=cfg["seed"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        max_restarts=cfg["max_restarts"],
        optimizer=cfg["optimizer"],
        momentum=cfg["momentum"],
        schedule=cfg["schedule"],
        base_lr=cfg["base_lr"],
        max_lr=cfg["max_lr"],
        cycle_len=cfg["cycle_len"],
        constant_lr=cfg["constant_lr"],
        loss=cfg["loss"],
        clip_norm=cfg["clip_norm"],
        coverage_low=cfg["coverage_low"],
        coverage_high=cfg["coverage_high"],
        eval_batch=cfg["eval_batch"],
        target_train_loss=cfg["target_train_loss"],
    )


def _post_config(cfg: dict) -> PostConfig:
    return PostConfig(
        resolution=cfg["resolution"],
        low_threshold=cfg["low_threshold"],
        high_threshold=cfg["high_threshold"],
        low_delta=cfg["low_delta"],
        high_delta=cfg["high_delta"],
        ensemble=cfg["ensemble"],
        decode=cfg["decode"],
        order=cfg["postprocess_order"],
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _feature_dim(ds: Dataset) -> int:
    if not ds.utterances:
        raise InvalidInputError("empty dataset")
    return load_features(ds.utterances[0]).shape[1]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_stats(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ds = load_manifest(args.manifest, split="train")
    hist = mos_histogram(ds, cfg["bin_width"])
    with open(out / "histogram.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bin_center", "count"])
        for center, count in hist:
            w.writerow([repr(center), count])
    if all(u.ratings is not None for u in ds.utterances):
        with open(out / "scatter.csv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["mean", "std", "count"])
            for mean, std, count in mean_std_scatter(ds):
                w.writerow([repr(mean), repr(std), count])
    weights = class_weights(ds)
    with open(out / "class_weights.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class", "mos", "weight"])
        for k, weight in enumerate(weights, start=1):
            w.writerow([k, repr(class_to_mos(k)), repr(float(weight))])
    write_snapshot(out, cfg)
    print(f"utterances: {len(ds)}")
    print(f"resolution: {ds.resolution}")
    print(f"mass in [2, 4.125]: {mass_in_range(ds, 2.0, 4.125):.4f}")
    print(f"mass below 2:       {mass_in_range(ds, 1.0, np.nextafter(2.0, 1.0)):.4f}")
    print(f"mass above 4.125:   {mass_in_range(ds, np.nextafter(4.125, 5.0), 5.0):.4f}")
    return 0


def cmd_plan_batches(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ds = load_manifest(args.manifest, split="train")
    lengths = ds.lengths()
    if cfg["plan_mode"] == "sorted":
        plan = plan_sorted(lengths, cfg["batch_size"], cfg["seed"])
    elif cfg["plan_mode"] == "random":
        plan = plan_random(lengths, cfg["batch_size"], cfg["seed"])
    else:
        raise InvalidInputError(f"unknown plan_mode {cfg['plan_mode']!r}")
    path = out / "batches.ndjson"
    with open(path, "w", encoding="utf-8") as f:
        for batch in plan.batches:
            longest = max(lengths[i] for i in batch)
            pad = sum(longest - lengths[i] for i in batch)
            f.write(json.dumps({"batch": batch, "max_len": longest, "padding": pad}) + "\n")
    write_snapshot(out, cfg)
    print(f"batches: {len(plan.batches)}  total padding: {padding_cost(plan)}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    train_ds = load_manifest(args.train_manifest, split="train")
    val_ds = load_manifest(args.val_manifest, split="validation")
    train_data = SequenceData.from_dataset(train_ds)
    val_data = SequenceData.from_dataset(val_ds)
    run_cfg = _train_config(cfg)
    if args.head == "regression":
        model_cfg = _model_config(cfg, _feature_dim(train_ds), "regression")
        result = train_regression(train_data, val_data, model_cfg, run_cfg)
    else:
        if not args.init_from:
            raise InvalidInputError("classification training needs --init-from CHECKPOINT")
        reg_params = load_checkpoint(args.init_from)
        src = reg_params.config
        # architecture comes from the donor checkpoint; only the head differs
        model_cfg = ModelConfig(
            input_dim=src.input_dim, projection_dim=src.projection_dim,
            lstm_hidden=src.lstm_hidden, lstm_layers=src.lstm_layers,
            dense_hidden=src.dense_hidden, head="classification",
            num_classes=cfg["num_classes"],
        )
        phases = classification_phases(cfg["cls_lr"], cfg["cls_batch"])
        result = train_classification(
            train_data, val_data, reg_params, model_cfg, run_cfg,
            train_ds=train_ds, phases=phases,
        )
    save_checkpoint(out / "checkpoint.mosm", result.params)
    (out / "history.csv").write_text(history_to_csv(result.history), encoding="utf-8")
    write_snapshot(out, cfg)
    print(f"best validation loss: {result.best_val_loss}")
    print(f"restarts: {result.restarts}  diverged: {result.diverged}")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    params = load_checkpoint(args.checkpoint)
    train_data = SequenceData.from_dataset(load_manifest(args.train_manifest, split="train"))
    val_data = SequenceData.from_dataset(load_manifest(args.val_manifest, split="validation"))
    result = finetune(params, train_data, val_data, _train_config(cfg),
                      lr=cfg["finetune_lr"], batch_size=cfg["finetune_batch"])
    save_checkpoint(out / "finetuned.mosm", result.params)
    (out / "history.csv").write_text(history_to_csv(result.history), encoding="utf-8")
    write_snapshot(out, cfg)
    print(f"best validation loss: {result.best_val_loss}")
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    if not args.reg_checkpoint and not args.cls_checkpoint:
        raise InvalidInputError("predict needs --reg-checkpoint and/or --cls-checkpoint")
    ds = load_manifest(args.manifest, split="test")
    feats = [load_features(u) for u in ds.utterances]
    post = _post_config(cfg)
    reg_preds = cls_probs = None
    if args.reg_checkpoint:
        reg = load_checkpoint(args.reg_checkpoint)
        reg_preds = predict_sequences(reg, feats, batch_size=cfg["eval_batch"])
    if args.cls_checkpoint:
        cls = load_checkpoint(args.cls_checkpoint)
        cls_probs = predict_sequences(cls, feats, batch_size=cfg["eval_batch"])
    path = out / "predictions.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id", "system_id", "raw_regression", "raw_classification", "final"])
        for k, u in enumerate(ds.utterances):
            reg_val = None if reg_preds is None else float(reg_preds[k])
            probs = None if cls_probs is None else cls_probs[k]
            final = pipeline(reg_val, probs, post)
            cls_val = "" if probs is None else repr(decode_classification(probs, post.decode))
            w.writerow([u.id, u.system_id,
                        "" if reg_val is None else repr(reg_val), cls_val, repr(final)])
    write_snapshot(out, cfg)
    print(f"wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ds = load_manifest(args.manifest, split="test")
    predictions = {}
    with open(args.predictions, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        if "utterance_id" not in fields or args.column not in fields:
            raise FormatError(
                f"predictions file needs columns 'utterance_id' and {args.column!r}",
                args.predictions,
            )
        for row_no, row in enumerate(reader, start=2):
            try:
                predictions[row["utterance_id"]] = float(row[args.column])
            except (TypeError, ValueError):
                raise FormatError(
                    f"row {row_no}: bad {args.column!r} value {row[args.column]!r}",
                    args.predictions,
                )
    report = evaluate(predictions, ds)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    write_snapshot(out, cfg)
    print(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--out", default="out", help="output directory")
    for key in CONFIG_SPEC:
        sub.add_argument(f"--{key}", metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moskit", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("stats", parents=[], help="dataset statistics CSVs")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_stats)

    p = subs.add_parser("plan-batches", help="emit a batch plan as NDJSON")
    p.add_argument("--manifest", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_plan_batches)

    p = subs.add_parser("train", help="train the regression or classification model")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--head", choices=["regression", "classification"], default="regression")
    p.add_argument("--init-from", help="regression checkpoint for classification transfer")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("finetune", help="fine-tune a regression checkpoint on new data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_finetune)

    p = subs.add_parser("predict", help="write post-processed predictions CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reg-checkpoint")
    p.add_argument("--cls-checkpoint")
    _add_common(p)
    p.set_defaults(fn=cmd_predict)

    p = subs.add_parser("evaluate", help="score a predictions CSV against labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--column", default="final")
    _add_common(p)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MoskitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: ``structext gen-data|pretrain|finetune|eval|predict``.

Settings resolve in this order (later wins): defaults, ``--config`` file,
``STRUCTEXT_SEED``, explicit flags.  Exit codes: 0 success, 2 configuration
error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import CheckpointError
from .document import AnnotationError, LabelSchema, load_directory
from .downstream import DocPrediction
from .metrics import SCHEMA_VERSION, format_table
from .synthgen import GenConfig, LayoutOverflowError, generate, write_corpus
from .trainer import (
    FINETUNE_TASKS,
    ConfigError,
    DataError,
    Prepared,
    TrainConfig,
    load_bundle,
    predict,
    read_config_file,
    run,
    score_predictions,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
SEED_ENV = "STRUCTEXT_SEED"
SHORT_TASKS = {"segment": FINETUNE_TASKS[0], "token": FINETUNE_TASKS[1], "link": FINETUNE_TASKS[2]}

log = logging.getLogger("structext")


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _settings(args, flag_map: dict) -> dict:
    """Merge config file, environment seed and explicitly given flags."""
    out = read_config_file(args.config) if args.config else {}
    seed = _env_seed()
    if seed is not None:
        out["seed"] = seed
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def _emit(report: dict, out: Optional[str]) -> None:
    text = json.dumps(report, indent=1)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    print(format_table(report))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    s = _settings(args, {"seed": "seed", "rows": "rows", "page_size": "page_size", "noise": "noise",
                         "header_prob": "header_prob"})
    count = int(s.pop("count", args.count))
    test_count = s.pop("test_count", args.test_count)
    out = Path(s.pop("out", args.out))
    if "rows" in s and not isinstance(s["rows"], (list, tuple)):
        s["rows"] = (int(s["rows"]), int(s["rows"]))
    for key in ("rows", "distractors"):
        if key in s:
            s[key] = tuple(int(v) for v in s[key])
    try:
        config = GenConfig(**s)
    except TypeError as exc:
        raise ConfigError(f"gen-data: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    test_count = max(1, count // 5) if test_count is None else int(test_count)
    try:
        write_corpus(generate(config, count), out / "train")
        if test_count:
            write_corpus(generate(config, test_count, start=count), out / "test")
    except LayoutOverflowError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {count} training and {test_count} test pages to {out}")
    return EXIT_OK


TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "seed": "seed",
    "data": "data_dir",
    "checkpoint": "checkpoint",
    "init": "init_checkpoint",
    "peak_lr": "peak_lr",
    "optimizer": "optimizer",
    "max_docs": "max_docs",
}


def _train(args, task: str) -> int:
    s = _settings(args, TRAIN_FLAGS)
    s["task"] = task
    if getattr(args, "tasks", None):
        s["pretrain_tasks"] = args.tasks
    base = TrainConfig.from_dict(s)
    reports = []
    for r in range(args.repeat):
        config = TrainConfig.from_dict(dict(s, seed=base.seed + r))
        if args.repeat > 1:
            config.checkpoint = f"{base.checkpoint}/seed{config.seed}"
        result = run(config, max_steps=args.max_steps, log=log.info)
        reports.append(result.report)
    report = reports[0] if len(reports) == 1 else _aggregate(reports)
    summary = {"task": task, "best_epoch": report.get("best_epoch"), "test": report.get("test", {})}
    print(format_table(summary))
    return EXIT_OK


def _aggregate(reports: Sequence[dict]) -> dict:
    """Mean and standard deviation of numeric test metrics across repeated runs."""
    flat: dict[str, list[float]] = {}

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
            flat.setdefault(prefix, []).append(float(obj))

    for rep in reports:
        walk("", rep.get("test", {}))
    test = {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in flat.items()}
    return {"schema_version": SCHEMA_VERSION, "runs": len(reports), "test": test, "best_epoch": None}


def cmd_pretrain(args) -> int:
    return _train(args, "pretrain")


def cmd_finetune(args) -> int:
    return _train(args, SHORT_TASKS[args.task])


def _checkpoint_tasks(checkpoint: str, requested: Optional[str]) -> tuple[str, ...]:
    if requested:
        return tuple(SHORT_TASKS[t] for t in requested.split(","))
    manifest = json.loads((Path(checkpoint) / "manifest.json").read_text())
    task = manifest.get("meta", {}).get("task")
    return (task,) if task in FINETUNE_TASKS else FINETUNE_TASKS


def cmd_predict(args) -> int:
    bundle = load_bundle(args.checkpoint)
    docs = _load_docs(args.data, bundle.model.config.image_size)
    tasks = _checkpoint_tasks(args.checkpoint, args.tasks)
    preds = predict(bundle, Prepared(docs, bundle.model.vocab, bundle.model.config), threshold=args.threshold, tasks=tasks)
    dump = {"schema_version": SCHEMA_VERSION, "schema": bundle.schema.to_json(),
            "documents": [p.to_json(bundle.schema) for p in preds]}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(dump, indent=1))
    print(f"wrote predictions for {len(preds)} documents to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.predictions:
        try:
            dump = json.loads(Path(args.predictions).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read predictions {args.predictions}: {exc}") from exc
        schema = LabelSchema.from_json(dump["schema"])
        preds = [DocPrediction.from_json(d, schema) for d in dump["documents"]]
        docs = _load_docs(args.data, None)
    elif args.checkpoint:
        bundle = load_bundle(args.checkpoint)
        schema = bundle.schema
        docs = _load_docs(args.data, bundle.model.config.image_size)
        tasks = _checkpoint_tasks(args.checkpoint, args.tasks)
        preds = predict(bundle, Prepared(docs, bundle.model.vocab, bundle.model.config), threshold=args.threshold, tasks=tasks)
    else:
        raise ConfigError("eval needs --predictions or --checkpoint")
    report = {"schema_version": SCHEMA_VERSION, **score_predictions(preds, docs, schema)}
    _emit(report, args.out)
    return EXIT_OK


def _load_docs(path: str, size: Optional[int]):
    root = Path(path)
    if (root / "test").is_dir():
        root = root / "test"
    try:
        return load_directory(root, size)
    except AnnotationError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="structext", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic form corpus")
    g.add_argument("--config")
    g.add_argument("--out", default="data")
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--test-count", type=int, default=None, help="held-out pages (default count/5)")
    g.add_argument("--seed", type=int)
    g.add_argument("--rows", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--page-size", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--header-prob", type=float)
    g.set_defaults(func=cmd_gen_data)

    def train_args(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", help="data directory (train/ and optional test/)")
        sp.add_argument("--checkpoint", help="output checkpoint directory")
        sp.add_argument("--init", help="checkpoint to initialise from")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--peak-lr", type=float)
        sp.add_argument("--optimizer", choices=("adam", "adamax"))
        sp.add_argument("--max-docs", type=int)
        sp.add_argument("--max-steps", type=int, help="stop after this many optimiser steps")
        sp.add_argument("--repeat", type=int, default=1, help="repeat with seeds seed..seed+N-1 and report mean/std")

    pt = sub.add_parser("pretrain", help="self-supervised pretraining")
    train_args(pt)
    pt.add_argument("--tasks", help="comma-separated subset of mvlm,slp,pbd")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="train a labeling or linking head")
    train_args(ft)
    ft.add_argument("--task", choices=sorted(SHORT_TASKS), required=True)
    ft.set_defaults(func=cmd_finetune)

    for name, func, text in (("predict", cmd_predict, "dump predictions as JSON"),
                             ("eval", cmd_eval, "score predictions against gold annotations")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--checkpoint", required=name == "predict")
        sp.add_argument("--data", required=True)
        sp.add_argument("--tasks", help="comma-separated subset of segment,token,link")
        sp.add_argument("--threshold", type=float, default=0.5)
        sp.add_argument("--out", required=name == "predict", help="output JSON path")
        if name == "eval":
            sp.add_argument("--predictions", help="prediction dump written by predict")
        sp.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, AnnotationError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Optimisation loop, learning-rate schedule, configuration and task runners."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import CheckpointError, ParameterStore, Tape, Tensor, load_into, ops, read_checkpoint, save_checkpoint
from .document import AnnotationError, Document, LabelSchema, load_directory
from .downstream import (
    DocPrediction,
    DownstreamHeads,
    argmax_labels,
    batch_link_loss,
    link_matrix,
    segment_features,
    segment_targets,
    token_targets,
    word_predictions,
)
from .embedder import ModelConfig, build_input
from .metrics import SCHEMA_VERSION, RankingCounts, entity_f1, label_summary, link_f1
from .model import Batch, DocumentModel
from .pretrain import TASKS, PretrainHeads, evaluate_pretrain, pretrain_step_loss
from .tokenizer import Vocab, build_vocab

logger = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE_TASKS = ("finetune-label-segment", "finetune-label-token", "finetune-link")
ALL_TASKS = (PRETRAIN,) + FINETUNE_TASKS
VOCAB_FILE = "vocab.txt"
REPORT_FILE = "report.json"
# linking converges more slowly than labeling on the synthetic forms
DEFAULT_EPOCHS = {"finetune-link": 15}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Missing or unreadable data or checkpoints (CLI exit code 3)."""


# ---------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    task: str = PRETRAIN
    epochs: Optional[int] = None  # None = per-task default (5, or 15 for linking)
    batch_size: int = 4
    warmup_lr: float = 1e-4
    peak_lr: float = 2e-3
    warmup_epochs: float = 1.0
    hold_epochs: float = 1.0
    optimizer: str = "adam"
    grad_clip: float = 1.0
    seed: int = 7
    data_dir: str = "data"
    val_fraction: float = 0.1
    checkpoint: str = "runs/model"
    init_checkpoint: Optional[str] = None
    pretrain_tasks: tuple[str, ...] = TASKS
    margin: float = 0.2
    threshold: float = 0.5
    max_docs: int = 0  # 0 = use every training document
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs is None and self.task in ALL_TASKS:
            self.epochs = DEFAULT_EPOCHS.get(self.task, 5)
        self.validate()

    def validate(self) -> None:
        if self.task not in ALL_TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(ALL_TASKS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.peak_lr < self.warmup_lr or self.warmup_lr < 0:
            raise ConfigError(f"need 0 <= warmup_lr <= peak_lr, got {self.warmup_lr} and {self.peak_lr}")
        if self.warmup_epochs < 0 or self.hold_epochs < 0:
            raise ConfigError("warmup_epochs and hold_epochs must be >= 0")
        if self.optimizer not in ("adam", "adamax"):
            raise ConfigError(f"optimizer must be adam or adamax, got {self.optimizer!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        unknown = set(self.pretrain_tasks) - set(TASKS)
        if unknown or not self.pretrain_tasks:
            raise ConfigError(f"pretrain_tasks must be a non-empty subset of {TASKS}")

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_json()
        d["pretrain_tasks"] = list(self.pretrain_tasks)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        model = dict(obj.pop("model", {}) or {})
        for key in [k for k in obj if k.startswith("model.")]:
            model[key[len("model."):]] = obj.pop(key)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "pretrain_tasks" in obj:
            tasks = obj["pretrain_tasks"]
            obj["pretrain_tasks"] = tuple(tasks.split(",") if isinstance(tasks, str) else tasks)
        try:
            obj["model"] = ModelConfig.from_json(model)
            for f in dataclasses.fields(cls):
                kind = str(f.type).removeprefix("Optional[").removesuffix("]")
                if f.name in obj and kind in ("int", "float", "str") and obj[f.name] is not None:
                    obj[f.name] = {"int": int, "float": float, "str": str}[kind](obj[f.name])
            return cls(**obj)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments, JSON-decoded values)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return obj
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


# ---------------------------------------------------------------- optimisation


def lr_at(epoch: int, step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warm-up from warmup_lr to peak_lr, flat hold, then linear decay to 0 at the last epoch."""
    t = epoch + step / max(steps_per_epoch, 1)
    w, hold, total = config.warmup_epochs, config.hold_epochs, config.epochs
    if t < w:
        return config.warmup_lr + (config.peak_lr - config.warmup_lr) * t / w
    if t < w + hold or total <= w + hold:
        return config.peak_lr
    return config.peak_lr * max(0.0, (total - t) / (total - w - hold))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: ParameterStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    variant: str = "adam",
) -> None:
    """One bias-corrected Adam (or Adamax) update of every parameter that has a gradient."""
    for name, t in params.items():
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    k = state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.value)
            state.v[name] = np.zeros_like(t.value)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        if variant == "adamax":
            np.maximum(beta2 * v, np.abs(g), out=v)
            update = (lr / (1 - beta1**k)) * m / (v + eps)
        else:
            v *= beta2
            v += (1 - beta2) * g * g
            m_hat = m / (1 - beta1**k)
            v_hat = v / (1 - beta2**k)
            update = lr * m_hat / (np.sqrt(v_hat) + eps)
        new = (t.value - update).astype(t.dtype)
        new.flags.writeable = False
        t.value = new


def clip_gradients(params: ParameterStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [t.grad for _, t in params.items() if t.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    train: list[Document]
    val: list[Document]
    test: list[Document]


def load_data(config: TrainConfig) -> Dataset:
    """``data_dir/train`` (+ optional ``data_dir/test``), or a flat directory.

    The last ``val_fraction`` of the training pages is held out for model selection.
    """
    root = Path(config.data_dir)
    size = config.model.image_size
    try:
        if (root / "train").is_dir():
            train = load_directory(root / "train", size)
            test = load_directory(root / "test", size) if (root / "test").is_dir() else []
        else:
            train, test = load_directory(root, size), []
    except AnnotationError as exc:
        raise DataError(str(exc)) from exc
    if config.max_docs:
        train = train[: config.max_docs]
    n_val = int(round(len(train) * config.val_fraction))
    if n_val and len(train) - n_val >= 1:
        train, val = train[:-n_val], train[-n_val:]
    else:
        val = []
    return Dataset(train, val, test)


class Prepared:
    """Documents with their index arrays built once and reused across epochs."""

    def __init__(self, docs: Sequence[Document], vocab: Vocab, config: ModelConfig):
        self.docs = list(docs)
        self.inputs = [build_input(d, vocab, config) for d in self.docs]

    def __len__(self) -> int:
        return len(self.docs)

    def batches(self, size: int, order: Optional[np.ndarray] = None) -> list[Batch]:
        order = np.arange(len(self.docs)) if order is None else order
        out = []
        for s in range(0, len(order), size):
            idx = order[s : s + size]
            out.append(Batch([self.docs[i] for i in idx], [self.inputs[i] for i in idx]))
        return out


# ---------------------------------------------------------------- model bundle


@dataclass
class Bundle:
    model: DocumentModel
    pretrain_heads: PretrainHeads
    heads: DownstreamHeads
    schema: LabelSchema

    @property
    def params(self) -> ParameterStore:
        return self.model.params


def build_bundle(config: ModelConfig, vocab: Vocab, schema: LabelSchema, seed: int) -> Bundle:
    model = DocumentModel(config, vocab, seed)
    return Bundle(model, PretrainHeads(model.params, config), DownstreamHeads(model.params, config, len(schema.classes)), schema)


def save_bundle(bundle: Bundle, directory, meta: dict) -> None:
    directory = Path(directory)
    meta = dict(meta)
    meta["model"] = bundle.model.config.to_json()
    meta["schema"] = bundle.schema.to_json()
    # a pretraining run never touches the task heads, so they are not stored
    skip = ("head.",) if meta.get("task") == PRETRAIN else ()
    save_checkpoint(bundle.params, directory, meta, skip_prefixes=skip)
    bundle.model.vocab.save(directory / VOCAB_FILE)


def load_bundle(directory, seed: int = 0) -> Bundle:
    """Rebuild a bundle from a checkpoint directory (model config, schema and vocab included)."""
    directory = Path(directory)
    try:
        manifest, _ = read_checkpoint(directory)
        meta = manifest.get("meta", {})
        vocab = Vocab.load(directory / VOCAB_FILE)
    except (CheckpointError, OSError) as exc:
        raise DataError(f"cannot load checkpoint {directory}: {exc}") from exc
    config = ModelConfig.from_json(meta["model"]) if "model" in meta else ModelConfig()
    schema = LabelSchema.from_json(meta["schema"]) if "schema" in meta else LabelSchema()
    bundle = build_bundle(config, vocab, schema, seed)
    try:
        load_into(bundle.params, directory, strict=False)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    return bundle


# ---------------------------------------------------------------- task losses


def finetune_loss(bundle: Bundle, task: str, batch: Batch, rng, margin: float, dropout: bool = True) -> Optional[Tensor]:
    h = bundle.model.forward(batch, rng if dropout else None)
    feats = segment_features(h, batch)
    if task == "finetune-label-segment":
        return ops.softmax_cross_entropy(bundle.heads.segment_logits(feats.x), segment_targets(batch, feats))
    if task == "finetune-label-token":
        logits, rows = bundle.heads.token_logits(h, feats)
        return ops.softmax_cross_entropy(logits, token_targets(batch, rows))
    loss = batch_link_loss(feats.x, bundle.heads.m, batch, feats, rng, margin)
    return None if loss is None else loss.total


def predict(bundle: Bundle, prepared: Prepared, batch_size: int = 16, threshold: float = 0.5,
            tasks: Sequence[str] = FINETUNE_TASKS) -> list[DocPrediction]:
    """Deterministic (dropout-free) predictions for every document."""
    out = []
    for batch in prepared.batches(batch_size):
        h = bundle.model.forward(batch)
        feats = segment_features(h, batch)
        seg_pred = argmax_labels(bundle.heads.segment_logits(feats.x).value) if feats.indices else None
        words = None
        if "finetune-label-token" in tasks:
            logits, rows = bundle.heads.token_logits(h, feats)
            words = word_predictions(argmax_labels(logits.value), rows, batch, feats)
        x = feats.x.value
        m = bundle.heads.m.value
        for b, doc in enumerate(batch.docs):
            rows_b = feats.doc_rows(b)
            pred = DocPrediction(doc.id, feats.indices[b], threshold=threshold)
            if "finetune-label-segment" in tasks:
                pred.segment_labels = [int(c) for c in seg_pred[rows_b]]
            if words is not None:
                pred.token_labels = words[b]
            if "finetune-link" in tasks:
                pred.scores = link_matrix(x[rows_b], m)
            out.append(pred)
    return out


def score_predictions(preds: Sequence[DocPrediction], docs: Sequence[Document], schema: LabelSchema) -> dict:
    """Metrics of predictions against gold documents (matched by id)."""
    gold = {d.id: d for d in docs}
    report: dict = {}
    seg_p, seg_g, tok_p, tok_g = [], [], [], []
    ranking = RankingCounts()
    link_pred, link_gold = set(), set()
    has_links = False
    for pred in preds:
        doc = gold.get(pred.doc_id)
        if doc is None:
            raise DataError(f"prediction for unknown document {pred.doc_id!r}")
        if pred.segment_labels is not None:
            seg_p.append(pred.segment_labels)
            seg_g.append([doc.segment(i).label for i in pred.segments])
        if pred.token_labels is not None:
            for idx, words in zip(pred.segments, pred.token_labels):
                tok_p.append(words)
                tok_g.append(list(doc.segment(idx).token_labels or [None] * len(words)))
        if pred.scores is not None:
            has_links = True
            where = {idx: k for k, idx in enumerate(pred.segments)}
            gold_links = [(i, j) for i, j in doc.links if i in where and j in where]
            ranking.add(pred.scores, [(where[i], where[j]) for i, j in gold_links])
            link_gold |= {(doc.id, i, j) for i, j in gold_links}
            link_pred |= {(doc.id, i, j) for i, j, _ in pred.links}
    if seg_p:
        report["segment"] = label_summary(entity_f1(seg_p, seg_g, schema))
    if tok_p:
        report["token"] = label_summary(entity_f1(tok_p, tok_g, schema))
    if has_links:
        p, r, f = link_f1(link_pred, link_gold)
        report["link"] = dict(ranking.report(), precision=p, recall=r, f1=f)
    return report


def selection_metric(task: str, val: dict) -> float:
    """Higher is better; used to keep the best checkpoint."""
    if task == PRETRAIN:
        return val["slp_accuracy"] + val["pbd_accuracy"] - val["mvlm_loss"]
    if task == "finetune-label-segment":
        return val["segment"]["f1"]
    if task == "finetune-label-token":
        return val["token"]["f1"]
    link = val["link"]
    return link.get("hit@1", 0.0) + link["f1"]


# ---------------------------------------------------------------- runner


@dataclass
class RunResult:
    report: dict
    losses: list[float]
    bundle: Bundle


def _evaluate(bundle: Bundle, config: TrainConfig, prepared: Prepared) -> dict:
    if config.task == PRETRAIN:
        return evaluate_pretrain(bundle.model, bundle.pretrain_heads, prepared.batches(16), seed=config.seed)
    preds = predict(bundle, prepared, threshold=config.threshold, tasks=(config.task,))
    return score_predictions(preds, prepared.docs, bundle.schema)


def run(config: TrainConfig, max_steps: Optional[int] = None, log: Callable[[str], None] = logger.info) -> RunResult:
    """Train one task end to end; writes the best-by-validation checkpoint and a report."""
    started = time.perf_counter()
    data = load_data(config)
    if not data.train:
        raise DataError(f"no training documents under {config.data_dir}")
    schema = data.train[0].schema

    if config.init_checkpoint:
        init = Path(config.init_checkpoint)
        try:
            vocab = Vocab.load(init / VOCAB_FILE)
        except OSError as exc:
            raise DataError(f"cannot read vocabulary of {init}: {exc}") from exc
    else:
        corpus = [s.text for d in data.train for s in d.segments]
        vocab = build_vocab(corpus, config.model.vocab_size)
    bundle = build_bundle(config.model, vocab, schema, config.seed)
    fresh: list[str] = []
    if config.init_checkpoint:
        try:
            fresh = load_into(bundle.params, config.init_checkpoint, strict=False)
        except CheckpointError as exc:
            raise DataError(f"incompatible checkpoint {config.init_checkpoint}: {exc}") from exc
        log(f"loaded {config.init_checkpoint}; fresh parameters: {', '.join(fresh) or 'none'}")

    train = Prepared(data.train, vocab, config.model)
    val = Prepared(data.val, vocab, config.model) if data.val else None
    test = Prepared(data.test, vocab, config.model) if data.test else None

    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    losses: list[float] = []
    history = []
    best = -math.inf
    best_epoch = -1
    out_dir = Path(config.checkpoint)
    step_count = 0
    initial = _evaluate(bundle, config, test or val) if (test or val) and config.task == PRETRAIN else None

    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_losses = []
        for step, batch in enumerate(train.batches(config.batch_size, order)):
            bundle.params.zero_grad()
            with Tape():
                if config.task == PRETRAIN:
                    loss = pretrain_step_loss(bundle.model, bundle.pretrain_heads, batch, rng, config.pretrain_tasks).total
                else:
                    loss = finetune_loss(bundle, config.task, batch, rng, config.margin)
                if loss is None:
                    continue
                loss.backward()
            value = float(loss.value)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            if config.grad_clip > 0:
                clip_gradients(bundle.params, config.grad_clip)
            adam_step(bundle.params, state, lr_at(epoch, step, steps_per_epoch, config), variant=config.optimizer)
            losses.append(value)
            epoch_losses.append(value)
            step_count += 1
            if max_steps is not None and step_count >= max_steps:
                break
        entry = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None}
        if val is not None:
            entry["val"] = _evaluate(bundle, config, val)
            score = selection_metric(config.task, entry["val"])
        else:
            score = -entry["train_loss"] if entry["train_loss"] is not None else -math.inf
        history.append(entry)
        log(f"epoch {epoch}: {json.dumps(entry)}")
        if score > best:
            best, best_epoch = score, epoch
            save_bundle(bundle, out_dir, {"task": config.task, "epoch": epoch, "seed": config.seed})
        if max_steps is not None and step_count >= max_steps:
            break

    # report on the selected checkpoint
    if best_epoch >= 0:
        load_into(bundle.params, out_dir, strict=config.task != PRETRAIN)
    report = {
        "schema_version": SCHEMA_VERSION,
        "task": config.task,
        "config": config.to_json(),
        "fresh_parameters": fresh,
        "history": history,
        "best_epoch": best_epoch,
        "steps": step_count,
    }
    if initial is not None:
        report["initial"] = initial
    if test is not None:
        report["test"] = _evaluate(bundle, config, test)
    report["runtime_seconds"] = time.perf_counter() - started
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / REPORT_FILE).write_text(json.dumps(report, indent=1))
    return RunResult(report, losses, bundle)

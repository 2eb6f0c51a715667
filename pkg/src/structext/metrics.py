"""Entity precision / recall / F1 and link ranking metrics (Hit@k, mRank, mAP)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .document import LabelSchema

IGNORE = -100
K_LIST = (1, 2, 5)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1 with 0 for every undefined ratio."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


@dataclass
class LabelReport:
    per_class: dict[str, ClassScore]
    precision: float
    recall: float
    f1: float
    averaged: list[str]  # classes that entered the macro mean

    def to_json(self) -> dict:
        return asdict(self)


def _as_documents(seqs) -> list[Sequence[int]]:
    seqs = list(seqs)
    if seqs and np.isscalar(seqs[0]):
        return [seqs]
    return seqs


def entity_f1(pred, gold, schema: LabelSchema) -> LabelReport:
    """Per-class scores over labelled units (segments or words) and their macro mean.

    ``pred`` and ``gold`` are label-id sequences, either flat or one per document.
    The mean skips the schema's background class and any class with neither gold
    nor predicted units.  Gold units equal to IGNORE (or None) are not counted.
    """
    pred_docs, gold_docs = _as_documents(pred), _as_documents(gold)
    if len(pred_docs) != len(gold_docs):
        raise ValueError(f"{len(pred_docs)} predicted documents vs {len(gold_docs)} gold documents")
    n = len(schema.classes)
    tp, fp, fn = np.zeros(n, int), np.zeros(n, int), np.zeros(n, int)
    for d, (p_seq, g_seq) in enumerate(zip(pred_docs, gold_docs)):
        if len(p_seq) != len(g_seq):
            raise ValueError(f"document {d}: {len(p_seq)} predicted labels vs {len(g_seq)} gold labels")
        for p, g in zip(p_seq, g_seq):
            if g is None or g == IGNORE:
                continue
            if p == g:
                tp[g] += 1
            else:
                fn[g] += 1
                fp[p] += 1
    per_class, averaged = {}, []
    bg = schema.background_id
    sums = np.zeros(3)
    for c, name in enumerate(schema.classes):
        p, r, f = prf(int(tp[c]), int(fp[c]), int(fn[c]))
        support, predicted = int(tp[c] + fn[c]), int(tp[c] + fp[c])
        per_class[name] = ClassScore(p, r, f, support, predicted)
        if c != bg and (support or predicted):
            averaged.append(name)
            sums += (p, r, f)
    k = max(len(averaged), 1)
    return LabelReport(per_class, sums[0] / k, sums[1] / k, sums[2] / k, averaged)


# ---------------------------------------------------------------- linking


def rank_sources(prob: np.ndarray, target: int) -> list[int]:
    """Candidate sources i != target ordered by P[i, target] descending, ties to lower i."""
    n = prob.shape[0]
    cands = [i for i in range(n) if i != target]
    return sorted(cands, key=lambda i: (-prob[i, target], i))


def average_precision(ranking: Sequence[int], relevant: set) -> float:
    hits, total = 0, 0.0
    for r, i in enumerate(ranking, start=1):
        if i in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant) if relevant else 0.0


@dataclass
class RankingCounts:
    """Running totals so documents can be pooled: Hit@k and mRank average over gold
    (source, target) pairs, mAP averages over targets."""

    ks: tuple[int, ...] = K_LIST
    pairs: int = 0
    targets: int = 0
    rank_sum: float = 0.0
    ap_sum: float = 0.0
    hits: dict = field(default_factory=dict)

    def add(self, prob: np.ndarray, gold: Iterable[tuple[int, int]]) -> None:
        """``gold`` holds (source, target) positions into ``prob``."""
        by_target: dict[int, set] = {}
        for i, j in gold:
            by_target.setdefault(int(j), set()).add(int(i))
        for j in sorted(by_target):
            ranking = rank_sources(prob, j)
            sources = by_target[j]
            self.targets += 1
            self.ap_sum += average_precision(ranking, sources)
            for i in sources:
                r = ranking.index(i) + 1
                self.pairs += 1
                self.rank_sum += r
                for k in self.ks:
                    self.hits[k] = self.hits.get(k, 0) + int(r <= k)

    def report(self) -> dict:
        if not self.pairs:
            return {}
        out = {f"hit@{k}": self.hits.get(k, 0) / self.pairs for k in self.ks}
        out["mrank"] = self.rank_sum / self.pairs
        out["map"] = self.ap_sum / self.targets
        out["gold_pairs"] = self.pairs
        return out


def link_ranking(prob: np.ndarray, gold: Iterable[tuple[int, int]], ks: Sequence[int] = K_LIST) -> dict:
    """Ranking metrics for one probability matrix; empty dict when there is no gold link."""
    acc = RankingCounts(tuple(ks))
    acc.add(np.asarray(prob, dtype=np.float64), gold)
    return acc.report()


def link_f1(pred: Iterable, gold: Iterable) -> tuple[float, float, float]:
    """Set precision / recall / F1 over ordered pairs (any hashable pair keys)."""
    pred, gold = set(pred), set(gold)
    tp = len(pred & gold)
    return prf(tp, len(pred) - tp, len(gold) - tp)


# ---------------------------------------------------------------- reports

SCHEMA_VERSION = 1


def format_table(report: dict) -> str:
    """Aligned two-column text rendering of a flat or one-level nested report."""
    rows = []

    def walk(prefix: str, obj) -> None:
        if isinstance(obj, dict):
            for k, v in obj.items():
                walk(f"{prefix}.{k}" if prefix else str(k), v)
        elif isinstance(obj, float):
            rows.append((prefix, f"{obj:.4f}"))
        elif isinstance(obj, list):
            rows.append((prefix, ", ".join(str(v) for v in obj)))
        else:
            rows.append((prefix, str(obj)))

    walk("", report)
    if not rows:
        return ""
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def label_summary(report: LabelReport) -> dict:
    out = {"precision": float(report.precision), "recall": float(report.recall), "f1": float(report.f1)}
    for name, score in report.per_class.items():
        out[f"{name}_f1"] = score.f1
    return out

"""Fine-tuning heads: segment labeling, token labeling and directed entity linking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, ops
from .document import Document
from .embedder import ModelConfig
from .model import Batch

logger = logging.getLogger(__name__)

IGNORE = -100
MARGIN = 0.2
THRESHOLD = 0.5


# ---------------------------------------------------------------- features


def pool_segment_text(h: Tensor, groups: Sequence[np.ndarray]) -> Tensor:
    """Mean of the rows of ``h`` listed in each group -> [len(groups), d].

    Implemented as a product with a constant averaging matrix so the whole batch
    pools in one op.
    """
    avg = np.zeros((len(groups), h.shape[0]), dtype=h.dtype)
    for k, rows in enumerate(groups):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            raise ValueError(f"segment group {k} has no tokens")
        np.add.at(avg[k], rows, 1.0 / rows.size)
    return ops.matmul(Tensor(avg), h)


def fuse(v: Tensor, t: Tensor) -> Tensor:
    """Hadamard product of encoded visual and pooled textual segment features."""
    return ops.mul(v, t)


@dataclass
class SegmentFeatures:
    x: Tensor  # [S, d] fused features of all included segments in the batch
    v: Tensor  # [S, d] encoded visual features V1..Vn
    offsets: list[int]  # first row of each document in x
    indices: list[tuple[int, ...]]  # included segment indices per document
    visual_rows: np.ndarray  # flat encoder row of each included segment's visual slot
    token_rows: list[np.ndarray] = field(default_factory=list)  # encoder rows per included segment

    def doc_rows(self, b: int) -> np.ndarray:
        return np.arange(self.offsets[b], self.offsets[b] + len(self.indices[b]))


def segment_features(h: Tensor, batch: Batch) -> SegmentFeatures:
    """Fused features for every segment that kept at least one token."""
    groups, vrows, offsets, indices = [], [], [], []
    for b, a in enumerate(batch.inputs):
        offsets.append(len(groups))
        kept = []
        for k, idx in enumerate(a.segment_indices):
            pos = a.positions_of(idx)
            if pos.size == 0:
                logger.warning("document %s: segment %d has no tokens, excluded", a.doc_id, idx)
                continue
            groups.append(batch.flat(b, pos))
            vrows.append(batch.flat(b, a.visual_positions[k + 1]))
            kept.append(idx)
        indices.append(tuple(kept))
    vrows = np.asarray(vrows, dtype=np.int64)
    if not groups:
        empty = Tensor(np.zeros((0, h.shape[1])))
        return SegmentFeatures(empty, empty, offsets, indices, vrows, [])
    t = pool_segment_text(h, groups)
    v = ops.gather_rows(h, vrows)
    return SegmentFeatures(fuse(v, t), v, offsets, indices, vrows, groups)


# ---------------------------------------------------------------- heads


class DownstreamHeads:
    """Segment classifier, token classifier and the asymmetric link matrix M."""

    def __init__(self, params: ParameterStore, config: ModelConfig, n_classes: int):
        d = config.hidden
        self.params = params
        self.n_classes = n_classes
        params.glorot("head.segment.w", d, n_classes)
        params.zeros("head.segment.b", (n_classes,))
        params.glorot("head.token.w", d, n_classes)
        params.zeros("head.token.b", (n_classes,))
        params.glorot("head.link.m", d, d)

    def segment_logits(self, x: Tensor) -> Tensor:
        return label_segments(x, self.params["head.segment.w"], self.params["head.segment.b"])

    def token_logits(self, h: Tensor, feats: SegmentFeatures) -> tuple[Tensor, np.ndarray]:
        return label_tokens(h, feats, self.params["head.token.w"], self.params["head.token.b"])

    @property
    def m(self) -> Tensor:
        return self.params["head.link.m"]


def label_segments(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ops.linear(x, weight, bias)


def label_tokens(h: Tensor, feats: SegmentFeatures, weight: Tensor, bias: Tensor) -> tuple[Tensor, np.ndarray]:
    """Logits for every token of every included segment from V_i * c_token.

    Returns the logits and the flat encoder row of each logit row.
    """
    if not feats.token_rows:
        return Tensor(np.zeros((0, weight.shape[1]))), np.zeros(0, np.int64)
    rows = np.concatenate(feats.token_rows)
    owner = np.repeat(np.arange(len(feats.token_rows)), [r.size for r in feats.token_rows])
    x = ops.mul(ops.gather_rows(feats.v, owner), ops.gather_rows(h, rows))
    return ops.linear(x, weight, bias), rows


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class id (numpy's first-max rule)."""
    return np.asarray(logits).argmax(axis=1)


# ---------------------------------------------------------------- targets


def segment_targets(batch: Batch, feats: SegmentFeatures) -> np.ndarray:
    out = []
    for doc, idxs in zip(batch.docs, feats.indices):
        for idx in idxs:
            label = doc.segment(idx).label
            out.append(IGNORE if label is None else label)
    return np.asarray(out, dtype=np.int64)


def token_targets(batch: Batch, rows: np.ndarray) -> np.ndarray:
    """Word label of each token row (every subword inherits its word's label)."""
    out = np.full(rows.shape[0], IGNORE, dtype=np.int64)
    for k, r in enumerate(rows):
        b, pos = divmod(int(r), batch.inputs[0].length)
        a = batch.inputs[b]
        seg = batch.docs[b].segment(int(a.token_segment[pos]))
        word = int(a.token_word[pos])
        if seg.token_labels is not None and 0 <= word < len(seg.token_labels):
            out[k] = seg.token_labels[word]
    return out


# ---------------------------------------------------------------- linking


def link_probability(x_i, x_j, m) -> float:
    """P(i -> j) = sigmoid(x_j M x_i^T) for single feature vectors."""
    x_i, x_j, m = (np.asarray(v, dtype=np.float64) for v in (x_i, x_j, m))
    z = float(x_j @ m @ x_i)
    return float(1.0 / (1.0 + np.exp(-z)))


def link_scores(x: Tensor, m: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """Logits x_dst M x_src^T for each listed (src, dst) row pair -> [k]."""
    xj = ops.matmul(ops.gather_rows(x, dst), m)
    return ops.sum(ops.mul(xj, ops.gather_rows(x, src)), axis=1)


def link_matrix(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Probability matrix P[i, j] = P(i -> j), diagonal set to NaN."""
    z = (x @ m @ x.T).T
    p = 1.0 / (1.0 + np.exp(-z.astype(np.float64)))
    np.fill_diagonal(p, np.nan)
    return p


@dataclass
class LinkSampleSet:
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]


def build_link_samples(doc: Document, rng: np.random.Generator, indices: Optional[Sequence[int]] = None) -> Optional[LinkSampleSet]:
    """All gold links plus an equal number of uniformly drawn unlinked ordered pairs.

    ``indices`` restricts candidates to the segments that survived truncation.
    Returns None when the document has no usable gold link.
    """
    idx = list(indices) if indices is not None else [s.index for s in doc.segments]
    allowed = set(idx)
    positives = sorted((i, j) for i, j in doc.links if i in allowed and j in allowed)
    if not positives:
        return None
    gold = set(positives)
    pool = [(i, j) for i in idx for j in idx if i != j and (i, j) not in gold]
    k = min(len(positives), len(pool))
    chosen = rng.choice(len(pool), size=k, replace=False) if k else np.zeros(0, np.int64)
    negatives = [pool[int(c)] for c in chosen]
    order = rng.permutation(len(positives))
    return LinkSampleSet([positives[int(o)] for o in order], negatives)


def margin_ranking(p_pos: Tensor, p_neg: Tensor, margin: float = MARGIN) -> Tensor:
    """Mean of max(0, margin - (p_pos - p_neg)) over matched pairs."""
    if p_pos.shape[0] == 0:
        return Tensor(0.0)
    return ops.mean(ops.relu(ops.sub(margin, ops.sub(p_pos, p_neg))))


@dataclass
class LinkLoss:
    total: Tensor
    bce: Tensor
    rank: Tensor


def link_loss(
    pos_logits: Tensor, neg_logits: Tensor, margin: float = MARGIN, matched: Optional[np.ndarray] = None
) -> LinkLoss:
    """BCE over every sampled pair plus the hinge on matched (pos, neg) pairs.

    ``matched`` is a [k, 2] array of (positive row, negative row); by default the
    i-th positive is matched with the i-th negative.
    """
    n_pos, n_neg = pos_logits.shape[0], neg_logits.shape[0]
    logits = ops.concat([pos_logits, neg_logits], axis=0)
    targets = np.concatenate([np.ones(n_pos), np.zeros(n_neg)])
    bce = ops.bce_with_logits(logits, targets)
    if matched is None:
        m = min(n_pos, n_neg)
        matched = np.stack([np.arange(m), np.arange(m)], axis=1)
    matched = np.asarray(matched, dtype=np.int64).reshape(-1, 2)
    if matched.shape[0] == 0:
        rank = Tensor(0.0)
    else:
        k = matched.shape[0]
        probs = ops.reshape(ops.sigmoid(logits), (n_pos + n_neg, 1))
        p_pos = ops.reshape(ops.gather_rows(probs, matched[:, 0]), (k,))
        p_neg = ops.reshape(ops.gather_rows(probs, n_pos + matched[:, 1]), (k,))
        rank = margin_ranking(p_pos, p_neg, margin)
    return LinkLoss(bce + rank, bce, rank)


def batch_link_loss(
    x: Tensor, m: Tensor, batch: Batch, feats: SegmentFeatures, rng: np.random.Generator, margin: float = MARGIN
) -> Optional[LinkLoss]:
    pos, neg, matched = [], [], []
    for b, doc in enumerate(batch.docs):
        samples = build_link_samples(doc, rng, feats.indices[b])
        if samples is None:
            continue
        row = {idx: feats.offsets[b] + k for k, idx in enumerate(feats.indices[b])}
        # hinge pairs never cross documents
        for k in range(min(len(samples.positives), len(samples.negatives))):
            matched.append((len(pos) + k, len(neg) + k))
        pos.extend((row[i], row[j]) for i, j in samples.positives)
        neg.extend((row[i], row[j]) for i, j in samples.negatives)
    if not pos:
        return None
    pos = np.asarray(pos, dtype=np.int64)
    pos_logits = link_scores(x, m, pos[:, 0], pos[:, 1])
    if neg:
        neg = np.asarray(neg, dtype=np.int64)
        neg_logits = link_scores(x, m, neg[:, 0], neg[:, 1])
    else:
        neg_logits = Tensor(np.zeros(0))
    return link_loss(pos_logits, neg_logits, margin, np.asarray(matched, dtype=np.int64))


def predict_links(prob: np.ndarray, indices: Sequence[int], threshold: float = THRESHOLD) -> list[tuple[int, int, float]]:
    """Ordered pairs (i, j, p) with p = P(i -> j) strictly above ``threshold``."""
    n = len(indices)
    out = []
    if n < 2:
        return out
    for a in range(n):
        for b in range(n):
            if a != b and prob[a, b] > threshold:
                out.append((indices[a], indices[b], float(prob[a, b])))
    return out


# ---------------------------------------------------------------- predictions


@dataclass
class DocPrediction:
    doc_id: str
    segments: tuple[int, ...]
    segment_labels: Optional[list[int]] = None
    token_labels: Optional[list[list[int]]] = None  # per segment, per word
    scores: Optional[np.ndarray] = None  # P[i, j] over ``segments``
    threshold: float = THRESHOLD

    @property
    def links(self) -> list[tuple[int, int, float]]:
        if self.scores is None:
            return []
        return predict_links(self.scores, self.segments, self.threshold)

    def to_json(self, schema) -> dict:
        out: dict = {"id": self.doc_id, "segments": list(self.segments)}
        if self.segment_labels is not None:
            out["segment_labels"] = [schema.classes[c] for c in self.segment_labels]
        if self.token_labels is not None:
            out["token_labels"] = [[schema.classes[c] for c in seg] for seg in self.token_labels]
        if self.scores is not None:
            out["threshold"] = self.threshold
            out["links"] = [[i, j, p] for i, j, p in self.links]
            n = len(self.segments)
            out["scores"] = [
                [self.segments[a], self.segments[b], float(self.scores[a, b])]
                for a in range(n)
                for b in range(n)
                if a != b
            ]
        return out

    @classmethod
    def from_json(cls, obj: dict, schema) -> "DocPrediction":
        segs = tuple(int(i) for i in obj["segments"])
        pred = cls(obj["id"], segs, threshold=float(obj.get("threshold", THRESHOLD)))
        if "segment_labels" in obj:
            pred.segment_labels = [schema.id_of(c) for c in obj["segment_labels"]]
        if "token_labels" in obj:
            pred.token_labels = [[schema.id_of(c) for c in seg] for seg in obj["token_labels"]]
        if "scores" in obj:
            where = {idx: k for k, idx in enumerate(segs)}
            p = np.full((len(segs), len(segs)), np.nan)
            for i, j, v in obj["scores"]:
                p[where[int(i)], where[int(j)]] = float(v)
            pred.scores = p
        return pred


def word_predictions(token_pred: np.ndarray, rows: np.ndarray, batch: Batch, feats: SegmentFeatures) -> list[list[list[int]]]:
    """Per document, per included segment, the label predicted at each word's first subword."""
    L = batch.inputs[0].length
    at = {int(r): int(c) for r, c in zip(rows, token_pred)}
    out = []
    for b, idxs in enumerate(feats.indices):
        a = batch.inputs[b]
        doc_out = []
        for idx in idxs:
            pos = a.positions_of(idx)
            labels = [at[b * L + int(p)] for p in pos if a.first_subword_mask[p]]
            doc_out.append(labels)
        out.append(doc_out)
    return out

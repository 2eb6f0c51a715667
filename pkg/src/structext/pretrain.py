"""Self-supervised objectives: masked visual-language modelling, segment length
prediction and paired-box direction, plus their joint loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, ops
from .document import BBox
from .embedder import TEXT, AssembledInput, ModelConfig
from .model import Batch, DocumentModel
from .tokenizer import MASK_ID, RESERVED

IGNORE = -100
MASK, RANDOM, KEEP = 0, 1, 2
SELECT_RATE = 0.15
ACTION_PROBS = (0.8, 0.1, 0.1)
N_BUCKETS = 8
TASKS = ("mvlm", "slp", "pbd")


# ---------------------------------------------------------------- MVLM


@dataclass(frozen=True)
class MvlmPlan:
    positions: np.ndarray  # sequence positions of selected tokens
    actions: np.ndarray  # MASK / RANDOM / KEEP per position
    original_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.positions.shape[0])


def eligible_positions(inp: AssembledInput) -> np.ndarray:
    """Language tokens of real segments: never [CLS], [SEP], padding or visual slots."""
    return np.nonzero((inp.modality_ids == TEXT) & (inp.token_segment > 0))[0]


def build_mvlm_plan(
    inp: AssembledInput, rng: np.random.Generator, vocab_size: int, rate: float = SELECT_RATE
) -> tuple[MvlmPlan, AssembledInput]:
    """Select each eligible token with probability ``rate``; then mask / randomise / keep
    with probabilities 0.8 / 0.1 / 0.1.  Only token ids change in the corrupted copy."""
    eligible = eligible_positions(inp)
    chosen = eligible[rng.random(eligible.shape[0]) < rate]
    u = rng.random(chosen.shape[0])
    actions = np.where(u < ACTION_PROBS[0], MASK, np.where(u < ACTION_PROBS[0] + ACTION_PROBS[1], RANDOM, KEEP))
    original = inp.token_ids[chosen].copy()
    token_ids = inp.token_ids.copy()
    token_ids[chosen[actions == MASK]] = MASK_ID
    n_random = int((actions == RANDOM).sum())
    token_ids[chosen[actions == RANDOM]] = rng.integers(len(RESERVED), vocab_size, size=n_random)
    plan = MvlmPlan(chosen, actions, original)
    return plan, replace(inp, token_ids=token_ids, embeddings=None)


# ---------------------------------------------------------------- SLP


def slp_targets(inp: AssembledInput, max_classes: int = 64) -> np.ndarray:
    """Per kept segment: clamp(first-subword count, 1, max_classes) - 1; empty text -> IGNORE."""
    out = []
    for tok in inp.tokenized:
        count = tok.word_count
        out.append(IGNORE if count == 0 else min(max(count, 1), max_classes) - 1)
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------- PBD


@dataclass(frozen=True)
class PbdPair:
    i: int  # segment indices (1-based)
    j: int
    theta: float
    bucket: int


def bucket_of(theta_degrees: float) -> int:
    """Eight 45-degree buckets centred on E, NE, N, NW, W, SW, S, SE (0..7)."""
    return int(math.floor(((theta_degrees + 22.5) % 360.0) / 45.0)) % N_BUCKETS


def pair_angle(a: BBox, b: BBox) -> float:
    """Direction from a's centre to b's centre, degrees counter-clockwise with page-up positive."""
    (ax, ay), (bx, by) = a.center, b.center
    theta = math.degrees(math.atan2(ay - by, bx - ax))
    return theta % 360.0


def sample_pbd_pairs(segments, rng: np.random.Generator, k: Optional[int] = None) -> list[PbdPair]:
    """Up to ``k`` ordered pairs drawn uniformly without replacement (coincident centres skipped).

    ``segments`` is a sequence of TextSegment; default ``k = min(2n, n(n-1))``.
    """
    n = len(segments)
    if n < 2:
        return []
    total = n * (n - 1)
    k = min(2 * n, total) if k is None else min(k, total)
    flat = rng.choice(total, size=k, replace=False)
    pairs = []
    for f in flat:
        a, r = divmod(int(f), n - 1)
        b = r if r < a else r + 1
        si, sj = segments[a], segments[b]
        if si.bbox.center == sj.bbox.center:
            continue
        theta = pair_angle(si.bbox, sj.bbox)
        pairs.append(PbdPair(si.index, sj.index, theta, bucket_of(theta)))
    return pairs


def all_pbd_pairs(segments) -> list[PbdPair]:
    pairs = []
    for si in segments:
        for sj in segments:
            if si.index != sj.index and si.bbox.center != sj.bbox.center:
                theta = pair_angle(si.bbox, sj.bbox)
                pairs.append(PbdPair(si.index, sj.index, theta, bucket_of(theta)))
    return pairs


# ---------------------------------------------------------------- heads and losses


class PretrainHeads:
    def __init__(self, params: ParameterStore, config: ModelConfig):
        d = config.hidden
        self.params = params
        params.glorot("pretrain.mvlm.w", d, config.vocab_size)
        params.zeros("pretrain.mvlm.b", (config.vocab_size,))
        params.glorot("pretrain.slp.w", d, config.slp_classes)
        params.zeros("pretrain.slp.b", (config.slp_classes,))
        params.glorot("pretrain.pbd.w", d, N_BUCKETS)
        params.zeros("pretrain.pbd.b", (N_BUCKETS,))

    def logits(self, task: str, x: Tensor) -> Tensor:
        return ops.linear(x, self.params[f"pretrain.{task}.w"], self.params[f"pretrain.{task}.b"])


def _zero() -> Tensor:
    return Tensor(0.0)


def mvlm_loss(h: Tensor, batch: Batch, plans: Sequence[MvlmPlan], heads: PretrainHeads) -> Tensor:
    rows = np.concatenate([batch.flat(b, p.positions) for b, p in enumerate(plans)] or [np.zeros(0, np.int64)])
    if rows.size == 0:
        return _zero()
    targets = np.concatenate([p.original_ids for p in plans])
    return ops.softmax_cross_entropy(heads.logits("mvlm", ops.gather_rows(h, rows)), targets, IGNORE)


def slp_loss(h: Tensor, batch: Batch, targets: Sequence[np.ndarray], heads: PretrainHeads) -> Tensor:
    rows = np.concatenate([batch.flat(b, a.visual_positions[1:]) for b, a in enumerate(batch.inputs)])
    t = np.concatenate(targets) if targets else np.zeros(0, np.int64)
    if rows.size == 0 or np.all(t == IGNORE):
        return _zero()
    return ops.softmax_cross_entropy(heads.logits("slp", ops.gather_rows(h, rows)), t, IGNORE)


def pbd_rows(batch: Batch, pairs: Sequence[Sequence[PbdPair]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows_i, rows_j, buckets = [], [], []
    for b, (a, doc_pairs) in enumerate(zip(batch.inputs, pairs)):
        slot = {idx: a.visual_positions[k + 1] for k, idx in enumerate(a.segment_indices)}
        for p in doc_pairs:
            if p.i in slot and p.j in slot:
                rows_i.append(batch.flat(b, slot[p.i]))
                rows_j.append(batch.flat(b, slot[p.j]))
                buckets.append(p.bucket)
    return np.asarray(rows_i, np.int64), np.asarray(rows_j, np.int64), np.asarray(buckets, np.int64)


def pbd_delta(h: Tensor, rows_i: np.ndarray, rows_j: np.ndarray) -> Tensor:
    """Encoded visual feature difference V_i - V_j for each pair."""
    return ops.gather_rows(h, rows_i) - ops.gather_rows(h, rows_j)


def pbd_loss(h: Tensor, batch: Batch, pairs: Sequence[Sequence[PbdPair]], heads: PretrainHeads) -> Tensor:
    rows_i, rows_j, buckets = pbd_rows(batch, pairs)
    if rows_i.size == 0:
        return _zero()
    return ops.softmax_cross_entropy(heads.logits("pbd", pbd_delta(h, rows_i, rows_j)), buckets, IGNORE)


@dataclass
class PretrainLosses:
    total: Tensor
    mvlm: Tensor
    slp: Tensor
    pbd: Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).value) for k in ("total", "mvlm", "slp", "pbd")}


def pretrain_step_loss(
    model: DocumentModel,
    heads: PretrainHeads,
    batch: Batch,
    rng: np.random.Generator,
    tasks: Sequence[str] = TASKS,
    dropout: bool = True,
) -> PretrainLosses:
    """L = L_mvlm + L_slp + L_pbd with unit weights; tasks not listed contribute 0."""
    plans, corrupted = [], []
    for inp in batch.inputs:
        plan, c = build_mvlm_plan(inp, rng, model.config.vocab_size)
        plans.append(plan)
        corrupted.append(c)
    h = model.forward(batch.with_inputs(corrupted), rng if dropout else None)
    zero = _zero()
    l_mvlm = mvlm_loss(h, batch, plans, heads) if "mvlm" in tasks else zero
    if "slp" in tasks:
        l_slp = slp_loss(h, batch, [slp_targets(a, model.config.slp_classes) for a in batch.inputs], heads)
    else:
        l_slp = zero
    if "pbd" in tasks:
        pairs = [sample_pbd_pairs(_kept(d, a), rng) for d, a in zip(batch.docs, batch.inputs)]
        l_pbd = pbd_loss(h, batch, pairs, heads)
    else:
        l_pbd = zero
    return PretrainLosses(l_mvlm + l_slp + l_pbd, l_mvlm, l_slp, l_pbd)


def _kept(doc, inp: AssembledInput):
    kept = set(inp.segment_indices)
    return [s for s in doc.segments if s.index in kept]


def evaluate_pretrain(
    model: DocumentModel, heads: PretrainHeads, batches: Sequence[Batch], seed: int = 0
) -> dict:
    """Held-out MVLM loss, SLP accuracy and PBD accuracy (all ordered pairs)."""
    rng = np.random.default_rng(seed)
    mvlm_sum, mvlm_n = 0.0, 0
    slp_hit = slp_n = pbd_hit = pbd_n = 0
    for batch in batches:
        plans, corrupted = [], []
        for inp in batch.inputs:
            plan, c = build_mvlm_plan(inp, rng, model.config.vocab_size)
            plans.append(plan)
            corrupted.append(c)
        h = model.forward(batch.with_inputs(corrupted))
        n_sel = sum(len(p) for p in plans)
        if n_sel:
            mvlm_sum += float(mvlm_loss(h, batch, plans, heads).value) * n_sel
            mvlm_n += n_sel
        rows = np.concatenate([batch.flat(b, a.visual_positions[1:]) for b, a in enumerate(batch.inputs)])
        t = np.concatenate([slp_targets(a, model.config.slp_classes) for a in batch.inputs])
        if rows.size:
            pred = heads.logits("slp", ops.gather_rows(h, rows)).value.argmax(axis=1)
            keep = t != IGNORE
            slp_hit += int((pred[keep] == t[keep]).sum())
            slp_n += int(keep.sum())
        pairs = [all_pbd_pairs(_kept(d, a)) for d, a in zip(batch.docs, batch.inputs)]
        ri, rj, buckets = pbd_rows(batch, pairs)
        if ri.size:
            pred = heads.logits("pbd", pbd_delta(h, ri, rj)).value.argmax(axis=1)
            pbd_hit += int((pred == buckets).sum())
            pbd_n += int(buckets.size)
    return {
        "mvlm_loss": mvlm_sum / mvlm_n if mvlm_n else 0.0,
        "slp_accuracy": slp_hit / slp_n if slp_n else 0.0,
        "pbd_accuracy": pbd_hit / pbd_n if pbd_n else 0.0,
    }

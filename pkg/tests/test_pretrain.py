import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structext.autodiff import ParameterStore, Tape, Tensor, ops, precision
from structext.document import BBox, Document, TextSegment
from structext.embedder import ModelConfig, build_input
from structext.model import DocumentModel
from structext.pretrain import (
    IGNORE,
    KEEP,
    MASK,
    RANDOM,
    PretrainHeads,
    bucket_of,
    build_mvlm_plan,
    eligible_positions,
    mvlm_loss,
    pair_angle,
    pbd_delta,
    pbd_loss,
    pretrain_step_loss,
    sample_pbd_pairs,
    slp_loss,
    slp_targets,
)
from structext.synthgen import GenConfig, generate
from structext.tokenizer import MASK_ID, RESERVED, Vocab, build_vocab

VOCAB = Vocab(list(RESERVED) + ["total", "amount", "due", "aa", "bb", "cc", "dd"])
TINY = ModelConfig(vocab_size=16, hidden=8, layers=1, heads=2, ffn=16, max_len=24, image_size=64,
                   channels=(2, 2, 2), slp_classes=8)


def page(segments, size=64):
    segs = tuple(TextSegment(i + 1, BBox(*b), t) for i, (b, t) in enumerate(segments))
    return Document("p", np.full((size, size), 255, np.uint8), segs)


DOC = page([((2, 2, 30, 10), "total amount due"), ((40, 2, 60, 10), "aa bb"), ((2, 30, 20, 40), "cc")])


# ---------------------------------------------------------------- MVLM


def test_plan_touches_only_eligible_tokens():
    inp = build_input(DOC, VOCAB, TINY)
    plan, corrupted = build_mvlm_plan(inp, np.random.default_rng(0), 16, rate=1.0)
    assert set(plan.positions) == set(eligible_positions(inp)) == {1, 2, 3, 4, 5, 6}
    changed = np.nonzero(corrupted.token_ids != inp.token_ids)[0]
    assert set(changed) <= set(plan.positions)
    assert np.all(corrupted.token_ids[plan.positions[plan.actions == MASK]] == MASK_ID)
    assert np.array_equal(plan.original_ids, inp.token_ids[plan.positions])
    for field in ("layout", "segment_ids", "modality_ids"):
        assert np.array_equal(getattr(corrupted, field), getattr(inp, field))


def test_plan_is_deterministic_per_seed():
    inp = build_input(DOC, VOCAB, TINY)
    a, _ = build_mvlm_plan(inp, np.random.default_rng(5), 16, rate=0.5)
    b, _ = build_mvlm_plan(inp, np.random.default_rng(5), 16, rate=0.5)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.actions, b.actions)


def test_selection_and_action_rates():
    inp = build_input(DOC, VOCAB, TINY)
    rng = np.random.default_rng(1)
    picked, acts = 0, []
    for _ in range(4000):
        plan, _ = build_mvlm_plan(inp, rng, 16)
        picked += len(plan)
        acts.extend(plan.actions)
    assert abs(picked / (4000 * 6) - 0.15) < 0.01
    acts = np.asarray(acts)
    for code, p in ((MASK, 0.8), (RANDOM, 0.1), (KEEP, 0.1)):
        assert abs(np.mean(acts == code) - p) < 0.03


def _heads_zeroed(seed=0, cfg=TINY):
    model = DocumentModel(cfg, VOCAB, seed)
    heads = PretrainHeads(model.params, cfg)
    for task in ("mvlm", "slp", "pbd"):
        w = model.params[f"pretrain.{task}.w"]
        model.params.set_value(f"pretrain.{task}.w", np.zeros(w.shape))
    return model, heads


def test_uniform_logits_give_log_class_count():
    model, heads = _heads_zeroed()
    batch = model.prepare([DOC])
    plan, corrupted = build_mvlm_plan(batch.inputs[0], np.random.default_rng(0), 16, rate=1.0)
    h = model.forward(batch.with_inputs([corrupted]))
    assert float(mvlm_loss(h, batch, [plan], heads).value) == pytest.approx(math.log(16), abs=1e-5)
    assert float(slp_loss(h, batch, [slp_targets(batch.inputs[0], 8)], heads).value) == pytest.approx(math.log(8), abs=1e-5)
    pairs = [sample_pbd_pairs(DOC.segments, np.random.default_rng(0))]
    assert float(pbd_loss(h, batch, pairs, heads).value) == pytest.approx(math.log(8), abs=1e-5)


def test_empty_plan_and_all_ignored_give_zero():
    model, heads = _heads_zeroed()
    batch = model.prepare([DOC])
    plan, _ = build_mvlm_plan(batch.inputs[0], np.random.default_rng(0), 16, rate=0.0)
    h = model.forward(batch)
    assert float(mvlm_loss(h, batch, [plan], heads).value) == 0.0
    assert float(slp_loss(h, batch, [np.full(3, IGNORE)], heads).value) == 0.0


def test_forced_logits_give_near_zero_loss():
    with precision(np.float64):
        logits = Tensor(np.where(np.eye(16)[[7]] > 0, 50.0, 0.0))
        assert float(ops.softmax_cross_entropy(logits, [7]).value) < 1e-12


# ---------------------------------------------------------------- SLP


def test_slp_targets():
    inp = build_input(DOC, VOCAB, TINY)
    assert slp_targets(inp, 64).tolist() == [2, 1, 0]
    long_doc = page([((0, 0, 60, 8), " ".join(["aa"] * 70)), ((0, 20, 10, 28), "")])
    inp = build_input(long_doc, VOCAB, ModelConfig(max_len=100))
    assert slp_targets(inp, 64).tolist() == [63, IGNORE]


def test_slp_counts_words_not_subwords():
    vocab = build_vocab(["total due"], 40)
    doc = page([((0, 0, 60, 8), "totally 38.20")])
    inp = build_input(doc, vocab, TINY)
    assert len(inp.tokenized[0]) > 2
    assert slp_targets(inp, 64).tolist() == [1]


# ---------------------------------------------------------------- PBD


def test_bucket_examples():
    assert bucket_of(0.0) == 0
    assert bucket_of(90.0) == 2
    assert bucket_of(22.4) == 0 and bucket_of(22.5) == 1
    assert bucket_of(337.5) == 0 and bucket_of(337.4) == 7
    origin, se = BBox(49, 49, 51, 51), BBox(59, 59, 61, 61)
    assert pair_angle(origin, se) == pytest.approx(315.0)
    assert bucket_of(pair_angle(origin, se)) == 7
    above = BBox(49, 29, 51, 31)
    assert bucket_of(pair_angle(origin, above)) == 2


@settings(max_examples=200, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-500, 500), st.floats(-500, 500))
def test_bucket_antisymmetry(ax, ay, bx, by):
    a = BBox(ax + 500, ay + 500, ax + 501, ay + 501)
    b = BBox(bx + 500, by + 500, bx + 501, by + 501)
    if a.center == b.center:
        return
    t_ab, t_ba = pair_angle(a, b), pair_angle(b, a)
    # exact boundary hits can fall either way after floating point rounding
    if min(abs(((t_ab + 22.5) % 45.0)), abs(45.0 - ((t_ab + 22.5) % 45.0))) < 1e-9:
        return
    assert (bucket_of(t_ab) + 4) % 8 == bucket_of(t_ba)


def test_sample_pairs_small_cases():
    two = page([((0, 0, 10, 10), "aa"), ((30, 0, 40, 10), "bb")])
    pairs = sample_pbd_pairs(two.segments, np.random.default_rng(0), k=2)
    assert {(p.i, p.j) for p in pairs} == {(1, 2), (2, 1)}
    b = {(p.i, p.j): p.bucket for p in pairs}
    assert b[(1, 2)] == 0 and b[(2, 1)] == 4
    assert sample_pbd_pairs(two.segments[:1], np.random.default_rng(0)) == []
    # default K = min(2n, n(n-1)), no repeats
    pairs = sample_pbd_pairs(DOC.segments, np.random.default_rng(3))
    assert len(pairs) == 6 and len({(p.i, p.j) for p in pairs}) == 6


def test_pbd_delta_antisymmetry_and_equal_features():
    with precision(np.float64):
        h = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
        d_ij = pbd_delta(h, np.array([1, 3]), np.array([2, 4])).value
        d_ji = pbd_delta(h, np.array([2, 4]), np.array([1, 3])).value
        assert np.array_equal(d_ij, -d_ji)
        assert np.all(pbd_delta(h, np.array([2]), np.array([2])).value == 0)


# ---------------------------------------------------------------- total loss


def test_step_loss_is_sum_of_parts_and_respects_task_subset():
    model = DocumentModel(TINY, VOCAB, 0)
    heads = PretrainHeads(model.params, TINY)
    batch = model.prepare([DOC])
    full = pretrain_step_loss(model, heads, batch, np.random.default_rng(2), dropout=False)
    parts = full.as_floats()
    assert parts["total"] == pytest.approx(parts["mvlm"] + parts["slp"] + parts["pbd"], rel=1e-6)
    only = pretrain_step_loss(model, heads, batch, np.random.default_rng(2), tasks=("mvlm",), dropout=False)
    assert only.as_floats()["slp"] == 0.0 and only.as_floats()["pbd"] == 0.0
    assert only.as_floats()["mvlm"] == pytest.approx(parts["mvlm"], rel=1e-6)


def test_loss_halves_after_training():
    from structext.trainer import AdamState, adam_step

    docs = generate(GenConfig(seed=3), 64)
    vocab = build_vocab([s.text for d in docs for s in d.segments], 256)
    cfg = ModelConfig(vocab_size=256, hidden=32, heads=2, ffn=64, max_len=96)
    model = DocumentModel(cfg, vocab, 0)
    heads = PretrainHeads(model.params, cfg)
    batches = [model.prepare(docs[i:i + 8]) for i in range(0, 64, 8)]
    rng = np.random.default_rng(0)
    state = AdamState()
    first = None
    recent = []
    for step in range(200):
        model.params.zero_grad()
        with Tape() as tape:
            loss = pretrain_step_loss(model, heads, batches[step % 8], rng).total
        tape.backward(loss)
        adam_step(model.params, state, 3e-3)
        first = float(loss.value) if first is None else first
        recent.append(float(loss.value))
    assert np.mean(recent[-8:]) < 0.5 * first

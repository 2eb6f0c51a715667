import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structext.autodiff import (
    CheckpointError,
    ParameterStore,
    ShapeError,
    Tape,
    Tensor,
    debug_mode,
    load_into,
    ops,
    precision,
    read_checkpoint,
    save_checkpoint,
)
from structext.autodiff.gradcheck import check_gradients


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- forward values


def test_add_and_gradients_of_shared_input():
    with precision(np.float64):
        a = leaf([1.0, 2.0])
        b = leaf([3.0, 4.0])
        with Tape() as tape:
            out = ops.sum(ops.add(ops.mul(a, b), a))
        tape.backward(out)
    assert np.allclose(out.value, 1 * 3 + 2 * 4 + 3)
    assert np.allclose(a.grad, [4.0, 5.0])
    assert np.allclose(b.grad, [1.0, 2.0])


def test_no_implicit_broadcasting():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3,\)"):
        ops.add(a, Tensor(np.ones(3)))
    # the explicit route works
    out = ops.add(a, ops.expand(Tensor(np.ones(3)), (2, 3)))
    assert out.shape == (2, 3)


def test_scalars_allowed_on_either_side():
    a = Tensor(np.array([1.0, 2.0]))
    assert np.allclose(ops.sub(1.0, a).value, [0.0, -1.0])
    assert np.allclose((a * 2.0).value, [2.0, 4.0])
    assert np.allclose(ops.add(3.0, a).value, [4.0, 5.0])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_gather_rows_out_of_range_names_index():
    with pytest.raises(IndexError, match="7"):
        ops.gather_rows(Tensor(np.ones((5, 2))), [0, 7])


def test_gather_rows_repeated_index_accumulates():
    with precision(np.float64):
        table = leaf(np.arange(6.0).reshape(3, 2))
        with Tape() as tape:
            out = ops.sum(ops.gather_rows(table, [1, 1, 2]))
        tape.backward(out)
    assert np.allclose(table.grad, [[0, 0], [2, 2], [1, 1]])


def test_sigmoid_is_stable_for_large_inputs():
    out = ops.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).value
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [0.0, 0.5, 1.0])


def test_softmax_with_additive_mask_zeroes_masked_columns():
    x = Tensor(np.zeros((1, 3)))
    out = ops.softmax(x, additive_mask=np.array([[0.0, -1e9, 0.0]])).value
    assert np.allclose(out, [[0.5, 0.0, 0.5]])


def test_layer_norm_matches_reference():
    # reference values from an independent framework implementation
    with precision(np.float64):
        x = Tensor(np.array([[1.0, 2.0, 4.0, 7.0], [-1.0, 0.5, 0.25, 3.0]]))
        g = Tensor(np.array([1.0, 0.5, 2.0, -1.0]))
        b = Tensor(np.array([0.0, 0.1, -0.1, 0.2]))
        out = ops.layer_norm(x, g, b).value
    expected = [[-1.09108841, -0.22732652, 0.33643536, -1.32752378], [-1.16296957, 0.03539058, -0.70302126, -1.39369904]]
    assert np.allclose(out, expected, atol=1e-7)


def test_cross_entropy_matches_reference_and_ignores_rows():
    logits = np.array([[2.0, 1.0, 0.0, -1.0], [0.5, 0.5, 3.0, -2.0], [1.0, -1.0, 0.0, 0.0]])
    with precision(np.float64):
        assert float(ops.softmax_cross_entropy(Tensor(logits), [0, 2, 3]).value) == pytest.approx(0.74149751, abs=1e-7)
        assert float(ops.softmax_cross_entropy(Tensor(logits), [0, -100, 3]).value) == pytest.approx(1.03335654, abs=1e-7)


def test_cross_entropy_all_ignored_is_zero_and_flagged():
    out = ops.softmax_cross_entropy(Tensor(np.ones((2, 3))), [-100, -100])
    assert float(out.value) == 0.0
    assert out.name == "empty"


def test_cross_entropy_uniform_logits_is_log_classes():
    out = ops.softmax_cross_entropy(Tensor(np.zeros((5, 16))), [0, 3, 7, 15, 2])
    assert float(out.value) == pytest.approx(np.log(16), rel=1e-6)


def test_bce_with_logits_matches_reference_including_extremes():
    with precision(np.float64):
        z = Tensor(np.array([3.0, -2.0, 0.5, -40.0, 40.0]))
        out = ops.bce_with_logits(z, [1, 0, 1, 1, 0])
    assert float(out.value) == pytest.approx(16.12991847, abs=1e-7)


def test_conv2d_matches_reference():
    with precision(np.float64):
        x = Tensor(np.sin(np.arange(40)).reshape(1, 4, 5, 2))
        w = Tensor(np.cos(np.arange(54)).reshape(3, 3, 2, 3))
        out = ops.conv2d(x, w, Tensor(np.array([0.1, -0.2, 0.3]))).value
    expected = [
        [[0.34015696, -0.39757509, -0.15365751], [-0.03362546, -0.19168477, 0.44261094]],
        [[-0.5815656, -0.35959686, 0.80910449], [0.23036275, 0.17970694, 0.57995032]],
    ]
    assert out.shape == (1, 4, 5, 3)
    assert np.allclose(out[0, :2, :2], expected, atol=1e-7)


def test_max_pool_matches_reference():
    with precision(np.float64):
        x = Tensor(np.sin(np.arange(32) * 1.7).reshape(1, 4, 4, 2))
        out = ops.max_pool2d(x, 2).value
    expected = [[[[0.85916181, 0.99166481], [0.9997929, 0.79848711]], [[0.87927306, 0.94042896], [0.67022918, 0.9856003]]]]
    assert np.allclose(out, expected, atol=1e-7)


def test_dropout_is_identity_without_rng_and_scales_kept_units():
    x = Tensor(np.ones((1000,)))
    assert ops.dropout(x, 0.1, None) is x
    out = ops.dropout(x, 0.5, np.random.default_rng(0)).value
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_debug_mode_catches_nan():
    with debug_mode():
        with pytest.raises(FloatingPointError):
            ops.log(Tensor(np.array([-1.0])))
        with pytest.raises(FloatingPointError):
            ops.exp(Tensor(np.array([1e5])))


def test_values_are_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_tape_only_records_when_gradients_are_needed():
    with Tape() as tape:
        ops.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        ops.add(leaf(np.ones(2)), Tensor(np.ones(2)))
    assert len(tape.nodes) == 1


def test_backward_runs_in_reverse_creation_order():
    order = []
    with precision(np.float64):
        a = leaf([1.0])
        with Tape() as tape:
            b = ops.mul(a, 2.0)
            c = ops.mul(b, 3.0)
        b_back, c_back = b._backward, c._backward
        b._backward = lambda g: (order.append("b"), b_back(g))
        c._backward = lambda g: (order.append("c"), c_back(g))
        tape.backward(c)
    assert order == ["c", "b"]
    assert np.allclose(a.grad, [6.0])


# ---------------------------------------------------------------- gradients


def _ops_cases(rng):
    """(name, fn, inputs) triples covering every differentiable op."""
    x = leaf(rng.standard_normal((3, 4)))
    y = leaf(rng.standard_normal((3, 4)))
    pos = leaf(rng.uniform(0.5, 2.0, (3, 4)))
    w = leaf(rng.standard_normal((4, 5)))
    b = leaf(rng.standard_normal(5))
    g = leaf(rng.standard_normal(4))
    bb = leaf(rng.standard_normal(4))
    a3 = leaf(rng.standard_normal((2, 3, 4)))
    b3 = leaf(rng.standard_normal((2, 4, 2)))
    img = leaf(rng.standard_normal((1, 4, 4, 2)))
    cw = leaf(rng.standard_normal((3, 3, 2, 3)))
    cb = leaf(rng.standard_normal(3))
    row = leaf(rng.standard_normal((1, 4)))
    v = leaf(rng.standard_normal(4))
    table = leaf(rng.standard_normal((6, 3)))
    idx = rng.integers(0, 6, size=(5, 4))
    wts = rng.uniform(0, 1, size=(5, 4))
    # nudge away from relu / max ties so central differences are valid
    relu_in = leaf(np.where(np.abs(x.value) < 0.05, 0.3, x.value))
    coef = rng.standard_normal((3, 4))
    return [
        ("add", lambda: ops.sum(ops.mul(ops.add(x, y), coef)), [x, y]),
        ("sub", lambda: ops.sum(ops.mul(ops.sub(x, y), coef)), [x, y]),
        ("mul", lambda: ops.sum(ops.mul(x, y)), [x, y]),
        ("neg", lambda: ops.sum(ops.mul(ops.neg(x), coef)), [x]),
        ("sigmoid", lambda: ops.sum(ops.mul(ops.sigmoid(x), coef)), [x]),
        ("relu", lambda: ops.sum(ops.mul(ops.relu(relu_in), coef)), [relu_in]),
        ("exp", lambda: ops.sum(ops.mul(ops.exp(x), coef)), [x]),
        ("log", lambda: ops.sum(ops.mul(ops.log(pos), coef)), [pos]),
        ("reshape", lambda: ops.sum(ops.mul(ops.reshape(x, (4, 3)), coef.reshape(4, 3))), [x]),
        ("transpose", lambda: ops.sum(ops.mul(ops.transpose(x, (1, 0)), coef.T)), [x]),
        ("expand", lambda: ops.sum(ops.mul(ops.expand(row, (3, 4)), coef)), [row]),
        ("expand_lead", lambda: ops.sum(ops.mul(ops.expand(v, (3, 4)), coef)), [v]),
        ("concat", lambda: ops.sum(ops.mul(ops.concat([x, y], axis=1), np.tile(coef, 2))), [x, y]),
        ("sum_axis", lambda: ops.sum(ops.mul(ops.sum(x, axis=1), coef[:, 0])), [x]),
        ("mean", lambda: ops.mul(ops.mean(ops.mul(x, x)), 3.0), [x]),
        ("gather_rows", lambda: ops.sum(ops.mul(ops.gather_rows(table, [0, 2, 2, 5]), coef[:, :3].repeat(2, 0)[:4])), [table]),
        ("bilinear_gather", lambda: ops.sum(ops.mul(ops.bilinear_gather(table, idx, wts), coef[:, :3].repeat(2, 0)[:5])), [table]),
        ("matmul", lambda: ops.sum(ops.mul(ops.matmul(x, w), np.ones((3, 5)) * 0.3)), [x, w]),
        ("matmul_batched", lambda: ops.sum(ops.mul(ops.matmul(a3, b3), np.arange(12.0).reshape(2, 3, 2))), [a3, b3]),
        ("linear", lambda: ops.sum(ops.mul(ops.linear(x, w, b), np.ones((3, 5)) * 0.7)), [x, w, b]),
        ("softmax", lambda: ops.sum(ops.mul(ops.softmax(x, additive_mask=np.array([0, 0, -1e9, 0.0])), coef)), [x]),
        ("layer_norm", lambda: ops.sum(ops.mul(ops.layer_norm(x, g, bb), coef)), [x, g, bb]),
        ("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(x, [1, -100, 3]), [x]),
        ("bce_with_logits", lambda: ops.bce_with_logits(x, (coef > 0).astype(float)), [x]),
        ("conv2d", lambda: ops.sum(ops.mul(ops.conv2d(img, cw, cb), np.sin(np.arange(48.0)).reshape(1, 4, 4, 3))), [img, cw, cb]),
        ("dropout", lambda: ops.sum(ops.mul(ops.dropout(x, 0.3, np.random.default_rng(5)), coef)), [x]),
        ("max_pool2d", lambda: ops.sum(ops.mul(ops.max_pool2d(img), np.cos(np.arange(8.0)).reshape(1, 2, 2, 2))), [img]),
    ]


OP_NAMES = [name for name, _, _ in _ops_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients_match_finite_differences(name):
    with precision(np.float64):
        for seed in range(3):
            cases = {n: (fn, inputs) for n, fn, inputs in _ops_cases(np.random.default_rng(seed))}
            fn, inputs = cases[name]
            assert check_gradients(fn, inputs) < 1e-6, f"{name} seed {seed}"


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_softmax_rows_sum_to_one(xs):
    out = ops.softmax(Tensor(np.array([xs]))).value
    assert out.sum() == pytest.approx(1.0, abs=1e-5)
    assert np.all(out >= 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_sigmoid_is_bounded_and_monotone(xs):
    xs = np.sort(np.array(xs))
    out = ops.sigmoid(Tensor(xs)).value
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.diff(out) >= 0)


# ---------------------------------------------------------------- checkpoints


def _store(seed=3):
    p = ParameterStore(seed)
    p.normal("a.w", (3, 4))
    p.zeros("a.b", (4,))
    p.glorot("b.w", 4, 2)
    return p


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    p = _store()
    save_checkpoint(p, tmp_path, {"note": "x"})
    manifest, arrays = read_checkpoint(tmp_path)
    assert manifest["format_version"] == 1
    assert manifest["rng_seed"] == 3
    assert [e["name"] for e in manifest["entries"]] == ["a.w", "a.b", "b.w"]
    for name, t in p.items():
        assert arrays[name].dtype == t.value.dtype
        assert np.array_equal(arrays[name], t.value)
    q = _store(seed=99)
    assert load_into(q, tmp_path) == []
    for name in p:
        assert np.array_equal(p[name].value, q[name].value)


def test_checkpoint_is_little_endian_raw(tmp_path):
    p = _store()
    save_checkpoint(p, tmp_path)
    blob = (tmp_path / "params.bin").read_bytes()
    entry = json.loads((tmp_path / "manifest.json").read_text())["entries"][2]
    raw = np.frombuffer(blob, dtype="<f4", count=8, offset=entry["offset"]).reshape(4, 2)
    assert np.array_equal(raw, p["b.w"].value)


def test_checkpoint_shape_mismatch_raises(tmp_path):
    save_checkpoint(_store(), tmp_path)
    q = ParameterStore(0)
    q.normal("a.w", (4, 4))
    with pytest.raises(CheckpointError, match="a.w"):
        load_into(q, tmp_path, strict=False)


def test_checkpoint_missing_parameters_reported_as_fresh(tmp_path):
    save_checkpoint(_store(), tmp_path)
    q = _store()
    q.zeros("head.w", (2,))
    with pytest.raises(CheckpointError):
        load_into(q, tmp_path, strict=True)
    assert load_into(q, tmp_path, strict=False) == ["head.w"]


def test_unreadable_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing")

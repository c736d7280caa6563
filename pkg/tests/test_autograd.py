import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lastadv.autograd import (
    BackwardBeforeForwardError,
    Graph,
    NonScalarLossError,
    NumericalOverflowError,
    ShapeMismatchError,
    backward_grad,
    finite_diff_check,
    forward_eval,
    softmax,
)


def test_relu_forward():
    g = Graph()
    x = g.leaf("x")
    g.relu(x)
    np.testing.assert_array_equal(forward_eval(g, {"x": np.array([-1.0, 0.0, 2.0])}), [0, 0, 2])


def test_affine_identity():
    g = Graph()
    x, w, b = g.leaf("x"), g.leaf("w"), g.leaf("b")
    g.affine(x, w, b)
    u = np.random.default_rng(0).normal(size=(3, 4))
    out = forward_eval(g, {"x": u, "w": np.eye(4), "b": np.zeros(4)})
    np.testing.assert_array_equal(out, u)


def _two_layer_graph():
    g = Graph()
    x, w0, b0, w1, b1 = (g.leaf(n) for n in ("x", "w0", "b0", "w1", "b1"))
    h = g.relu(g.affine(x, w0, b0))
    g.affine(h, w1, b1)
    return g


def test_two_layer_matches_straight_line():
    rng = np.random.default_rng(3)
    vals = {"x": rng.normal(size=(5, 4)), "w0": rng.normal(size=(4, 6)), "b0": rng.normal(size=6),
            "w1": rng.normal(size=(6, 3)), "b1": rng.normal(size=3)}
    out = forward_eval(_two_layer_graph(), vals)
    # straight-line re-evaluation, row by row, no graph machinery
    for r in range(5):
        hidden = [max(0.0, sum(vals["x"][r, i] * vals["w0"][i, j] for i in range(4)) + vals["b0"][j])
                  for j in range(6)]
        for k in range(3):
            ref = sum(hidden[j] * vals["w1"][j, k] for j in range(6)) + vals["b1"][k]
            assert out[r, k] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_sum_gradient_is_ones():
    g = Graph()
    x = g.leaf("x")
    g.sum(x)
    forward_eval(g, {"x": np.random.default_rng(0).normal(size=(2, 3))})
    np.testing.assert_array_equal(backward_grad(g)["x"], np.ones((2, 3)))


def test_mean_relu_gradient():
    g = Graph()
    x = g.leaf("x")
    g.mean(g.relu(x))
    forward_eval(g, {"x": np.array([-1.0, 2.0])})
    np.testing.assert_array_equal(backward_grad(g)["x"], [0.0, 0.5])


def test_relu_subgradient_at_zero_is_zero():
    g = Graph()
    x = g.leaf("x")
    g.sum(g.relu(x))
    forward_eval(g, {"x": np.array([0.0, 0.0, 1.0])})
    np.testing.assert_array_equal(backward_grad(g)["x"], [0.0, 0.0, 1.0])


def _mlp_ce_graph(dims):
    g = Graph()
    x = g.leaf("x")
    labels = g.leaf("y", differentiable=False)
    h = x
    for k in range(len(dims) - 1):
        h = g.affine(h, g.leaf(f"W{k}"), g.leaf(f"b{k}"))
        if k < len(dims) - 2:
            h = g.relu(h)
    g.softmax_ce(h, labels)
    return g


def _mlp_bindings(dims, batch, seed):
    rng = np.random.default_rng(seed)
    vals = {"x": rng.normal(size=(batch, dims[0])), "y": rng.integers(0, dims[-1], size=batch)}
    for k in range(len(dims) - 1):
        vals[f"W{k}"] = rng.normal(0, np.sqrt(2 / dims[k]), size=(dims[k], dims[k + 1]))
        vals[f"b{k}"] = rng.normal(0, 0.1, size=dims[k + 1])
    return vals


@pytest.mark.parametrize("seed", range(10))
def test_three_layer_gradients_match_finite_differences(seed):
    dims = [5, 7, 6, 4, 3]
    g = _mlp_ce_graph(dims)
    vals = _mlp_bindings(dims, 4, seed)
    forward_eval(g, vals)
    for leaf in g.differentiable_leaves:
        assert finite_diff_check(g, leaf, 1e-5) < 1e-5, leaf


def test_finite_diff_quadratic():
    g = Graph()
    x = g.leaf("x")
    g.scale(g.sum(g.mul(x, x)), 0.5)
    x0 = np.array([3.0, -4.0])
    forward_eval(g, {"x": x0})
    np.testing.assert_array_equal(backward_grad(g)["x"], x0)
    assert finite_diff_check(g, "x", 1e-5) < 1e-9


def test_finite_diff_softmax_ce():
    g = Graph()
    z = g.leaf("z")
    y = g.leaf("y", differentiable=False)
    g.softmax_ce(z, y)
    rng = np.random.default_rng(1)
    forward_eval(g, {"z": rng.normal(size=(6, 5)), "y": rng.integers(0, 5, size=6)})
    assert finite_diff_check(g, "z", 1e-5) < 1e-6


def test_finite_diff_relu_away_from_kink():
    h = 1e-5
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=20)
    x0 = np.where(np.abs(x0) < 20 * h, 0.5, x0)
    g = Graph()
    x = g.leaf("x")
    g.sum(g.mul(g.relu(x), g.relu(x)))
    forward_eval(g, {"x": x0})
    assert finite_diff_check(g, "x", h) < 1e-6


@pytest.mark.parametrize("teacher_detached", [True, False])
def test_kl_gradients(teacher_detached):
    g = Graph()
    s, t = g.leaf("s"), g.leaf("t", differentiable=not teacher_detached)
    g.kl_temperature(s, t, tau=2.5, detach_teacher=False, tau_squared_scale=True)
    rng = np.random.default_rng(4)
    forward_eval(g, {"s": rng.normal(size=(3, 4)), "t": rng.normal(size=(3, 4))})
    assert finite_diff_check(g, "s") < 1e-6
    if not teacher_detached:
        assert finite_diff_check(g, "t") < 1e-6


def test_elementary_ops_gradients():
    g = Graph()
    a = g.leaf("a")
    b = g.leaf("b")
    m = g.max(g.add(g.exp(a), g.log(b)), axis=1)
    g.mean(g.clamp(g.scale(m, 1.5), -10.0, 10.0))
    rng = np.random.default_rng(5)
    forward_eval(g, {"a": rng.normal(size=(4, 3)), "b": rng.uniform(0.5, 2.0, size=(4, 3))})
    assert finite_diff_check(g, "a") < 1e-6
    assert finite_diff_check(g, "b") < 1e-6


def test_clamp_blocks_gradient_outside_range():
    g = Graph()
    x = g.leaf("x")
    g.sum(g.clamp(x, 0.0, 1.0))
    forward_eval(g, {"x": np.array([-0.5, 0.5, 1.5])})
    np.testing.assert_array_equal(backward_grad(g)["x"], [0.0, 1.0, 0.0])


def test_shape_mismatch_names_node():
    g = Graph()
    a, b = g.leaf("a"), g.leaf("b")
    bad = g.add(a, b)
    with pytest.raises(ShapeMismatchError) as info:
        forward_eval(g, {"a": np.zeros(3), "b": np.zeros(4)})
    assert info.value.node_id == bad


def test_overflow_rejected():
    g = Graph()
    g.exp(g.leaf("x"))
    with pytest.raises(NumericalOverflowError):
        forward_eval(g, {"x": np.array([1000.0])})


def test_backward_errors():
    g = Graph()
    x = g.leaf("x")
    g.relu(x)
    with pytest.raises(BackwardBeforeForwardError):
        backward_grad(g)
    forward_eval(g, {"x": np.ones(3)})
    with pytest.raises(NonScalarLossError):
        backward_grad(g)


def test_shared_node_accumulates():
    g = Graph()
    x = g.leaf("x")
    g.sum(g.add(x, g.mul(x, x)))
    forward_eval(g, {"x": np.array([1.0, -2.0])})
    np.testing.assert_array_equal(backward_grad(g)["x"], [3.0, -3.0])


def test_determinism_bit_identical():
    dims = [4, 8, 3]
    vals = _mlp_bindings(dims, 5, 7)
    runs = []
    for _ in range(2):
        g = _mlp_ce_graph(dims)
        loss = forward_eval(g, vals)
        runs.append((loss.tobytes(), {k: v.tobytes() for k, v in backward_grad(g).items()}))
    assert runs[0] == runs[1]


def test_linearity_of_gradient():
    dims = [4, 6, 3]
    vals = _mlp_bindings(dims, 3, 11)
    a, b = 0.7, -1.3

    def grads(coef_f, coef_g):
        g = Graph()
        x, y = g.leaf("x"), g.leaf("y", differentiable=False)
        w0, b0, w1, b1 = (g.leaf(n) for n in ("W0", "b0", "W1", "b1"))
        logits = g.affine(g.relu(g.affine(x, w0, b0)), w1, b1)
        f = g.softmax_ce(logits, y)
        h = g.mean(g.mul(logits, logits))
        g.add(g.scale(f, coef_f), g.scale(h, coef_g))
        forward_eval(g, vals)
        return backward_grad(g)

    combined, only_f, only_g = grads(a, b), grads(1.0, 0.0), grads(0.0, 1.0)
    for name in combined:
        expect = a * only_f[name] + b * only_g[name]
        scale = np.maximum(np.abs(expect), 1e-300)
        assert np.all(np.abs(combined[name] - expect) <= 1e-12 * np.maximum(scale, np.abs(a * only_f[name]) + np.abs(b * only_g[name])))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(z):
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_entries_strictly_inside_unit_interval():
    p = softmax(np.random.default_rng(0).normal(size=(5, 7)) * 3)
    assert np.all((p > 0) & (p < 1))

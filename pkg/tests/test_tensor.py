import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docrefine import tensor as tk
from docrefine.tensor import Tape, Tensor

from gradcheck import check_param_gradients, finite_difference, rel_close


def test_matmul_identity():
    x = np.arange(12.0).reshape(3, 4)
    out = tk.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(tk.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        tk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 2))
    check_param_gradients(
        lambda t: tk.matmul(t["a"], t["b"]).sum(),
        {"a": a, "b": b},
        rtol=1e-6,
    )


def test_matmul_batched_broadcast_gradient():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(4, 2))
    check_param_gradients(
        lambda t: (tk.matmul(t["a"], t["b"]) * t["w"]).sum(),
        {"a": a, "b": b, "w": rng.normal(size=(3, 2, 2))},
    )


def test_softmax_uniform():
    out = tk.softmax(Tensor(np.zeros(4)), axis=0)
    np.testing.assert_allclose(out.data, 0.25)


def test_softmax_no_overflow():
    out = tk.softmax(Tensor([1000.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1.0, 0.0])


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    w = rng.normal(size=6)
    check_param_gradients(
        lambda t: (tk.softmax(t["x"], axis=0) * Tensor(w)).sum(),
        {"x": x},
    )


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_rows_are_distributions(values):
    out = tk.softmax(Tensor(values), axis=0)
    assert np.all(out.data >= 0)
    assert abs(out.data.sum() - 1.0) < 1e-9


def test_logsumexp_single_element():
    out = tk.logsumexp(Tensor([[3.25]]), axis=1)
    np.testing.assert_allclose(out.data, [3.25])


def test_logsumexp_two_zeros():
    out = tk.logsumexp(Tensor([0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, np.log(2.0))


def test_logsumexp_empty_axis_error():
    with pytest.raises(ValueError):
        tk.logsumexp(Tensor(np.zeros((3, 0))), axis=1)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(-100, 100), min_size=2, max_size=5),
        min_size=2,
        max_size=6,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_logsumexp_bounds(rows):
    x = np.array(rows)
    out = tk.logsumexp(Tensor(x), axis=0).data
    mx = x.max(axis=0)
    n = x.shape[0]
    assert np.all(out >= mx - 1e-12)
    assert np.all(out <= mx + np.log(n) + 1e-12)


def test_logsumexp_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    check_param_gradients(lambda t: tk.logsumexp(t["x"], axis=0).sum(), {"x": x})


def test_layer_norm_constant_vector():
    out = tk.layer_norm(Tensor(np.full(6, 2.5)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0)


def test_layer_norm_mean_is_bias_mean():
    rng = np.random.default_rng(4)
    x = rng.normal(size=8)
    bias = rng.normal(size=8)
    out = tk.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(bias))
    assert abs(out.data.mean() - bias.mean()) < 1e-9


def test_layer_norm_gradient():
    rng = np.random.default_rng(5)
    check_param_gradients(
        lambda t: (tk.layer_norm(t["x"], t["g"], t["b"]) * t["w"]).sum(),
        {
            "x": rng.normal(size=8),
            "g": rng.normal(size=8),
            "b": rng.normal(size=8),
            "w": rng.normal(size=8),
        },
    )


def test_stop_gradient_forward_identity():
    x = Tensor(np.arange(5.0), requires_grad=True)
    np.testing.assert_array_equal(tk.stop_gradient(x).data, x.data)


def test_stop_gradient_blocks_backward():
    x = Tensor(np.arange(3.0) + 1.0, requires_grad=True)
    with Tape() as tape:
        loss = tk.stop_gradient(x).sum() + Tensor(0.0)
    grads = tape.backward(loss)
    assert x not in grads


def test_stop_gradient_partial_path():
    # loss = sum(x * sg(x)): gradient is sg(x) values, not 2x
    x0 = np.array([1.0, -2.0, 3.0])
    x = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = (x * tk.stop_gradient(x)).sum()
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, x0)

    # finite differences on the non-barrier path (barrier branch frozen)
    frozen = x0.copy()
    fd = finite_difference(lambda v: float(np.sum(v * frozen)), x0.copy())
    assert rel_close(g, fd)


def test_elementwise_and_activations():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 5.0])
    np.testing.assert_array_equal(tk.elementwise(a, b, "add").data, [4.0, 7.0])
    np.testing.assert_array_equal(tk.elementwise(a, b, "sub").data, [-2.0, -3.0])
    np.testing.assert_array_equal(tk.elementwise(a, b, "mul").data, [3.0, 10.0])
    assert tk.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_allclose(tk.tanh(Tensor(0.0)).data, 0.0)


def test_concat_shapes():
    out = tk.concat([Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
    assert out.shape == (2, 8)


def test_cosine_self_similarity():
    rng = np.random.default_rng(6)
    v = rng.normal(size=7)
    assert abs(tk.cosine(Tensor(v), Tensor(v)).item() - 1.0) < 1e-12


def test_cosine_zero_vector_error():
    with pytest.raises(ValueError):
        tk.cosine(Tensor(np.zeros(3)), Tensor(np.ones(3)))


def test_cosine_rowwise_and_gradient():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(4, 5))
    rows = tk.cosine(Tensor(a), Tensor(b)).data
    for i in range(4):
        expected = a[i] @ b[i] / (np.linalg.norm(a[i]) * np.linalg.norm(b[i]))
        assert abs(rows[i] - expected) < 1e-12
    check_param_gradients(lambda t: tk.cosine(t["a"], t["b"]).sum(), {"a": a, "b": b})


def test_embedding_lookup_and_gradient():
    rng = np.random.default_rng(8)
    table = rng.normal(size=(6, 3))
    ids = np.array([0, 2, 2, 5])
    out = tk.embedding_lookup(Tensor(table), ids)
    np.testing.assert_array_equal(out.data, table[ids])
    # repeated id 2 must accumulate
    t = Tensor(table, requires_grad=True)
    with Tape() as tape:
        loss = tk.embedding_lookup(t, ids).sum()
    g = tape.backward(loss)[t]
    expected = np.zeros_like(table)
    np.add.at(expected, ids, 1.0)
    np.testing.assert_array_equal(g, expected)


def test_take_out_of_range():
    with pytest.raises(IndexError):
        tk.take(Tensor(np.ones((2, 2))), np.array([0, 2]))


def test_column_gradient():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 4))
    check_param_gradients(lambda t: (tk.column(t["x"], 2) * t["w"]).sum(), {"x": x, "w": rng.normal(size=5)})


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_backward_deterministic_repeat():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = tk.softmax(x @ x, axis=1).sum() + tk.tanh(x).sum()
    g1 = tape.backward(loss)[x]
    g2 = tape.backward(loss)[x]
    np.testing.assert_array_equal(g1, g2)


def test_no_tape_means_no_grad_tracking():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 3.0
    assert not y.requires_grad


def test_debug_checks_flag():
    tk.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            tk.div(Tensor([1.0]), Tensor([0.0]))
    finally:
        tk.set_debug_checks(False)


OP_CASES = {
    "matmul": lambda t: tk.matmul(t["a2"], t["b2"]).sum(),
    "add": lambda t: (t["a"] + t["b"]).sum(),
    "sub": lambda t: (t["a"] - t["b"]).sum(),
    "mul": lambda t: (t["a"] * t["b"]).sum(),
    "div": lambda t: (t["a"] / (t["b"] * t["b"] + 1.0)).sum(),
    "tanh": lambda t: tk.tanh(t["a"]).sum(),
    "sigmoid": lambda t: tk.sigmoid(t["a"]).sum(),
    "softmax": lambda t: (tk.softmax(t["a"], axis=1) * t["b"]).sum(),
    "logsumexp": lambda t: tk.logsumexp(t["a"], axis=0).sum(),
    "layer_norm": lambda t: (tk.layer_norm(t["a"], t["g"], t["bias"]) * t["b"]).sum(),
    "concat": lambda t: tk.concat([t["a"], t["b"]], axis=1).sum(),
    "stack": lambda t: (tk.stack([t["a"], t["b"]], axis=0) * t["w3"]).sum(),
    "take": lambda t: tk.take(t["a"], np.array([0, 1, 1])).sum(),
    "cosine": lambda t: tk.cosine(t["a"], t["b"]).sum(),
    "mean": lambda t: t["a"].mean(axis=1).sum(),
    "column": lambda t: tk.column(t["a"], 0).sum(),
    "transpose": lambda t: (tk.transpose(t["a"], (1, 0)) * t["bt"]).sum(),
    "reshape": lambda t: (t["a"].reshape(t["a"].size) * t["flat"]).sum(),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_gradient_many_seeds(name):
    # >= 20 random small-shape instances per differentiable op
    build = OP_CASES[name]
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        shape = (rng.integers(2, 5), rng.integers(2, 5))
        leaves = {
            "a": rng.normal(size=shape),
            "b": rng.normal(size=shape),
            "g": rng.normal(size=shape[1]),
            "bias": rng.normal(size=shape[1]),
            "a2": rng.normal(size=(3, 4)),
            "b2": rng.normal(size=(4, 2)),
            "w3": rng.normal(size=(2, *shape)),
            "bt": rng.normal(size=shape[::-1]),
            "flat": rng.normal(size=shape[0] * shape[1]),
        }
        check_param_gradients(build, leaves, rtol=1e-4)

"""Autodiff engine: forward values, gradient oracles, shape contracts."""

import numpy as np
import pytest

import videotext.tensor as T
from videotext.params import ParameterStore
from videotext.tensor import (
    ShapeError,
    Tensor,
    double_precision,
    finite_diff_check,
)


def make_store(**arrays):
    store = ParameterStore()
    for name, arr in arrays.items():
        store.add(name, arr, "encoder")
    return store


# ------------------------------------------------------------- construction


def test_scalar_promoted_to_rank_one():
    t = Tensor(3.0)
    assert t.shape == (1,)


def test_zero_extent_dimension_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0, 3)))


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).data.dtype == np.float32


def test_double_precision_context():
    with double_precision():
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    result = a @ Tensor(np.eye(2))
    np.testing.assert_array_equal(result.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_result_shape():
    out = Tensor(np.ones((2, 3))) @ Tensor(np.ones((3, 2)))
    assert out.shape == (2, 2)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_matmul_rank_one_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 2)))


def test_matmul_gradient_oracle():
    with double_precision():
        rng = np.random.default_rng(0)
        store = make_store(
            a=rng.standard_normal((4, 5)), b=rng.standard_normal((5, 6))
        )
        err = finite_diff_check(lambda: (store["a"] @ store["b"]).sum(), store)
    assert err < 1e-4


# ----------------------------------------------------------------- softmax


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-7)


def test_softmax_overflow_stable():
    out = T.softmax(Tensor([1000.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)
    assert np.isfinite(out.data).all()


def test_softmax_reference_values():
    with double_precision():
        out = T.softmax(Tensor([1.0, 2.0, 3.0]), axis=-1)
    np.testing.assert_allclose(out.data, [0.0900, 0.2447, 0.6652], atol=5e-5)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = T.softmax(Tensor(rng.standard_normal((5, 7))), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)
    assert (out.data > 0).all() and (out.data < 1).all()


def test_softmax_invalid_axis():
    with pytest.raises(ValueError):
        T.softmax(Tensor([1.0, 2.0]), axis=2)


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_softmax_sum_is_constant():
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    T.softmax(x, -1).sum().backward()
    np.testing.assert_allclose(x.grad, np.zeros(3), atol=1e-6)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_backward_visits_shared_node_once():
    # y = x + x: gradient must be exactly 2, not more
    x = Tensor([1.0], requires_grad=True)
    y = x + x
    y.backward()
    np.testing.assert_allclose(x.grad, [2.0])


def test_gradient_map_untouched_leaf_gets_zeros():
    store = make_store(a=np.ones(3), b=np.ones(3))
    (store["a"] * 2.0).sum().backward()
    grads = store.gradient_map()
    np.testing.assert_allclose(grads["a"], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(grads["b"], np.zeros(3))


# ------------------------------------------------- finite difference oracle


def test_finite_diff_linear_layer_exact():
    with double_precision():
        rng = np.random.default_rng(1)
        store = make_store(
            w=rng.standard_normal((4, 3)), b=rng.standard_normal(3)
        )
        x = Tensor(rng.standard_normal((5, 4)))
        err = finite_diff_check(lambda: (x @ store["w"] + store["b"]).sum(), store)
    assert err < 1e-7


def test_finite_diff_rejects_bad_eps():
    store = make_store(a=np.ones(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda: store["a"].sum(), store, eps=0.0)


def test_finite_diff_rejects_non_finite():
    store = make_store(a=np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda: T.log(store["a"]).sum(), store)


# -------------------------------------------- per-op gradient oracle sweep


def _op_cases(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 5))
    c = a.T.copy()  # fixed coefficient, deliberately not a parameter
    return [
        ("add", dict(a=a, b=b), lambda s: (s["a"] + s["b"]).sum()),
        ("mul", dict(a=a, b=b), lambda s: (s["a"] * s["b"]).sum()),
        ("div", dict(a=a, b=b + 3.0), lambda s: (s["a"] / s["b"]).sum()),
        ("matmul", dict(a=a, m=m), lambda s: (s["a"] @ s["m"]).sum()),
        ("gelu", dict(a=a), lambda s: T.gelu(s["a"]).sum()),
        ("exp", dict(a=a), lambda s: T.exp(s["a"]).sum()),
        ("log", dict(a=np.abs(a) + 0.5), lambda s: T.log(s["a"]).sum()),
        (
            "softmax",
            dict(a=a, b=b),
            lambda s: (T.softmax(s["a"], -1) * s["b"]).sum(),
        ),
        (
            "log_softmax",
            dict(a=a, b=b),
            lambda s: (T.log_softmax(s["a"], -1) * s["b"]).sum(),
        ),
        (
            "layer_norm",
            dict(a=a, scale=rng.standard_normal(4), shift=rng.standard_normal(4)),
            lambda s: (T.layer_norm(s["a"], s["scale"], s["shift"]) ** 2.0).sum(),
        ),
        (
            "reshape_transpose",
            dict(a=a),
            lambda s: (T.transpose(s["a"].reshape(4, 3)) * c.reshape(3, 4)).sum(),
        ),
        (
            "concatenate",
            dict(a=a, b=b),
            lambda s: (T.concatenate([s["a"], s["b"]], axis=0) ** 2.0).sum(),
        ),
        ("mean_axis", dict(a=a), lambda s: (s["a"].mean(axis=1) ** 2.0).sum()),
        (
            "embedding",
            dict(a=a),
            lambda s: T.embedding(s["a"], np.array([0, 2, 2, 1])).sum(),
        ),
        (
            "cross_entropy",
            dict(a=a),
            lambda s: T.cross_entropy_logits(s["a"], np.array([1, 0, 3])),
        ),
        (
            "l2_normalize",
            dict(a=a, b=b),
            lambda s: (T.l2_normalize(s["a"]) * s["b"]).sum(),
        ),
        (
            "broadcast_add",
            dict(a=a, v=rng.standard_normal(4)),
            lambda s: ((s["a"] + s["v"]) ** 2.0).sum(),
        ),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_all_ops_gradient_oracle(seed):
    with double_precision():
        rng = np.random.default_rng(seed)
        for name, arrays, f in _op_cases(rng):
            store = make_store(**arrays)
            err = finite_diff_check(lambda: f(store), store, seed=seed)
            assert err < 1e-4, f"op {name} seed {seed}: max rel error {err}"


# --------------------------------------------------------------- structure


def test_reshape_round_trip_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 4)))
    back = x.reshape(4, 6).reshape(2, 3, 4)
    np.testing.assert_array_equal(back.data, x.data)


def test_reshape_size_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).reshape(4, 2)


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
        y = T.softmax(T.gelu(x @ x), -1).sum()
        y.backward()
        return y.data.copy(), x.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(g1, g2)


def test_gather_rows():
    x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4), requires_grad=True)
    out = T.gather_rows(x, np.array([2, 0]))
    np.testing.assert_array_equal(out.data, [[8, 9, 10, 11], [12, 13, 14, 15]])
    out.sum().backward()
    assert x.grad[0, 2].sum() == 4.0 and x.grad[1, 0].sum() == 4.0
    assert x.grad.sum() == 8.0


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((4, 2))), np.array([4]))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierpack import diffcore as dc
from hierpack.errors import DimensionError, UsageError


def leaf(x):
    return dc.Tensor(x, requires_grad=True)


# ------------------------------------------------------------------- matmul


def test_matmul_identity():
    out = dc.matmul([[1, 0], [0, 1]], [[5], [7]])
    np.testing.assert_array_equal(out.data, [[5], [7]])


def test_matmul_scalar_chain_rule():
    a, b = leaf([[2.0]]), leaf([[3.0]])
    dc.matmul(a, b).backward()
    assert a.grad[0, 0] == 3.0 and b.grad[0, 0] == 2.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(dc.matmul(a, b).data - ref)) <= 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -------------------------------------------------------------- elementwise


def test_sign_values_and_no_gradient():
    x = leaf([-2.0, 0.0, 3.0])
    s = dc.elementwise("sign", x)
    np.testing.assert_array_equal(s.data, [-1, 0, 1])
    assert not s.requires_grad
    dc.sum_(dc.mul(s, x)).backward()
    # gradient flows only through the x factor; sign acts as a constant
    np.testing.assert_array_equal(x.grad, [-1, 0, 1])


def test_relu_forward_backward():
    x = leaf([-1.0, 2.0])
    y = dc.elementwise("relu", x)
    np.testing.assert_array_equal(y.data, [0, 2])
    dc.sum_(y).backward()
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_abs_forward_backward_and_zero_subgradient():
    x = leaf([-3.0])
    y = dc.elementwise("abs", x)
    assert y.data[0] == 3.0
    dc.sum_(y).backward()
    assert x.grad[0] == -1.0
    z = leaf([0.0])
    dc.sum_(dc.abs_(z)).backward()
    assert z.grad[0] == 0.0


def test_scalar_broadcast_and_shape_error():
    out = dc.elementwise("mul", np.ones((2, 2)), 3.0)
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))
    with pytest.raises(DimensionError):
        dc.elementwise("add", np.ones((2, 3)), np.ones((3, 2)))


def test_elementwise_unknown_op():
    with pytest.raises(UsageError):
        dc.elementwise("pow", 1.0, 2.0)


def test_broadcast_gradient_sums_over_broadcast_axis():
    x, b = leaf(np.ones((3, 2))), leaf([1.0, 2.0])
    dc.sum_(dc.add(x, b)).backward()
    np.testing.assert_array_equal(b.grad, [3.0, 3.0])


# ------------------------------------------------------------- segment ops


def test_segment_mean_two_rows():
    out = dc.segment_mean([[1.0, 1.0], [3.0, 3.0]], [0, 0], 1)
    np.testing.assert_array_equal(out.data, [[2, 2]])


def test_segment_mean_reports_empty_segments():
    out, empty = dc.segment_mean([[5.0]], [1], 2, return_empty=True)
    np.testing.assert_array_equal(out.data, [[0], [5]])
    assert empty == {0}


def test_segment_mean_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 4))
    ids = rng.integers(0, 3, size=20)
    out = dc.segment_mean(x, ids, 3).data
    for s in range(3):
        rows = x[ids == s]
        ref = rows.mean(axis=0) if len(rows) else np.zeros(4)
        assert np.max(np.abs(out[s] - ref)) <= 1e-12


def test_segment_mean_backward_divides_by_size():
    x = leaf(np.ones((3, 1)))
    dc.sum_(dc.segment_mean(x, [0, 0, 1], 2)).backward()
    np.testing.assert_allclose(x.grad[:, 0], [0.5, 0.5, 1.0])


def test_segment_mean_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        dc.segment_mean(np.ones((2, 1)), [0, 2], 2)


def test_segment_max_ties_route_to_lowest_row():
    x = leaf([[1.0], [4.0], [4.0]])
    out = dc.segment_max(x, [0, 0, 0], 1)
    assert out.data[0, 0] == 4.0
    dc.sum_(out).backward()
    np.testing.assert_array_equal(x.grad[:, 0], [0, 1, 0])


def test_gather_rows_selection_and_duplicates():
    x = leaf([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(dc.gather_rows(x, [2, 0]).data, [[3], [1]])
    dc.sum_(dc.gather_rows(x, [0, 0])).backward()
    assert x.grad[0, 0] == 2.0


def test_gather_rows_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 3))
    idx = rng.integers(0, 7, size=12)
    out = dc.gather_rows(x, idx).data
    for r, i in enumerate(idx):
        assert np.array_equal(out[r], x[i])


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        dc.gather_rows(np.ones((2, 1)), [2])


# ------------------------------------------------------------------ losses


def test_cross_entropy_uniform_two_way():
    assert math.isclose(float(dc.losses("cross_entropy", [[0.0, 0.0]], [0]).data), math.log(2),
                        rel_tol=1e-12)


def test_mse_identity():
    assert float(dc.losses("mse", [1.0], [1.0]).data) == 0.0


def test_cross_entropy_stable_for_large_scores():
    loss = dc.cross_entropy([[1000.0, 0.0]], [1])
    assert math.isclose(float(loss.data), 1000.0)


def test_cross_entropy_bad_class():
    with pytest.raises(IndexError):
        dc.cross_entropy([[0.0, 0.0]], [2])


def test_cross_entropy_mask_excludes_classes():
    loss = dc.cross_entropy([[0.0, 0.0, 5.0]], [0], mask=[[True, True, False]])
    assert math.isclose(float(loss.data), math.log(2))


def test_cross_entropy_gradient_vs_finite_differences():
    from hierpack.gradcheck import check_case

    rng = np.random.default_rng(3)
    target = np.array([1, 0, 2])
    err = check_case(lambda s: dc.cross_entropy(s, target), [rng.normal(size=(3, 3))], rng)
    assert err <= 1e-6


def test_binary_ce_matches_formula():
    z, t = np.array([[0.3, -1.2]]), np.array([[1.0, 0.0]])
    p = 1 / (1 + np.exp(-z))
    ref = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert math.isclose(float(dc.binary_ce(z, t).data), ref, rel_tol=1e-12)


def test_unknown_loss_kind():
    with pytest.raises(UsageError):
        dc.losses("hinge", [1.0], [1.0])


# ---------------------------------------------------------------- backward


def test_power_rule():
    x = leaf(3.0)
    dc.mul(x, x).backward()
    assert x.grad == 6.0


def test_two_backward_calls_accumulate():
    x = leaf(3.0)
    y = dc.mul(x, x)
    y.backward()
    y.backward()
    assert x.grad == 12.0


def test_backward_requires_scalar_root():
    with pytest.raises(UsageError):
        dc.mul(leaf([1.0, 2.0]), 2.0).backward()


def test_relu_network_gradient_vs_finite_differences():
    from hierpack.gradcheck import check_case

    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(4, 2))
    err = check_case(lambda w_: dc.sum_(dc.relu(dc.matmul(w_, x))), [w], rng)
    assert err <= 1e-6


def test_deep_chain_does_not_recurse():
    x = leaf(1.0)
    y = x
    for _ in range(5000):
        y = dc.add(y, 0.0)
    y.backward()
    assert x.grad == 1.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with dc.no_grad():
        y = dc.mul(x, 2.0)
    assert not y.requires_grad


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-2, 2)),
       arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_backward_is_linear(a, b):
    w = np.array([[0.5, -1.0], [2.0, 0.25], [1.5, -0.5]])

    def grad_of(*fs):
        x = leaf(w)
        total = None
        for f in fs:
            term = f(x)
            total = term if total is None else dc.add(total, term)
        total.backward()
        return x.grad

    fa = lambda x: dc.sum_(dc.mul(dc.mul(x, x), a))  # noqa: E731
    fb = lambda x: dc.sum_(dc.mul(x, b))  # noqa: E731
    np.testing.assert_allclose(grad_of(fa, fb), grad_of(fa) + grad_of(fb), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.data())
def test_segment_mean_broadcast_back_is_projection(n_seg, d, data):
    ids = np.array(data.draw(st.lists(st.integers(0, n_seg - 1), min_size=1, max_size=20)))
    x = np.random.default_rng(len(ids)).normal(size=(len(ids), d))
    once = dc.segment_mean(x, ids, n_seg).data[ids]
    twice = dc.segment_mean(once, ids, n_seg).data[ids]
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_forward_and_backward_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = leaf(rng.normal(size=(4, 3)))
        x = rng.normal(size=(6, 4))
        loss = dc.cross_entropy(dc.matmul(x, w), rng.integers(0, 3, size=6))
        loss.backward()
        return loss.data.tobytes() + w.grad.tobytes()

    assert run() == run()


# --------------------------------------------------------------- optimizer


def test_adam_one_step_descends():
    store = dc.ParameterStore()
    w = store.add("w", 1.0)
    dc.mul(w, w).backward()
    opt = dc.Adam(store, lr=0.1)
    dc.optimizer_step(store, opt)
    assert w.data ** 2 < 1.0
    assert w.grad == 0.0  # zeroed after the update


def test_adam_zero_gradient_keeps_parameter():
    store = dc.ParameterStore()
    w = store.add("w", [1.5, -2.0])
    dc.Adam(store).step()
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_adam_missing_gradient_names_parameter():
    store = dc.ParameterStore()
    store.add("layer.W", 1.0, requires_grad=False)
    with pytest.raises(UsageError, match="layer.W"):
        dc.Adam(store).step()


def test_adam_solves_least_squares():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(10, 2))
    target = a @ np.array([0.7, -1.3])
    store = dc.ParameterStore()
    w = store.add("w", np.zeros(2))
    opt = dc.Adam(store, lr=0.1)
    for _ in range(200):
        loss = dc.mse(dc.matmul(a, dc.reshape(w, (2, 1))), target.reshape(-1, 1))
        loss.backward()
        opt.step()
    final = float(dc.mse(a @ w.data.reshape(2, 1), target.reshape(-1, 1)).data)
    assert final <= 1e-6


def test_parameter_store_order_and_uniqueness():
    store = dc.ParameterStore()
    for name in ("b.x", "a.y", "a.x"):
        store.add(name, 0.0)
    assert store.names() == ["a.x", "a.y", "b.x"]
    assert store.names("a.") == ["a.x", "a.y"]
    with pytest.raises(UsageError):
        store.add("a.x", 1.0)

"""Autodiff core: op values, backward rules, and graph mechanics."""

import numpy as np
import pytest

from fakedet import tensor as tt
from fakedet.tensor import Tensor


def t64(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


# ---- construction and introspection --------------------------------------


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert tt.zeros((2, 3)).dtype == np.float32
    assert tt.ones((4,)).data.tolist() == [1.0, 1.0, 1.0, 1.0]


def test_item_requires_single_element():
    assert Tensor([[3.5]]).item() == 3.5
    with pytest.raises(ValueError):
        Tensor([1.0, 2.0]).item()


def test_seeded_creation_is_reproducible():
    a = tt.uniform((3, 4), -1.0, 1.0, seed=7)
    b = tt.uniform((3, 4), -1.0, 1.0, seed=7)
    c = tt.uniform((3, 4), -1.0, 1.0, seed=8)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert a.data.min() >= -1.0 and a.data.max() < 1.0
    n = tt.normal((1000,), mean=2.0, std=0.1, seed=3)
    assert abs(float(n.data.mean()) - 2.0) < 0.02


def test_creation_rejects_bad_shapes():
    with pytest.raises(ValueError):
        tt.zeros((2, -1))
    with pytest.raises(ValueError):
        tt.uniform((0.5,), seed=1)  # non-integer extent


# ---- elementwise arithmetic ---------------------------------------------


def test_add_mul_values_and_grads():
    x = t64([1.0, 2.0, 3.0], requires_grad=True)
    y = t64([4.0, 5.0, 6.0], requires_grad=True)
    out = tt.reduce_sum(x * y + x)
    out.backward()
    assert out.item() == 4.0 + 10.0 + 18.0 + 6.0
    np.testing.assert_allclose(x.grad, [5.0, 6.0, 7.0])
    np.testing.assert_allclose(y.grad, [1.0, 2.0, 3.0])


def test_scalar_operands_are_allowed_but_shapes_must_match():
    x = Tensor([1.0, 2.0])
    assert (x + 1.0).data.tolist() == [2.0, 3.0]
    assert (3.0 - x).data.tolist() == [2.0, 1.0]
    assert (2.0 / Tensor([1.0, 4.0])).data.tolist() == [2.0, 0.5]
    with pytest.raises(ValueError):
        tt.add(x, Tensor([[1.0, 2.0]]))  # (2,) vs (1,2): no implicit broadcast
    with pytest.raises(ValueError):
        tt.mul(x, Tensor([1.0, 2.0, 3.0]))


def test_div_and_reciprocal_grads():
    x = t64([2.0, 4.0], requires_grad=True)
    y = t64([8.0, 2.0], requires_grad=True)
    out = tt.reduce_sum(x / y)
    out.backward()
    np.testing.assert_allclose(x.grad, [1 / 8, 1 / 2])
    np.testing.assert_allclose(y.grad, [-2 / 64, -4 / 4])


def test_power_exp_log():
    x = t64([1.0, 2.0, 3.0], requires_grad=True)
    out = tt.reduce_sum(x ** 3)
    out.backward()
    np.testing.assert_allclose(x.grad, 3 * x.data ** 2)
    e = tt.exp(t64([0.0, 1.0]))
    np.testing.assert_allclose(e.data, [1.0, np.e])
    lg = tt.log(t64([1.0, np.e]))
    np.testing.assert_allclose(lg.data, [0.0, 1.0], atol=1e-15)
    with pytest.raises(ValueError):
        tt.log(t64([1.0, 0.0]))
    with pytest.raises(ValueError):
        tt.log(t64([-1.0]))


def test_maximum_routes_gradient_above_threshold_only():
    x = t64([-2.0, -0.5, 0.5, 3.0], requires_grad=True)
    out = tt.reduce_sum(tt.maximum(x, 0.0))
    out.backward()
    assert out.item() == 3.5
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0, 1.0])


def test_clip_gradient_zero_at_and_beyond_bounds():
    x = t64([-1.0, 0.0, 0.5, 1.0, 2.0], requires_grad=True)
    out = tt.reduce_sum(tt.clip(x, 0.0, 1.0))
    out.backward()
    np.testing.assert_allclose(x.data, x.data)  # values untouched
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 1.0, 0.0, 0.0])


# ---- matmul --------------------------------------------------------------


def test_matmul_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_allclose((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_grads():
    a = t64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = t64([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    tt.reduce_sum(a @ b).backward()
    # d/da sum(AB) = ones @ B^T, d/db = A^T @ ones
    np.testing.assert_allclose(a.grad, np.ones((2, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 2)))


def test_matmul_batched_and_shape_errors():
    a = Tensor(np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4))
    b = Tensor(np.arange(2 * 4 * 5, dtype=np.float32).reshape(2, 4, 5))
    out = a @ b
    assert out.shape == (2, 3, 5)
    np.testing.assert_allclose(out.data, a.data @ b.data)
    with pytest.raises(ValueError):
        tt.matmul(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))  # rank 1
    with pytest.raises(ValueError):
        tt.matmul(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0]]))  # inner dims
    with pytest.raises(ValueError):
        tt.matmul(a, Tensor(np.zeros((3, 4, 5), dtype=np.float32)))  # batch prefix


# ---- reductions and softmax ----------------------------------------------


def test_reduce_sum_axes_and_keepdims():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert tt.reduce_sum(x).item() == 15.0
    np.testing.assert_allclose(tt.reduce_sum(x, axis=0).data, [3.0, 5.0, 7.0])
    np.testing.assert_allclose(tt.reduce_sum(x, axis=1, keepdims=True).data,
                               [[3.0], [12.0]])
    np.testing.assert_allclose(tt.reduce_sum(x, axis=(0, 1)).data, 15.0)
    with pytest.raises(ValueError):
        tt.reduce_sum(x, axis=2)


def test_reduce_mean_gradient_spreads_evenly():
    x = t64(np.ones((2, 4)), requires_grad=True)
    tt.reduce_mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full((2, 4), 1 / 8))
    y = t64(np.ones((2, 4)), requires_grad=True)
    tt.reduce_sum(tt.reduce_mean(y, axis=1)).backward()
    np.testing.assert_allclose(y.grad, np.full((2, 4), 1 / 4))


def test_softmax_known_value_and_shift_invariance():
    out = tt.softmax(Tensor([[0.0, float(np.log(3.0))]]))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-7)
    x = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float64)
    a = tt.softmax(Tensor(x)).data
    b = tt.softmax(Tensor(x + 100.0)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=-1), np.ones(5), atol=1e-12)


def test_softmax_gradient_matches_finite_differences():
    coef = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
    err = tt.grad_check(
        lambda x: tt.reduce_sum(tt.softmax(x, axis=-1) * coef),
        Tensor(np.random.default_rng(2).normal(size=(3, 4)), dtype=np.float64))
    assert err < 1e-7


# ---- shape ops -----------------------------------------------------------


def test_reshape_transpose_roundtrip_grads():
    x = t64(np.arange(24).reshape(2, 3, 4), requires_grad=True)
    coef = Tensor(np.random.default_rng(0).normal(size=(4, 3, 2)))
    out = tt.reduce_sum(x.transpose((2, 1, 0)) * coef)
    out.backward()
    np.testing.assert_allclose(x.grad, coef.data.transpose(2, 1, 0))
    y = t64(np.arange(6), requires_grad=True)
    tt.reduce_sum(y.reshape(2, 3)[0]).backward()
    np.testing.assert_allclose(y.grad, [1, 1, 1, 0, 0, 0])


def test_concat_values_and_grads():
    a = t64([[1.0, 2.0]], requires_grad=True)
    b = t64([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    out = tt.concat([a, b], axis=0)
    assert out.shape == (3, 2)
    coef = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    tt.reduce_sum(out * coef).backward()
    np.testing.assert_allclose(a.grad, [[1.0, 2.0]])
    np.testing.assert_allclose(b.grad, [[3.0, 4.0], [5.0, 6.0]])


def test_broadcast_to_sums_gradient_back():
    x = t64([1.0, 2.0], requires_grad=True)
    out = tt.broadcast_to(x, (3, 2))
    assert out.shape == (3, 2)
    tt.reduce_sum(out).backward()
    np.testing.assert_allclose(x.grad, [3.0, 3.0])
    y = t64([[5.0]], requires_grad=True)
    tt.reduce_sum(tt.broadcast_to(y, (2, 4))).backward()
    np.testing.assert_allclose(y.grad, [[8.0]])


def test_getitem_scatters_gradient():
    x = t64(np.arange(12).reshape(3, 4), requires_grad=True)
    tt.reduce_sum(x[1] * Tensor(np.array([1.0, 2.0, 3.0, 4.0]))).backward()
    expect = np.zeros((3, 4))
    expect[1] = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_allclose(x.grad, expect)


# ---- graph mechanics -----------------------------------------------------


def test_fanout_accumulates_gradients():
    x = t64([3.0], requires_grad=True)
    y = x * x + x * x  # x used four times
    tt.reduce_sum(y).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_backward_requires_scalar_with_graph():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()
    with pytest.raises(ValueError):
        Tensor([1.0]).backward()


def test_no_grad_suppresses_graph_recording():
    x = t64([2.0], requires_grad=True)
    with tt.no_grad():
        y = x * x
        assert not tt.is_grad_enabled()
    assert not y.requires_grad
    assert tt.is_grad_enabled()
    z = x * x
    assert z.requires_grad


def test_detach_cuts_the_graph():
    x = t64([2.0], requires_grad=True)
    y = (x * x).detach() * x
    tt.reduce_sum(y).backward()
    np.testing.assert_allclose(x.grad, [4.0])  # only the direct factor


def test_tape_orders_parents_before_children():
    x = t64([1.0], requires_grad=True)
    y = x * 2.0
    z = y + x
    tape = tt.Tape.trace(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]
    assert tape.nodes[-1] is z


def test_accumulate_rejects_wrong_shape():
    x = t64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        x._accumulate(np.zeros((3,)))


# ---- gradient checking ---------------------------------------------------


def test_grad_check_accepts_only_float64_scalar_functions():
    with pytest.raises(ValueError):
        tt.grad_check(lambda x: tt.reduce_sum(x), Tensor([1.0, 2.0]))  # float32
    with pytest.raises(ValueError):
        tt.grad_check(lambda x: x * 2.0, t64([1.0, 2.0]))  # non-scalar


def test_grad_check_small_error_on_smooth_function():
    err = tt.grad_check(
        lambda x: tt.reduce_sum(tt.exp(x) * x),
        Tensor(np.random.default_rng(5).normal(size=(4,)), dtype=np.float64))
    assert err < 1e-8


def test_grad_check_flags_a_wrong_gradient():
    def broken(x):
        # correct value, deliberately wrong backward rule
        def bwd(g):
            x._accumulate(np.full_like(x.data, 3.0) * g)
        return Tensor._op(np.asarray(np.sum(x.data)), (x,), bwd)

    err = tt.grad_check(broken, t64([1.0, 2.0]))
    assert err > 0.1

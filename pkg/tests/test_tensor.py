"""Tensor core: elementwise ops, matmul, softmax, reductions, backward."""

import numpy as np
import pytest
from conftest import central_diff_grad, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from latentflow.tensor import NonFiniteError, ShapeError, Tensor, cat, check_finite, no_grad, stack


class TestElementwise:
    def test_add_componentwise(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_identity(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        out = x * 1.0
        np.testing.assert_array_equal(out.data, x.data)

    def test_incompatible_broadcast_raises(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))

    def test_broadcast_trailing(self):
        out = Tensor(np.ones((2, 3))) + Tensor(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from([1, 2, 3, 5]), min_size=0, max_size=3),
           st.lists(st.sampled_from([1, 2, 3, 5]), min_size=0, max_size=3),
           st.lists(st.sampled_from([1, 2, 3, 5]), min_size=0, max_size=3))
    def test_broadcast_shape_associative(self, sa, sb, sc):
        try:
            np.broadcast_shapes(sa, sb, sc)
        except ValueError:
            return
        a, b, c = (Tensor(np.ones(s)) for s in (sa, sb, sc))
        left = ((a + b) + c).shape
        right = (a + (b + c)).shape
        assert left == right


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(2).normal(size=(3, 3))
        out = Tensor(np.eye(3)) @ Tensor(x)
        np.testing.assert_allclose(out.data, x, atol=1e-12)

    def test_hand_computed(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dimensions"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))

    def test_backward_matches_finite_differences(self, rng):
        a = rng.uniform(-1, 1, size=(5, 7))
        b = rng.uniform(-1, 1, size=(7, 3))
        w = rng.normal(size=(5, 3))  # projection making the loss scalar

        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        loss = ((ta @ tb) * Tensor(w)).sum()
        loss.backward()

        def f(a_, b_):
            return float(((a_ @ b_) * w).sum())

        fd_a = central_diff_grad(f, [a.copy(), b.copy()], 0)
        fd_b = central_diff_grad(f, [a.copy(), b.copy()], 1)
        assert rel_err(ta.grad, fd_a) <= 1e-4
        assert rel_err(tb.grad, fd_b) <= 1e-4

    def test_batched_matmul_grad(self, rng):
        a = rng.uniform(-1, 1, size=(2, 4, 3))
        b = rng.uniform(-1, 1, size=(3, 5))
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        (ta @ tb).sum().backward()

        def f(a_, b_):
            return float((a_ @ b_).sum())

        assert rel_err(ta.grad, central_diff_grad(f, [a.copy(), b.copy()], 0)) <= 1e-4
        assert rel_err(tb.grad, central_diff_grad(f, [a.copy(), b.copy()], 1)) <= 1e-4


class TestSoftmax:
    def test_uniform(self):
        out = Tensor([0.0, 0.0, 0.0]).softmax()
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_no_overflow(self):
        out = Tensor([1000.0, 0.0]).softmax()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)
        assert np.all(np.isfinite(out.data))

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(4, 6)))
        out = x.softmax(axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-6)

    def test_grad(self, rng):
        x = rng.uniform(-1, 1, size=(3, 5))
        w = rng.normal(size=(3, 5))
        tx = Tensor(x, requires_grad=True)
        (tx.softmax(axis=-1) * Tensor(w)).sum().backward()

        def f(x_):
            e = np.exp(x_ - x_.max(axis=-1, keepdims=True))
            return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

        assert rel_err(tx.grad, central_diff_grad(f, [x.copy()], 0)) <= 1e-4


class TestBackward:
    def test_sum_of_squares(self, rng):
        x = rng.normal(size=7)
        tx = Tensor(x, requires_grad=True)
        (tx * tx).sum().backward()
        np.testing.assert_allclose(tx.grad, 2 * x, rtol=1e-12)

    def test_linear_map_outer_product(self, rng):
        W = rng.uniform(-1, 1, size=(4, 6))
        x = rng.uniform(-1, 1, size=(6, 1))
        tW = Tensor(W, requires_grad=True)
        (tW @ Tensor(x)).sum().backward()
        # analytic: ones(4,1) @ x.T
        np.testing.assert_allclose(tW.grad, np.ones((4, 1)) @ x.T, atol=1e-12)

        def f(W_):
            return float((W_ @ x).sum())

        assert rel_err(tW.grad, central_diff_grad(f, [W.copy()], 0)) <= 1e-4

    def test_disconnected_leaf_has_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        (x * x).sum().backward()
        assert y.grad is None

    def test_non_scalar_loss_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * 2.0).backward()

    def test_accumulation_and_reset(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * first)
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_visits_once(self, rng):
        # y used twice: gradient must be the sum of both routes, not doubled
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = x * 2.0
        (y * y).sum().backward()
        np.testing.assert_allclose(x.grad, 8 * x.data, rtol=1e-10)

    def test_no_grad_disables_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad


UNARY_CASES = [
    ("exp", lambda t: t.exp(), lambda x: np.exp(x), (-1, 1)),
    ("log", lambda t: t.log(), lambda x: np.log(x), (0.5, 1.5)),
    ("sqrt", lambda t: t.sqrt(), lambda x: np.sqrt(x), (0.5, 1.5)),
    ("tanh", lambda t: t.tanh(), lambda x: np.tanh(x), (-1, 1)),
    ("sigmoid", lambda t: t.sigmoid(), lambda x: 1 / (1 + np.exp(-x)), (-1, 1)),
    ("silu", lambda t: t.silu(), lambda x: x / (1 + np.exp(-x)), (-1, 1)),
    ("relu", lambda t: t.relu(), lambda x: np.maximum(x, 0), (0.1, 1.0)),
    ("pow3", lambda t: t ** 3.0, lambda x: x ** 3.0, (-1, 1)),
    ("neg", lambda t: -t, lambda x: -x, (-1, 1)),
    ("mean", lambda t: t.mean(axis=0, keepdims=True), lambda x: x.mean(axis=0, keepdims=True), (-1, 1)),
]


@pytest.mark.parametrize("name,top,npop,rng_range", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_grads_match_finite_differences(name, top, npop, rng_range, rng):
    x = rng.uniform(*rng_range, size=(4, 3))
    w = rng.normal(size=(4, 3))
    tx = Tensor(x, requires_grad=True)
    (top(tx) * Tensor(w)).sum().backward()

    def f(x_):
        return float((npop(x_) * w).sum())

    assert rel_err(tx.grad, central_diff_grad(f, [x.copy()], 0)) <= 1e-4


BINARY_CASES = [
    ("add", lambda a, b: a + b, lambda a, b: a + b),
    ("sub", lambda a, b: a - b, lambda a, b: a - b),
    ("mul", lambda a, b: a * b, lambda a, b: a * b),
    ("div", lambda a, b: a / (b + 2.0), lambda a, b: a / (b + 2.0)),
]


@pytest.mark.parametrize("name,top,npop", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
def test_binary_grads_with_broadcast(name, top, npop, rng):
    a = rng.uniform(-1, 1, size=(3, 4))
    b = rng.uniform(-1, 1, size=(4,))
    w = rng.normal(size=(3, 4))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    (top(ta, tb) * Tensor(w)).sum().backward()

    def f(a_, b_):
        return float((npop(a_, b_) * w).sum())

    assert rel_err(ta.grad, central_diff_grad(f, [a.copy(), b.copy()], 0)) <= 1e-4
    assert rel_err(tb.grad, central_diff_grad(f, [a.copy(), b.copy()], 1)) <= 1e-4


def test_movement_op_grads(rng):
    x = rng.uniform(-1, 1, size=(2, 3, 4))
    w = rng.normal(size=(4, 6))
    tx = Tensor(x, requires_grad=True)
    y = tx.transpose((1, 0, 2)).reshape(3, 8)[:, 2:6]
    (y @ Tensor(w[:4, :])).sum().backward()

    def f(x_):
        y_ = x_.transpose(1, 0, 2).reshape(3, 8)[:, 2:6]
        return float((y_ @ w[:4, :]).sum())

    assert rel_err(tx.grad, central_diff_grad(f, [x.copy()], 0)) <= 1e-4


def test_cat_stack_grads(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))
    w = rng.normal(size=(4, 3))
    ta = Tensor(a, requires_grad=True)
    tb = Tensor(b, requires_grad=True)
    (cat([ta, tb], axis=0) * Tensor(w)).sum().backward()
    np.testing.assert_allclose(ta.grad, w[:2], atol=1e-12)
    np.testing.assert_allclose(tb.grad, w[2:], atol=1e-12)

    ta.zero_grad()
    tb.zero_grad()
    (stack([ta, tb], axis=0)).sum().backward()
    np.testing.assert_allclose(ta.grad, np.ones((2, 3)), atol=1e-12)


def test_check_finite():
    ok = Tensor([1.0, 2.0])
    assert check_finite(ok, "ok") is ok
    with pytest.raises(NonFiniteError, match="bad.*non-finite"):
        check_finite(Tensor([1.0, np.nan]), "bad")
    with pytest.raises(NonFiniteError):
        check_finite(Tensor([np.inf]), "inf")


def test_dtype_preserved():
    x64 = Tensor(np.ones(3, dtype=np.float64))
    assert (x64 * 2.0).dtype == np.float64
    x32 = Tensor(np.ones(3, dtype=np.float32))
    assert (x32 + 1.0).dtype == np.float32

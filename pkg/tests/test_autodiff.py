import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prweave import autodiff as ad
from prweave.autodiff import Tensor


def _fd(fn, t, h=1e-5):
    return ad.finite_difference_gradient(lambda: fn().item(), t, h)


def test_matmul_row_selection():
    out = ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_softplus_zero_is_ln2():
    assert ad.softplus(Tensor([0.0])).data[0] == pytest.approx(0.6931471805599453, abs=1e-16)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-16)


def test_square_derivative_at_three():
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum_(x * x))
    assert x.grad[0] == 6.0


def test_mse_gradient_matches_finite_differences():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([0.0, 0.0])
    ad.backward(ad.mse(a, b))
    np.testing.assert_allclose(a.grad, [1.0, 2.0], atol=1e-15)
    fd = _fd(lambda: ad.mse(a, b), a)
    np.testing.assert_allclose(fd, [1.0, 2.0], atol=1e-8)


def test_softmax_mse_composite():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=4), requires_grad=True)
    target = Tensor(rng.normal(size=4))
    f = lambda: ad.mse(ad.softmax(a), target)
    ad.backward(f())
    assert ad.relative_error(a.grad, _fd(f, a)) < 1e-6


def test_fd_oracle_trivial_cases():
    x = Tensor([3.0])
    g = ad.finite_difference_gradient(lambda: float(x.data[0] ** 2), x, 1e-5)
    assert abs(g[0] - 6.0) < 1e-8
    z = Tensor([0.0])
    g = ad.finite_difference_gradient(lambda: ad.sum_(ad.softplus(z)).item(), z, 1e-5)
    assert abs(g[0] - 0.5) < 1e-8


def test_fd_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda: 0.0, Tensor([1.0]), 0.0)


def test_shape_errors_name_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="mse"):
        ad.mse(Tensor(np.ones(3)), Tensor(np.ones(2)))
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.mul(Tensor([1.0]), np.inf)


def test_dangling_node_detected():
    w = Tensor([2.0], requires_grad=True)
    out = ad.sum_(w * w)
    w.assign([5.0])
    with pytest.raises(ad.DanglingNodeError):
        ad.backward(out)


def test_backward_seed_shape_checked():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(w * 2.0, seed=np.ones(3))


def test_shared_node_visited_once():
    x = Tensor([1.5], requires_grad=True)
    y = x * x
    z = ad.sum_(y + y)  # dz/dx = 4x
    ad.backward(z)
    assert x.grad[0] == pytest.approx(6.0)


def test_concat_routes_gradient_to_segment():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    cat = ad.concat([a, b], axis=1)
    ad.backward(ad.sum_(ad.slice_(cat, 1, 3, 5) * 3.0))
    np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))
    np.testing.assert_array_equal(b.grad, np.full((2, 2), 3.0))


@given(
    st.lists(st.integers(1, 4), min_size=1, max_size=4),
    st.integers(1, 3),
    st.integers(0, 2**31),
)
@settings(max_examples=50, deadline=None)
def test_concat_slice_round_trip(widths, rows, seed):
    rng = np.random.default_rng(seed)
    parts = [Tensor(rng.normal(size=(rows, w))) for w in widths]
    cat = ad.concat(parts, axis=1)
    start = 0
    for p in parts:
        w = p.shape[1]
        np.testing.assert_array_equal(ad.slice_(cat, 1, start, start + w).data, p.data)
        start += w


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_softmax_normalised(rows, cols, seed):
    rng = np.random.default_rng(seed)
    y = ad.softmax(Tensor(rng.normal(scale=5.0, size=(rows, cols)))).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def _kernel_cases():
    """Scalar-valued closures over each differentiable kernel."""
    cases = []

    def add_case(rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        return [a, b], lambda: ad.sum_(ad.add(a, b) * w)

    def sub_case(rng):
        a = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        w = rng.normal(size=(2, 5))
        return [a, b], lambda: ad.sum_(ad.sub(a, b) * w)

    def mul_case(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 1)), requires_grad=True)
        w = rng.normal(size=(2, 3, 4))
        return [a, b], lambda: ad.sum_(ad.mul(a, b) * w)

    def matmul_case(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = rng.normal(size=(2, 3, 5))
        return [a, b], lambda: ad.sum_(ad.matmul(a, b) * w)

    def bmm_case(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 2)), requires_grad=True)
        w = rng.normal(size=(2, 3, 2))
        return [a, b], lambda: ad.sum_(ad.matmul(a, b) * w)

    def softplus_case(rng):
        a = Tensor(rng.normal(scale=3.0, size=(4, 3)), requires_grad=True)
        w = rng.normal(size=(4, 3))
        return [a], lambda: ad.sum_(ad.softplus(a) * w)

    def softmax_case(rng):
        a = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = rng.normal(size=(3, 6))
        return [a], lambda: ad.sum_(ad.softmax(a) * w)

    def concat_slice_case(rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        w = rng.normal(size=(2, 3))
        return [a, b], lambda: ad.sum_(ad.slice_(ad.concat([a, b], axis=1), 1, 1, 4) * w)

    def mse_case(rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        return [a, b], lambda: ad.mse(a, b)

    def mean_case(rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3,))
        return [a], lambda: ad.sum_(ad.mean(a, axis=1) * w)

    def abs_case(rng):
        a = Tensor(rng.uniform(0.1, 1.0, size=(5,)) * rng.choice([-1, 1], size=5), requires_grad=True)
        return [a], lambda: ad.sum_(ad.abs_(a))

    def attention_case(rng):
        q = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        w = rng.normal(size=(2, 3, 4))
        return [q, k, v], lambda: ad.sum_(ad.attention(q, k, v, 2) * w)

    return [add_case, sub_case, mul_case, matmul_case, bmm_case, softplus_case,
            softmax_case, concat_slice_case, mse_case, mean_case, abs_case, attention_case]


@pytest.mark.parametrize("case", _kernel_cases(), ids=lambda c: c.__name__)
def test_kernel_gradients_match_finite_differences(case):
    # 100 random instances spread over the kernels, ~9 per kernel
    for seed in range(9):
        rng = np.random.default_rng(1000 + seed)
        params, f = case(rng)
        ad.backward(f())
        for p in params:
            fd = ad.finite_difference_gradient(lambda: f().item(), p, 1e-5)
            assert ad.relative_error(p.grad, fd) < 1e-4


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=s) for s in [(1, 4, 6), (1, 5, 6), (1, 5, 6)])
    out = ad.attention(Tensor(q), Tensor(k), Tensor(v), 3).data
    heads, dh = 3, 2
    ref = np.zeros_like(out)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(4):
            scores = [sum(q[0, i, cols][c] * k[0, j, cols][c] for c in range(dh)) / math.sqrt(dh)
                      for j in range(5)]
            m = max(scores)
            ws = [math.exp(s - m) for s in scores]
            z = sum(ws)
            for j in range(5):
                ref[0, i, cols] += ws[j] / z * v[0, j, cols]
    np.testing.assert_allclose(out, ref, atol=1e-13)

"""Engine tests: every op against the central-difference oracle, plus the
graph semantics (accumulation, consumption, determinism)."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import segreg.tensor as T
from segreg.tensor import ShapeError, Tensor, UnsupportedOpError, grad_check


def r(shape, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


# --- forward values ----------------------------------------------------


def test_elementwise_forward_values():
    a = Tensor([1.0, 2.0, 3.0])
    b = Tensor([4.0, 5.0, 6.0])
    assert np.array_equal((a + b).data, [5.0, 7.0, 9.0])
    assert np.array_equal((a - b).data, [-3.0, -3.0, -3.0])
    assert np.array_equal((a * b).data, [4.0, 10.0, 18.0])
    assert np.allclose((a / b).data, [0.25, 0.4, 0.5])
    assert np.array_equal((a + 1.0).data, [2.0, 3.0, 4.0])
    assert np.array_equal((2.0 * a).data, [2.0, 4.0, 6.0])


def test_matmul_forward():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    assert np.array_equal((a @ b).data, [[17.0], [39.0]])


def test_relu_and_leaky():
    x = Tensor([-2.0, 0.0, 3.0])
    assert np.array_equal(x.relu().data, [0.0, 0.0, 3.0])
    assert np.allclose(x.leaky_relu(0.1).data, [-0.2, 0.0, 3.0])


def test_softmax_channels_sums_to_one():
    x = Tensor(r((2, 5, 4, 4), seed=3, lo=-10, hi=10).astype(np.float32))
    p = T.softmax_channels(x)
    assert np.abs(p.data.sum(axis=1) - 1.0).max() < 1e-5


def test_maxpool_and_upsample_shapes():
    x = Tensor(r((2, 3, 8, 6), seed=1))
    assert T.maxpool2x2(x).shape == (2, 3, 4, 3)
    assert T.upsample2x(x).shape == (2, 3, 16, 12)


def test_conv2d_identity_kernel():
    x = Tensor(r((1, 1, 5, 5), seed=2))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = T.conv2d(x, Tensor(w))
    assert np.allclose(y.data, x.data)


def test_conv2d_matches_direct_convolution():
    # independent oracle: explicit loop over output positions
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = (w[o] * xp[n, :, i : i + 3, j : j + 3]).sum() + b[o]
    assert np.abs(out - ref).max() < 1e-12


def test_forward_determinism():
    x = Tensor(r((3, 4, 8, 8), seed=9).astype(np.float32))
    w = Tensor(r((5, 4, 3, 3), seed=10).astype(np.float32))
    a = T.conv2d(x, w).data
    b = T.conv2d(x, w).data
    assert np.array_equal(a, b)


# --- gradient oracle, one case per op kind ------------------------------

# each entry builds (f, x) where f: Tensor -> scalar Tensor exercises the op
CASES = {
    "add": lambda s: (lambda x: (x + Tensor(r((3, 4), s + 50))).square().sum(), r((3, 4), s)),
    "sub": lambda s: (lambda x: (x - Tensor(r((3, 4), s + 50))).square().sum(), r((3, 4), s)),
    "mul": lambda s: (lambda x: (x * Tensor(r((3, 4), s + 50))).sum(), r((3, 4), s)),
    "div": lambda s: (
        lambda x: (x / Tensor(r((3, 4), s + 50, lo=0.5, hi=2.0))).sum(),
        r((3, 4), s),
    ),
    "scale": lambda s: (lambda x: T.scale(x, -1.7).square().sum(), r((3, 4), s)),
    "matmul": lambda s: (lambda x: (x @ Tensor(r((4, 2), s + 50))).square().sum(), r((3, 4), s)),
    "conv2d": lambda s: (
        lambda x: T.conv2d(x, Tensor(r((3, 2, 3, 3), s + 50)), Tensor(r((3,), s + 51)))
        .square()
        .sum(),
        r((2, 2, 5, 4), s),
    ),
    "maxpool2x2": lambda s: (lambda x: T.maxpool2x2(x).square().sum(), r((2, 3, 4, 6), s)),
    "upsample2x": lambda s: (lambda x: T.upsample2x(x).square().sum(), r((2, 3, 3, 2), s)),
    "concat_channels": lambda s: (
        lambda x: T.concat_channels([x, Tensor(r((2, 3, 4, 4), s + 50))]).square().sum(),
        r((2, 2, 4, 4), s),
    ),
    "relu": lambda s: (lambda x: x.relu().square().sum(), r((3, 4), s) + 0.2),
    "leaky_relu": lambda s: (lambda x: x.leaky_relu(0.05).square().sum(), r((3, 4), s) + 0.2),
    "exp": lambda s: (lambda x: x.exp().sum(), r((3, 4), s)),
    "log": lambda s: (lambda x: x.log().sum(), r((3, 4), s, lo=0.3, hi=3.0)),
    "square": lambda s: (lambda x: x.square().sum(), r((3, 4), s)),
    "sqrt": lambda s: (lambda x: x.sqrt().sum(), r((3, 4), s, lo=0.3, hi=3.0)),
    "cos": lambda s: (lambda x: x.cos().sum(), r((3, 4), s, lo=-3.0, hi=3.0)),
    "sin": lambda s: (lambda x: x.sin().sum(), r((3, 4), s, lo=-3.0, hi=3.0)),
    "sum": lambda s: (
        lambda x: (x.sum(axis=1) * Tensor(r((3,), s + 50))).sum(),
        r((3, 4), s),
    ),
    "mean": lambda s: (
        lambda x: (x.mean(axis=0, keepdims=True) * Tensor(r((1, 4), s + 50))).sum(),
        r((3, 4), s),
    ),
    "softmax_channels": lambda s: (
        lambda x: T.softmax_channels(x).square().sum(),
        r((2, 5, 3, 3), s),
    ),
    "gather_rows": lambda s: (
        lambda x: T.gather_rows(x, np.array([0, 2, 2, 1])).square().sum(),
        r((4, 3), s),
    ),
    "reshape": lambda s: (
        lambda x: (x.reshape((2, 6)) @ Tensor(r((6, 1), s + 50))).sum(),
        r((3, 4), s),
    ),
    "moveaxis": lambda s: (
        lambda x: (x.moveaxis(0, 1) @ Tensor(r((3, 2), s + 50))).square().sum(),
        r((3, 4), s),
    ),
}


def test_gradcheck_covers_every_op():
    assert set(CASES) == set(T.supported_ops())


@pytest.mark.parametrize("kind", sorted(CASES))
def test_gradcheck_per_op(kind):
    # 10 random double-precision points per op
    for seed in range(10):
        f, x0 = CASES[kind](seed)
        err = grad_check(f, Tensor(x0), eps=1e-5)
        assert err < 1e-4, f"{kind} seed {seed}: rel err {err:.3e}"


def test_gradcheck_rejects_bad_eps_and_dtype():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), Tensor(r((2,), 0)), eps=1e-2)
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), Tensor(r((2,), 0).astype(np.float32)))


# --- backward semantics --------------------------------------------------


def test_fanout_accumulates():
    # y = x*x + x  =>  dy/dx = 2x + 1
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    y = ((x * x) + x).sum()
    y.backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_backward_linearity():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(5, 3))
    wa = Tensor(rng.normal(size=(3, 2)))
    wb = Tensor(rng.normal(size=(3, 4)))

    def f(x):
        return (x @ wa).square().sum()

    def g(x):
        return (x @ wb).exp().sum()

    a, b = 0.7, -1.3
    x1 = Tensor(x0.copy(), requires_grad=True)
    h = T.add(T.scale(f(x1), a), T.scale(g(x1), b))
    h.backward()
    x2 = Tensor(x0.copy(), requires_grad=True)
    f(x2).backward()
    x3 = Tensor(x0.copy(), requires_grad=True)
    g(x3).backward()
    assert np.abs(x1.grad - (a * x2.grad + b * x3.grad)).max() < 1e-10


def test_backward_requires_scalar_root():
    x = Tensor(r((2, 2), 0), requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_double_backward_errors():
    x = Tensor(r((3,), 0), requires_grad=True)
    y = x.square().sum()
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_constant_root_is_a_noop():
    y = Tensor(r((3,), 0)).square().sum()
    y.backward()  # nothing tracked, nothing raised


def test_grad_accumulates_across_graphs():
    x = Tensor(np.array([2.0]), requires_grad=True)
    x.square().sum().backward()
    x.square().sum().backward()
    assert np.allclose(x.grad, [8.0])  # 4 + 4


def test_no_grad_blocks_tracking():
    x = Tensor(r((3,), 0), requires_grad=True)
    with T.no_grad():
        y = x.square().sum()
    assert y._backward is None
    y.backward()  # constant root
    assert x.grad is None


# --- shape and kind errors ----------------------------------------------


def test_shape_error_names_op_and_dims():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        Tensor(np.zeros(2)) + Tensor(np.zeros(3))
    with pytest.raises(ShapeError, match="matmul"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError, match="maxpool2x2"):
        T.maxpool2x2(Tensor(np.zeros((1, 1, 5, 4))))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_unknown_kind_errors():
    with pytest.raises(UnsupportedOpError, match="transmogrify"):
        T.forward_op("transmogrify", [Tensor(np.zeros(2))])


def test_forward_op_dispatch_matches_direct_call():
    x = Tensor(r((2, 3), 0))
    got = T.forward_op("sum", [x], {"axis": 1})
    assert np.array_equal(got.data, x.data.sum(axis=1))


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 2.0]))


def test_log_floor_keeps_values_finite():
    y = Tensor(np.array([0.0, 1e-40, 1.0], dtype=np.float32)).log()
    assert np.isfinite(y.data).all()


# --- property: engine algebra -------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=16))
def test_sum_matches_numpy(vals):
    x = Tensor(np.asarray(vals, dtype=np.float64))
    assert x.sum().item() == np.sum(np.asarray(vals))


@settings(max_examples=30, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 4),
    st.integers(1, 4),
)
def test_matmul_grad_is_transpose_rule(seed, n, m):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(n, m)), requires_grad=True)
    b = Tensor(rng.normal(size=(m, 2)), requires_grad=True)
    (a @ b).sum().backward()
    ones = np.ones((n, 2))
    assert np.allclose(a.grad, ones @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ ones, atol=1e-12)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docsegtr import tensor as T
from docsegtr.errors import ContractError, NumericError, ShapeError, TapeError
from docsegtr.tensor import Tensor, finite_diff_check


def _loop_matmul(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_column_vector(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        expected = _loop_matmul(a, b)
        np.testing.assert_array_equal(expected, [[17.0], [39.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_zero_annihilates(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        assert not T.matmul(a, Tensor(np.zeros((4, 2)))).data.any()

    def test_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_associativity(self, rng):
        for _ in range(20):
            m, k, p, q = rng.integers(1, 6, size=4)
            a, b, c = (Tensor(rng.normal(size=s)) for s in [(m, k), (k, p), (p, q)])
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestConv2d:
    def test_pointwise_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 6)))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_window_count(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 1, 1] == 9.0
        assert out.data[0, 0, 0] == 4.0
        assert out.data[0, 0, 1] == 6.0

    def test_zero_kernel_bias(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4)))
        out = T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor([1.5, -2.0, 0.0]), padding=1)
        assert out.shape == (3, 4, 4)
        np.testing.assert_array_equal(out.data[0], 1.5)
        np.testing.assert_array_equal(out.data[1], -2.0)

    @pytest.mark.parametrize("h,k,s,p", [(7, 3, 2, 1), (8, 3, 1, 0), (5, 1, 1, 0), (9, 3, 3, 0)])
    def test_output_size(self, h, k, s, p):
        out = T.conv2d(Tensor(np.ones((2, h, h))), Tensor(np.ones((4, 2, k, k))), stride=s, padding=p)
        assert out.shape == (4, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 5, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    ref = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
                    assert out[o, i, j] == pytest.approx(ref, abs=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-12)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_plus_minus_one(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-10)

    def test_zero_input_gives_beta(self):
        beta = np.array([0.5, -2.0, 7.0])
        out = T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(3)), Tensor(beta), 1e-5)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (2, 3)))

    def test_moments(self, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(6, 7, 16)))
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-12).data
        assert np.max(np.abs(out.mean(-1))) < 1e-9
        assert np.max(np.abs(out.var(-1) - 1.0)) < 1e-6

    def test_affine_mismatch(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor(np.full(5, 2.0))).data, 0.2)

    def test_closed_form(self):
        out = T.softmax_lastdim(Tensor([0.0, math.log(3.0)])).data
        np.testing.assert_allclose(out, [0.25, 0.75], rtol=1e-14)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance_and_rows(self, xs, c):
        x = np.array(xs)
        a = T.softmax_lastdim(Tensor(x)).data
        b = T.softmax_lastdim(Tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1.0) < 1e-12

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax_lastdim(Tensor([0.0, np.nan]))


class TestBackward:
    def test_square(self):
        x = T.parameter(3.0)
        T.backward(x * x)
        assert x.grad == pytest.approx(6.0)

    def test_sigmoid(self):
        x = T.parameter(0.0)
        T.backward(T.sigmoid(x))
        assert x.grad == pytest.approx(0.25)

    def test_grad_shapes(self, rng):
        w = T.parameter(rng.normal(size=(3, 4)))
        b = T.parameter(rng.normal(size=(4,)))
        T.backward(T.linear(Tensor(rng.normal(size=(2, 5, 3))), w, b).sum())
        assert w.grad.shape == w.shape and b.grad.shape == b.shape

    def test_non_scalar(self):
        x = T.parameter([1.0, 2.0])
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_detached(self):
        with pytest.raises(TapeError):
            T.backward(Tensor(1.0))

    def test_tape_consumed_once(self):
        x = T.parameter(2.0)
        y = x * x
        tape = T.backward(y)
        assert tape.consumed and len(tape.nodes) == 1
        with pytest.raises(TapeError):
            T.backward(y)

    def test_shared_subexpression(self):
        x = T.parameter(2.0)
        y = x * x
        T.backward(y * y + y)  # d/dx (x^4 + x^2) = 4x^3 + 2x
        assert x.grad == pytest.approx(36.0)

    def test_no_grad(self):
        x = T.parameter(2.0)
        with T.no_grad():
            y = x * x
        assert y.is_leaf and not y.requires_grad

    def test_topological_order(self, rng):
        x = T.parameter(rng.normal(size=3))
        y = T.sigmoid(x) * T.exp(x)
        tape = T.Tape.from_output(y.sum())
        pos = {id(t): i for i, t in enumerate(tape.nodes)}
        for t in tape.nodes:
            for p in t._node.parents:
                if id(p) in pos:
                    assert pos[id(p)] < pos[id(t)]


class TestFiniteDiff:
    def test_matmul_sum(self, rng):
        w = Tensor(rng.normal(size=(4, 3)))
        rep = finite_diff_check(lambda x: T.matmul(x, w).sum(), Tensor(rng.normal(size=(2, 4))), h=1e-5, tol=1e-6)
        assert rep.passed, rep

    def test_constant(self):
        rep = finite_diff_check(lambda x: Tensor(4.0), Tensor(np.ones(3)), tol=1e-6)
        assert rep.passed and rep.max_rel_err == 0.0

    def test_relu_kink_skipped(self):
        x = Tensor([-1.0, 0.0, 2.0])
        rep = finite_diff_check(lambda t: T.relu(t).sum(), x, kinks=(0.0,))
        assert rep.skipped == 1 and rep.checked == 2 and rep.passed

    def test_detects_wrong_gradient(self):
        def bad(x):
            return T._make(np.sum(x.data ** 2), (x,), lambda g: (g * x.data,))  # missing factor 2

        assert not finite_diff_check(bad, Tensor([1.0, 2.0])).passed


def _rand_fn(name, rng):
    """Scalar test functions for each primitive; random weights break symmetry."""
    wvec = rng.normal(size=(2, 3, 4, 5))

    def dot(y):
        w = rng_cache.setdefault(y.shape, np.random.default_rng(len(y.shape) + sum(y.shape)).normal(size=y.shape))
        return (y * Tensor(w)).sum()

    rng_cache: dict = {}
    const = Tensor(rng.normal(size=(3, 4, 5)))
    w_mat = Tensor(rng.normal(size=(5, 3)))
    w_conv = Tensor(rng.normal(size=(2, 3, 3, 3)))
    gamma, beta, bias3 = (Tensor(rng.normal(size=n)) for n in (5, 5, 3))
    fns = {
        "matmul": (lambda x: dot(T.matmul(x, w_mat)), (2, 3, 4, 5)),
        "matmul_rhs": (lambda x: dot(T.matmul(const, x)), (5, 2)),
        "conv2d": (lambda x: dot(T.conv2d(x, w_conv, Tensor([0.1, -0.2]), stride=2, padding=1)), (2, 3, 7, 6)),
        "conv2d_weight": (lambda w: dot(T.conv2d(Tensor(wvec[0, :, :, :4].reshape(3, 4, 4)), w, stride=1, padding=1)), (2, 3, 3, 3)),
        "layer_norm": (lambda x: dot(T.layer_norm(x, gamma, beta, 1e-5)), (2, 3, 4, 5)),
        "softmax": (lambda x: dot(T.softmax_lastdim(x)), (2, 3, 4, 5)),
        "sigmoid": (lambda x: dot(T.sigmoid(x)), (2, 3, 4, 5)),
        "gelu": (lambda x: dot(T.gelu(x)), (2, 3, 4, 5)),
        "add": (lambda x: dot(T.add(x, const)), (2, 1, 4, 5)),
        "mul": (lambda x: dot(T.mul(x, const)), (2, 3, 4, 5)),
        "mul_broadcast": (lambda x: dot(T.mul(const, x)), (4, 1)),
        "div": (lambda x: dot(T.div(const, T.exp(x))), (3, 4, 5)),
        "mean": (lambda x: dot(T.mean(x, axis=(1, 3), keepdims=True)), (2, 3, 4, 5)),
        "sum": (lambda x: dot(T.sum_(x, axis=0)), (2, 3, 4, 5)),
        "log_exp_pow": (lambda x: dot(T.log(T.exp(x) + 1.0) ** 1.5), (2, 3, 4, 5)),
        "adaptive_avg_pool2d": (lambda x: dot(T.adaptive_avg_pool2d(x, (3, 2))), (2, 3, 5, 7)),
        "adaptive_avg_pool2d_up": (lambda x: dot(T.adaptive_avg_pool2d(x, 6)), (2, 3, 3, 3)),
        "upsample_nearest2d": (lambda x: dot(T.upsample_nearest2d(x, (8, 6))), (2, 3, 4, 3)),
        "upsample_nearest2d_ragged": (lambda x: dot(T.upsample_nearest2d(x, (5, 7))), (2, 3, 3, 4)),
        "concat": (lambda x: dot(T.concat([x, T.exp(x), const[:2]], axis=0)), (2, 4, 5)),
        "reshape_permute": (lambda x: dot(T.permute(T.reshape(x, (6, 20)), (1, 0)) * 1.0), (2, 3, 4, 5)),
        "linear": (lambda x: dot(T.linear(x, w_mat, bias3)), (2, 3, 4, 5)),
        "take": (lambda x: dot(x[np.array([0, 2, 2]), 1:]), (3, 4, 5)),
        "unfold2d": (lambda x: dot(T.unfold2d(x, 3, 3, padding=1)), (2, 2, 4, 5)),
        "clip": (lambda x: dot(T.clip(x, -0.5, 0.5)), (3, 4, 5)),
    }
    return fns[name]


PRIMITIVES = [
    "matmul", "matmul_rhs", "conv2d", "conv2d_weight", "layer_norm", "softmax", "sigmoid", "gelu",
    "add", "mul", "mul_broadcast", "div", "mean", "sum", "log_exp_pow", "adaptive_avg_pool2d",
    "adaptive_avg_pool2d_up", "upsample_nearest2d", "upsample_nearest2d_ragged", "concat",
    "reshape_permute", "linear", "take", "unfold2d",
]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    rng = np.random.default_rng(7)
    f, shape = _rand_fn(name, rng)
    rep = finite_diff_check(f, Tensor(rng.normal(size=shape)), h=1e-6, tol=1e-4)
    assert rep.passed, (name, rep)


def test_clip_gradient_away_from_bounds():
    rng = np.random.default_rng(3)
    f, shape = _rand_fn("clip", rng)
    rep = finite_diff_check(f, Tensor(rng.normal(size=shape)), h=1e-6, tol=1e-4, kinks=(-0.5, 0.5))
    assert rep.passed


def test_relu_gradient():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(4, 5)))
    rep = finite_diff_check(lambda t: (T.relu(t) * w).sum(), x, kinks=(0.0,))
    assert rep.passed


class TestResampling:
    def test_pool_mean(self):
        out = T.adaptive_avg_pool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 1)
        assert out.data.item() == 2.5

    def test_pool_upsizes_by_duplication(self):
        x = np.arange(4.0).reshape(1, 2, 2)
        out = T.adaptive_avg_pool2d(Tensor(x), 4).data
        np.testing.assert_array_equal(out[0], np.repeat(np.repeat(x[0], 2, 0), 2, 1))

    def test_upsample_integer(self):
        x = np.arange(6.0).reshape(1, 2, 3)
        out = T.upsample_nearest2d(Tensor(x), (4, 6)).data
        np.testing.assert_array_equal(out[0], np.repeat(np.repeat(x[0], 2, 0), 2, 1))

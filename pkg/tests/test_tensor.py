import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motioncompose import tensor as T
from motioncompose.tensor import Tensor, grad_check, no_grad


def rng(seed=0):
    return np.random.default_rng(seed)


def finite_diff(f, x, eps=1e-6):
    """Independent central-difference gradient of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)


class TestForward:
    def test_matmul_identity(self):
        m = rng().standard_normal((3, 3))
        out = T.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        x = rng(1).standard_normal((6, 9)) * 20
        y = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(6), atol=1e-12)

    def test_softmax_masked_bias(self):
        # -1e30 additive bias zeroes masked columns without losing row norm.
        x = rng(2).standard_normal((4, 4))
        bias = np.where(np.eye(4, dtype=bool), 0.0, -1e30)
        y = T.softmax(Tensor(x + bias)).data
        np.testing.assert_allclose(y, np.eye(4), atol=1e-12)

    def test_layer_norm_row_stats(self):
        x = rng(3).standard_normal((5, 16)) * 3 + 1.5
        y = T.layer_norm(Tensor(x), eps=0.0).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-10)

    def test_dropout_inverted_scaling(self):
        x = np.ones((2000,))
        y = T.dropout(Tensor(x), 0.25, rng(4)).data
        kept = y != 0.0
        assert abs(kept.mean() - 0.75) < 0.05
        np.testing.assert_allclose(y[kept], 1.0 / 0.75)

    def test_dropout_deterministic_given_seed(self):
        x = rng(5).standard_normal((50,))
        a = T.dropout(Tensor(x), 0.5, rng(7)).data
        b = T.dropout(Tensor(x), 0.5, rng(7)).data
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_concat_roundtrip(self):
        a, b = rng(6).standard_normal((3, 2)), rng(7).standard_normal((3, 4))
        out = T.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))

    def test_scalar_reductions(self):
        x = np.array([[1.0, -2.0], [3.0, 4.0]])
        assert T.tsum(Tensor(x)).item() == 6.0
        assert T.tmean(Tensor(x)).item() == 1.5
        assert T.tmax(Tensor(x)).item() == 4.0

    def test_no_grad_blocks_recording(self):
        p = T.parameter(np.ones((2, 2)))
        with no_grad():
            out = T.tsum(p * p)
        assert out._parents == ()
        assert not out.requires_grad


class TestBackward:
    def test_sum_of_squares(self):
        # d/dx sum(x^2) at [1,2,3] -> [2,4,6]
        x = T.parameter([1.0, 2.0, 3.0])
        T.tsum(x * x).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)

    def test_matmul_grad_matches_finite_differences(self):
        g = rng(8)
        a0, b0 = g.standard_normal((3, 4)), g.standard_normal((4, 2))
        a = T.parameter(a0)
        T.tsum(T.matmul(a, Tensor(b0))).backward()
        expected = finite_diff(lambda m: (m @ b0).sum(), a0)
        np.testing.assert_allclose(a.grad, expected, atol=1e-8)

    def test_constant_leaf_gets_zero(self):
        x = T.parameter([1.0, 2.0])
        unused = T.parameter([5.0])
        T.tsum(x * x).backward()
        np.testing.assert_array_equal(unused.grad_or_zero(), [0.0])

    def test_backward_requires_scalar(self):
        x = T.parameter(np.ones((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            (x * x).backward()

    def test_broadcast_add_unbroadcasts(self):
        a = T.parameter(np.ones((4, 3)))
        b = T.parameter(np.ones((1, 3)))
        T.tsum(a + b).backward()
        np.testing.assert_array_equal(a.grad, np.ones((4, 3)))
        np.testing.assert_array_equal(b.grad, np.full((1, 3), 4.0))

    def test_batched_matmul_grad(self):
        g = rng(9)
        a0 = g.standard_normal((5, 3, 4))
        b0 = g.standard_normal((5, 4, 2))
        a = T.parameter(a0)
        b = T.parameter(b0)
        T.tsum(T.matmul(a, b)).backward()
        ea = finite_diff(lambda m: (m @ b0).sum(), a0)
        eb = finite_diff(lambda m: (a0 @ m).sum(), b0)
        np.testing.assert_allclose(a.grad, ea, atol=1e-7)
        np.testing.assert_allclose(b.grad, eb, atol=1e-7)

    def test_topo_order_inputs_precede_consumers(self):
        x = T.parameter([1.0, 2.0])
        y = x * x
        z = T.tsum(y + x)
        order = T.topo_order(z)
        positions = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert positions[id(parent)] < positions[id(node)]


PRIMITIVES = {
    "add": lambda x: T.tsum(T.add(x, T.constant(np.linspace(-1, 1, 12).reshape(3, 4)))),
    "mul": lambda x: T.tsum(T.mul(x, T.constant(np.linspace(0.5, 2, 12).reshape(3, 4)))),
    "matmul": lambda x: T.tsum(T.matmul(x, T.constant(np.linspace(-1, 1, 8).reshape(4, 2)))),
    "broadcast": lambda x: T.tsum(T.mul(T.broadcast_to(x, (5, 3, 4)), 0.3)),
    "concat": lambda x: T.tsum(T.concat([x, T.mul(x, 2.0)], axis=0)),
    "softmax": lambda x: T.tsum(T.mul(T.softmax(x), T.constant(np.arange(12.0).reshape(3, 4)))),
    "layer_norm": lambda x: T.tsum(T.mul(T.layer_norm(x), T.constant(np.arange(12.0).reshape(3, 4)))),
    "sum": lambda x: T.tsum(x),
    "mean": lambda x: T.tmean(x),
    "max": lambda x: T.tmax(x),
    "sin": lambda x: T.tsum(T.tsin(x)),
    "cos": lambda x: T.tsum(T.tcos(x)),
    "gelu": lambda x: T.tsum(gelu_scaled(x)),
    "reshape": lambda x: T.tsum(T.mul(T.reshape(x, (2, 6)), T.constant(np.arange(12.0).reshape(2, 6)))),
    "transpose": lambda x: T.tsum(T.mul(T.transpose(x, (1, 0)), T.constant(np.arange(12.0).reshape(4, 3)))),
}


def gelu_scaled(x):
    return T.gelu(T.mul(x, 1.7))


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_every_primitive_under_1e4(self, name):
        x = rng(hash(name) % 2**32).standard_normal((3, 4))
        err = grad_check(PRIMITIVES[name], x, eps=1e-6)
        assert err < 1e-4, f"{name}: relative error {err}"

    def test_sum_of_sines(self):
        x = rng(11).standard_normal((20,))
        err = grad_check(lambda t: T.tsum(T.tsin(t)), x, eps=1e-6)
        assert err < 1e-6

    def test_exact_linear_case(self):
        # Error is pure rounding noise in the difference quotient: ~|sum|*ulp/eps.
        x = rng(12).standard_normal((7,))
        err = grad_check(lambda t: T.tsum(t), x, eps=1e-6)
        assert err < 1e-8

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: T.tsum(t), np.ones(3), eps=0.5)

    def test_nan_at_perturbed_point_raises(self):
        def f(t):
            if np.any(t.data > 1.0):
                return Tensor(np.nan)
            return T.tsum(t)

        with pytest.raises(FloatingPointError):
            grad_check(f, np.ones(2), eps=1e-4)

    def test_dropout_grad_with_frozen_mask(self):
        # Dropout is checked against a fixed mask: same seed on every call.
        def f(t):
            return T.tsum(T.dropout(t, 0.4, rng(21)))

        err = grad_check(f, rng(22).standard_normal((4, 4)), eps=1e-6)
        assert err < 1e-8


class TestDeterminism:
    def test_bit_determinism(self):
        x = rng(13).standard_normal((6, 6))
        w = rng(14).standard_normal((6, 6))

        def run():
            p = T.parameter(x)
            out = T.tsum(T.softmax(T.matmul(p, Tensor(w))))
            out.backward()
            return out.data.copy(), p.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        np.testing.assert_array_equal(v1, v2)
        np.testing.assert_array_equal(g1, g2)


@settings(max_examples=50, deadline=None)
@given(
    rows=st.integers(1, 5),
    cols=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_softmax_rows_always_normalised(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 30
    y = T.softmax(Tensor(x)).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y.sum(axis=-1), np.ones(rows), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_add_gradients_match_numeric(seed):
    g = np.random.default_rng(seed)
    shape_a = (int(g.integers(1, 4)), int(g.integers(1, 4)))
    a0 = g.standard_normal(shape_a)
    b0 = g.standard_normal((1, shape_a[1]))
    a, b = T.parameter(a0), T.parameter(b0)
    T.tsum(T.mul(T.add(a, b), T.constant(g.standard_normal(shape_a)))).backward()
    assert a.grad.shape == a0.shape
    assert b.grad.shape == b0.shape
    assert math.isfinite(float(a.grad.sum()))

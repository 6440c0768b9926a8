import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcqa import tensor as T
from dpcqa.tensor import Tensor, gradcheck


def t64(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64, requires_grad=True)


def sq(t):
    return t * t


def naive_conv2d(x, w, b, padding, groups):
    """Six nested loops over the cross-correlation definition."""
    n, c, h, wd = x.shape
    co, cpg, kh, kw = w.shape
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    out = np.zeros((n, co, ho, wo))
    opg = co // groups
    for i in range(n):
        for o in range(co):
            g = o // opg
            for y in range(ho):
                for x_ in range(wo):
                    patch = xp[i, g * cpg:(g + 1) * cpg, y:y + kh, x_:x_ + kw]
                    out[i, o, y, x_] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


class TestElementwise:
    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_gradients_with_broadcast(self, rng, op):
        a = t64(rng, 3, 4)
        b = t64(rng, 4, lo=0.5, hi=1.5)
        fn = getattr(T, op)
        assert gradcheck(lambda: T.tsum(fn(a, b) * fn(a, b)), [a, b]) < 1e-6

    @pytest.mark.parametrize("op", ["exp", "tabs", "relu", "sigmoid", "softplus"])
    def test_unary_gradients(self, rng, op):
        x = t64(rng, 5, 3)
        x.data[np.abs(x.data) < 1e-3] = 0.3  # keep away from kinks
        fn = getattr(T, op)
        assert gradcheck(lambda: T.tsum(fn(x) * fn(x)), [x]) < 1e-6

    def test_log_gradient(self, rng):
        x = t64(rng, 6, lo=0.5, hi=2.0)
        assert gradcheck(lambda: T.tsum(T.log(x)), [x]) < 1e-7

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0])

    def test_softplus_matches_log1p_exp(self, rng):
        x = rng.normal(size=50) * 30
        np.testing.assert_allclose(T.softplus(Tensor(x, dtype=np.float64)).data, np.logaddexp(0, x), rtol=1e-12)

    def test_scalar_operands_on_either_side(self, rng):
        x = t64(rng, 3)
        y = 2.0 - x * 3.0 + 1.0 / (x + 5.0)
        np.testing.assert_allclose(y.data, 2.0 - 3.0 * x.data + 1.0 / (x.data + 5.0))


class TestReductionsAndShapes:
    def test_sum_mean_axes(self, rng):
        x = t64(rng, 2, 3, 4)
        assert gradcheck(lambda: T.tsum(T.mean(x, axis=(0, 2))) * T.tsum(x, axis=1, keepdims=True).mean(), [x]) < 1e-7

    def test_reshape_transpose(self, rng):
        x = t64(rng, 2, 3, 4)
        w = Tensor(rng.normal(size=(4, 2, 3)), dtype=np.float64)
        assert gradcheck(lambda: T.tsum(T.transpose(T.reshape(x, (4, 3, 2)), (0, 2, 1)) * w), [x]) < 1e-8

    def test_getitem_basic_and_fancy(self, rng):
        x = t64(rng, 5, 3)
        idx = np.array([0, 2, 2, 4])
        assert gradcheck(lambda: T.tsum(x[1:4, 0] * 2.0) + T.tsum(sq(T.getitem(x, idx))), [x]) < 1e-8

    def test_repeated_fancy_index_accumulates(self):
        x = Tensor(np.zeros(3), dtype=np.float64, requires_grad=True)
        T.tsum(T.getitem(x, np.array([1, 1, 1]))).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 3.0, 0.0])

    def test_concat_stack(self, rng):
        a, b = t64(rng, 2, 3), t64(rng, 4, 3)
        c = t64(rng, 2, 3)
        assert gradcheck(lambda: T.tsum(sq(T.concat([a, b], axis=0))) + T.tsum(sq(T.stack([a, c], axis=1)) * c[0]), [a, b, c]) < 1e-7


class TestLinearAlgebra:
    def test_matmul_batched_broadcast(self, rng):
        a = t64(rng, 2, 3, 4)
        b = t64(rng, 4, 5)
        assert gradcheck(lambda: T.tsum(sq(T.matmul(a, b))), [a, b]) < 1e-7

    def test_matmul_shape_error(self, rng):
        with pytest.raises(ValueError):
            T.matmul(t64(rng, 2, 3), t64(rng, 4, 2))

    def test_softmax_rows_and_gradient(self, rng):
        x = t64(rng, 3, 7, lo=-5, hi=5)
        np.testing.assert_allclose(T.softmax(x).data.sum(-1), 1.0, atol=1e-12)
        w = Tensor(rng.normal(size=(3, 7)), dtype=np.float64)
        assert gradcheck(lambda: T.tsum(T.softmax(x) * w), [x]) < 1e-7

    def test_softmax_large_logits(self):
        y = T.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0])))
        np.testing.assert_allclose(y.data, [0.5, 0.5, 0.0])

    def test_layer_norm_statistics_and_gradient(self, rng):
        x = t64(rng, 4, 8, lo=-3, hi=3)
        g, b = t64(rng, 8), t64(rng, 8)
        y = T.layer_norm(x).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1.0, rtol=1e-4)
        w = Tensor(rng.normal(size=(4, 8)), dtype=np.float64)
        assert gradcheck(lambda: T.tsum(T.layer_norm(x, g, b) * w), [x, g, b]) < 1e-6


class TestConvolution:
    @pytest.mark.parametrize(
        "c_in,c_out,k,pad,groups",
        [(3, 4, (3, 3), (1, 1), 1), (4, 4, (3, 3), (1, 1), 4), (8, 8, (1, 1), (0, 0), 4), (2, 3, (1, 3), (0, 1), 1), (2, 2, (3, 1), (1, 0), 2)],
    )
    def test_matches_naive_loops(self, rng, c_in, c_out, k, pad, groups):
        x = rng.normal(size=(2, c_in, 5, 6))
        w = rng.normal(size=(c_out, c_in // groups, *k))
        b = rng.normal(size=c_out)
        got = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), padding=pad, groups=groups)
        np.testing.assert_allclose(got.data, naive_conv2d(x, w, b, pad, groups), atol=1e-12)

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_gradients(self, rng, groups):
        x = t64(rng, 2, 4, 5, 5)
        w = t64(rng, 4, 4 // groups, 3, 3)
        b = t64(rng, 4)
        assert gradcheck(lambda: T.tsum(sq(T.conv2d(x, w, b, padding=1, groups=groups))), [x, w, b]) < 1e-6

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            T.conv2d(t64(rng, 1, 3, 4, 4), t64(rng, 2, 2, 3, 3))

    def test_pool_and_upsample(self, rng):
        x = t64(rng, 1, 2, 4, 6)
        pooled = T.avg_pool2d(x, 2)
        np.testing.assert_allclose(pooled.data[0, 0, 0, 0], x.data[0, 0, :2, :2].mean())
        up = T.upsample_nearest2d(pooled, 2)
        assert up.shape == x.shape
        w = Tensor(rng.normal(size=x.shape), dtype=np.float64)
        assert gradcheck(lambda: T.tsum(T.upsample_nearest2d(sq(T.avg_pool2d(x, 2)), 2) * w), [x]) < 1e-7


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array(3.0), dtype=np.float64, requires_grad=True)
        y = x * x + x
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_backward_twice_raises(self, rng):
        x = t64(rng, 3)
        y = T.tsum(x * x)
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_stale_gradient_raises(self, rng):
        x = t64(rng, 3)
        T.tsum(x).backward()
        with pytest.raises(RuntimeError, match="stale"):
            T.tsum(x * 2.0).backward()

    def test_non_scalar_backward(self, rng):
        with pytest.raises(ValueError):
            (t64(rng, 3) * 2.0).backward()

    def test_non_finite_forward_raises(self):
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            T.log(Tensor(np.array([0.0]), dtype=np.float64))

    def test_no_grad_records_nothing(self, rng):
        x = t64(rng, 3)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()
        assert T.is_grad_enabled()

    def test_no_grad_is_per_thread(self):
        import threading

        seen = []
        with T.no_grad():
            th = threading.Thread(target=lambda: seen.append(T.is_grad_enabled()))
            th.start()
            th.join()
        assert seen == [True]

    def test_adaptive_step_avoids_nearby_kink(self):
        # hinge 3e-6 away: a 1e-5 stencil straddles it, a finer step does not
        x = Tensor(np.array([0.0]), dtype=np.float64, requires_grad=True)
        fn = lambda: T.tsum(T.relu(x - 3e-6))
        assert T.numerical_grad(fn, x, (0,), 1e-5) == pytest.approx(0.35)
        assert T.adaptive_numerical_grad(fn, x, (0,), (1e-5, 1e-6, 1e-7)) == 0.0
        assert gradcheck(fn, [x], steps=(1e-5, 1e-6, 1e-7)) == 0.0
        assert x.data[0] == 0.0

    def test_adaptive_step_on_smooth_function(self, rng):
        x = t64(rng, 5)
        assert gradcheck(lambda: T.tsum(T.exp(x) * x), [x], steps=(1e-4, 1e-5, 1e-6, 1e-7)) < 1e-8

    def test_gradcheck_rejects_float32(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            gradcheck(lambda: T.tsum(x), [x])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_sum_of_products_gradient_is_other_factor(vals):
    a = Tensor(np.array(vals), dtype=np.float64, requires_grad=True)
    b = Tensor(np.array(vals[::-1]), dtype=np.float64)
    T.tsum(a * b).backward()
    np.testing.assert_allclose(a.grad, b.data)

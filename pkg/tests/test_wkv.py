import time

import numpy as np
import pytest

from dpcqa import tensor as T
from dpcqa.tensor import Tensor, gradcheck
from dpcqa.wkv import BiWKV, q_shift, wkv, wkv_reference


def loop_reference(k, v, w, u):
    """Per-(t, c) scalar loops over the bidirectional decayed average."""
    n, d = k.shape
    out = np.zeros((n, d))
    for t in range(n):
        for c in range(d):
            logits = np.array([u[c] + k[t, c] if i == t else k[i, c] - abs(t - i) * w[c] for i in range(n)])
            e = np.exp(logits - logits.max())
            out[t, c] = (e * v[:, c]).sum() / e.sum()
    return out


def rand_inputs(rng, n, d, dtype=np.float64, scale=1.0):
    k = Tensor(rng.normal(size=(n, d)) * scale, dtype=dtype)
    v = Tensor(rng.normal(size=(n, d)), dtype=dtype)
    w = Tensor(rng.uniform(0.05, 1.5, size=d), dtype=dtype)
    u = Tensor(rng.normal(size=d), dtype=dtype)
    return k, v, w, u


@pytest.mark.parametrize("n", [1, 2, 3, 9])
def test_reference_matches_scalar_loops(rng, n):
    k, v, w, u = rand_inputs(rng, n, 3)
    np.testing.assert_allclose(wkv_reference(k, v, w, u).data, loop_reference(k.data, v.data, w.data, u.data), atol=1e-13)


@pytest.mark.parametrize("n", [1, 2, 3, 17, 64, 256])
@pytest.mark.parametrize("d", [1, 8])
def test_linear_scan_matches_quadratic(rng, n, d):
    k, v, w, u = rand_inputs(rng, n, d, dtype=np.float32)
    fast = wkv(k, v, w, u).data.astype(np.float64)
    slow = wkv_reference(*(Tensor(t.data, dtype=np.float64) for t in (k, v, w, u))).data
    assert np.linalg.norm(fast - slow) / np.linalg.norm(slow) < 1e-6


def test_batched_leading_axes(rng):
    k = Tensor(rng.normal(size=(2, 3, 5, 4)), dtype=np.float64)
    v = Tensor(rng.normal(size=(2, 3, 5, 4)), dtype=np.float64)
    w = Tensor(rng.uniform(0.1, 1, size=4), dtype=np.float64)
    u = Tensor(rng.normal(size=4), dtype=np.float64)
    np.testing.assert_allclose(wkv(k, v, w, u).data, wkv_reference(k, v, w, u).data, atol=1e-12)


def test_stable_for_large_keys(rng):
    k, v, w, u = rand_inputs(rng, 40, 4, scale=200.0)
    y = wkv(k, v, w, u).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, wkv_reference(k, v, w, u).data, atol=1e-10)
    # convex combination of values
    assert (y <= v.data.max(0) + 1e-9).all() and (y >= v.data.min(0) - 1e-9).all()


def test_single_token_returns_value(rng):
    k, v, w, u = rand_inputs(rng, 1, 5)
    np.testing.assert_allclose(wkv(k, v, w, u).data, v.data)


def test_rejects_negative_decay(rng):
    k, v, w, u = rand_inputs(rng, 3, 2)
    with pytest.raises(ValueError):
        wkv(k, v, Tensor(-w.data), u)


@pytest.mark.parametrize("seed", range(5))
def test_gradients(seed):
    rng = np.random.default_rng(seed)
    k, v, w, u = rand_inputs(rng, 7, 3)
    g = Tensor(rng.normal(size=(7, 3)), dtype=np.float64)
    assert gradcheck(lambda: T.tsum(wkv(k, v, w, u) * g), [k, v, w, u], rng=rng) < 1e-6


@pytest.mark.parametrize("scale", [1.0, 30.0])
def test_gradient_matches_reference_gradient(rng, scale):
    # with saturated keys most gradients are ~1e-12, below finite-difference
    # resolution, so compare against backprop through the quadratic form
    k, v, w, u = rand_inputs(rng, 12, 3, scale=scale)
    g = rng.normal(size=(12, 3))
    grads = []
    for fn in (wkv, wkv_reference):
        for t in (k, v, w, u):
            t.requires_grad, t.grad = True, None
        T.tsum(fn(k, v, w, u) * Tensor(g, dtype=np.float64)).backward()
        grads.append([t.grad.copy() for t in (k, v, w, u)])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(b).max()))


def test_linear_time_scaling(rng):
    def median_time(n):
        k, v, w, u = rand_inputs(rng, n, 64, dtype=np.float32)
        wkv(k, v, w, u)
        times = []
        for _ in range(20):
            t0 = time.perf_counter()
            wkv(k, v, w, u)
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    assert median_time(512) <= 2.5 * median_time(256)


class TestQShift:
    def test_moves_each_quarter(self):
        h, w, d = 3, 4, 4
        base = np.arange(h * w, dtype=np.float64).reshape(h, w) + 1
        tokens = np.repeat(base.reshape(h * w, 1), d, axis=1)
        out = q_shift(Tensor(tokens), (h, w)).data.reshape(h, w, d)
        right = np.zeros_like(base)
        right[:, :-1] = base[:, 1:]
        left = np.zeros_like(base)
        left[:, 1:] = base[:, :-1]
        below = np.zeros_like(base)
        below[:-1] = base[1:]
        above = np.zeros_like(base)
        above[1:] = base[:-1]
        for c, want in enumerate((right, left, below, above)):
            np.testing.assert_array_equal(out[..., c], want)

    def test_adjoint(self, rng):
        x = Tensor(rng.normal(size=(2, 12, 8)), dtype=np.float64)
        g = Tensor(rng.normal(size=(2, 12, 8)), dtype=np.float64)
        assert gradcheck(lambda: T.tsum(q_shift(x, (3, 4)) * g), [x]) < 1e-9

    def test_validation(self):
        with pytest.raises(ValueError):
            q_shift(Tensor(np.zeros((6, 4))), (2, 2))
        with pytest.raises(ValueError):
            q_shift(Tensor(np.zeros((4, 6))), (2, 2))


class TestBiWKVModule:
    def test_linear_and_reference_paths_agree(self, rng):
        layer = BiWKV(rng, 8, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 10, 8)), dtype=np.float64)
        np.testing.assert_allclose(layer(x).data, layer(x, reference=True).data, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_parameter_gradients(self, seed):
        rng = np.random.default_rng(seed)
        layer = BiWKV(rng, 8, dtype=np.float64)
        layer.bonus.data[:] = rng.normal(size=8)
        x = Tensor(rng.normal(size=(9, 8)), dtype=np.float64)
        g = Tensor(rng.normal(size=(9, 8)), dtype=np.float64)
        assert gradcheck(lambda: T.tsum(layer(x) * g), [x, *layer.parameters()], rng=rng) < 1e-5

    def test_effective_decay_positive(self, rng):
        layer = BiWKV(rng, 4)
        layer.decay.data[:] = -50.0
        assert (layer.effective_decay().data >= 0).all()

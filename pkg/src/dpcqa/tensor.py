"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward rule on the
output tensor; ``Tensor.backward`` replays those rules in reverse
topological order. Convolution uses the cross-correlation convention
(no kernel flip), as deep-learning frameworks do.
"""

from __future__ import annotations

import contextlib
import logging
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# per-thread so concurrent inference cannot flip recording for a training thread
_grad_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autograd --------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf that requires grad.

        Leaves must have been reset (``grad is None``) since the last
        backward; the graph is consumed and cannot be replayed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() called twice on the same graph")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaves: list[Tensor] = []
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    if node.grad is not None:
                        raise RuntimeError(
                            f"stale gradient on {node.name or node!r}; call zero_grad() before backward()"
                        )
                    node.grad = g
                    leaves.append(node)
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._consumed = True
            node._backward = None
            node._parents = ()

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise RuntimeError("cycle detected in computation graph")
            state[key] = 1
        parents = node._parents
        if i < len(parents):
            stack.append((node, i + 1))
            p = parents[i]
            pst = state.get(id(p))
            if pst == 1:
                raise RuntimeError("cycle detected in computation graph")
            if pst is None and p.requires_grad:
                stack.append((p, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, check: bool = True) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    if check and not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced by forward op")
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = (np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))).astype(xd.dtype)
    e = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return make_result(out, (x,), lambda g: (g * sig,))


# -- reductions and shape ops ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / max(n, 1))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), check=False)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), check=False)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in key)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(x.data[idx]), (x,), backward, check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim + 1
    axis = axis % nd

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, backward, check=False)


# -- linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (``@``)."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = make_result(xhat.astype(xd.dtype), (x,), backward)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


# -- convolution and pooling ---------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``x`` of shape (C,H,W) or (N,C,H,W).

    ``w`` has shape (C_out, C_in/groups, kh, kw). ``padding`` is an int or
    (ph, pw) pair of zero-fill widths.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    n, cin, h, wid = xd.shape
    cout, cpg, kh, kw = wd.shape
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if cin % groups or cout % groups:
        raise ValueError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ValueError(f"kernel expects {cpg * groups} input channels, got {cin}")
    hp, wp = h + 2 * ph, wid + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    opg = cout // groups
    depthwise = cpg == 1 and opg == 1
    xg = xp.reshape(n, groups, cpg, hp, wp)
    wg = wd.reshape(groups, opg, cpg, kh, kw)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    ksz = cpg * kh * kw
    npix = n * ho * wo
    cols = None
    if depthwise:
        out = np.zeros((n, groups, opg, ho, wo), dtype=np.result_type(xd, wd))
        for i in range(kh):
            for j in range(kw):
                out += xg[:, :, :, i:i + hs:stride, j:j + ws:stride] * wg[None, :, :, 0, i, j][..., None, None]
        out = out.reshape(n, cout, ho, wo)
    else:
        # im2col laid out (groups, cpg, kh, kw, n, ho, wo) so each group is one GEMM
        cols = np.empty((groups, cpg, kh, kw, n, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xg[:, :, :, i:i + hs:stride, j:j + ws:stride].transpose(1, 2, 0, 3, 4)
        cols = cols.reshape(groups, ksz, npix)
        out = np.matmul(wg.reshape(groups, opg, ksz), cols)          # (g, opg, n*ho*wo)
        out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gg = g4.reshape(n, groups, opg, ho, wo)
        gx = None
        gw = None
        if not depthwise:
            ggt = gg.transpose(1, 2, 0, 3, 4).reshape(groups, opg, npix)
        if x.requires_grad:
            gxp = np.zeros_like(xg)
            if depthwise:
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, :, i:i + hs:stride, j:j + ws:stride] += gg * wg[None, :, :, 0, i, j][..., None, None]
            else:
                gcols = np.matmul(wg.reshape(groups, opg, ksz).transpose(0, 2, 1), ggt)
                gcols = gcols.reshape(groups, cpg, kh, kw, n, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, :, i, j].transpose(2, 0, 1, 3, 4)
            gxp = gxp.reshape(n, cin, hp, wp)
            gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + wid])
            gx = gx[0] if squeeze else gx
        if w.requires_grad:
            if depthwise:
                gwg = np.empty_like(wg)
                for i in range(kh):
                    for j in range(kw):
                        patch = xg[:, :, :, i:i + hs:stride, j:j + ws:stride]
                        gwg[:, :, 0, i, j] = (gg * patch).sum(axis=(0, 3, 4))
                gw = gwg.reshape(wd.shape)
            else:
                gw = np.matmul(ggt, cols.transpose(0, 2, 1)).reshape(wd.shape)
        if bias is None:
            return gx, gw
        gb = g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out[0] if squeeze else out, parents, backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k average pooling over the last two axes."""
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"spatial size {h}x{w} not divisible by pool {k}")
    xd = x.data.reshape(*lead, h // k, k, w // k, k)
    out = xd.mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        return (g.astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, check=False)


def upsample_nearest2d(x: Tensor, k: int = 2) -> Tensor:
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=-2), k, axis=-1)

    def backward(g):
        return (g.reshape(*lead, h, k, w, k).sum(axis=(-3, -1)),)

    return make_result(out, (x,), backward, check=False)


# -- gradient checking ---------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], t: Tensor, index, h: float = 1e-5) -> float:
    old = t.data[index]
    t.data[index] = old + h
    with no_grad():
        fp = float(fn().data)
    t.data[index] = old - h
    with no_grad():
        fm = float(fn().data)
    t.data[index] = old
    return (fp - fm) / (2 * h)


def _eval(fn: Callable[[], Tensor], t: Tensor, index, value: float) -> float:
    old = t.data[index]
    t.data[index] = value
    try:
        with no_grad():
            return float(fn().data)
    finally:
        t.data[index] = old


def adaptive_numerical_grad(fn: Callable[[], Tensor], t: Tensor, index, steps: Sequence[float]) -> float:
    """Central difference at the step with the smallest estimated error.

    The estimate adds the second difference, which grows when the stencil
    straddles a kink such as a ReLU hinge, to the rounding error of the
    quotient. The choice never consults the analytic gradient.
    """
    x0 = float(t.data[index])
    f0 = _eval(fn, t, index, x0)
    eps = np.finfo(np.float64).eps
    best, best_err = 0.0, math.inf
    for h in steps:
        fp = _eval(fn, t, index, x0 + h)
        fm = _eval(fn, t, index, x0 - h)
        err = abs(fp - 2.0 * f0 + fm) / (2.0 * h) + 4.0 * eps * max(abs(fp), abs(fm), abs(f0)) / h
        if err < best_err:
            best, best_err = (fp - fm) / (2.0 * h), err
    return best


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    h: float = 1e-5,
    max_entries: int | None = 24,
    rng: np.random.Generator | None = None,
    steps: Sequence[float] | None = None,
) -> float:
    """Compare backprop gradients with central differences.

    ``fn`` rebuilds a scalar from the given (float64) tensors. Returns the
    worst norm-wise relative error over all tensors; at most ``max_entries``
    sampled coordinates are probed per tensor. With ``steps`` each
    coordinate uses :func:`adaptive_numerical_grad` instead of the fixed ``h``.
    """
    tensors = list(tensors)
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 tensors")
        t.requires_grad = True
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
        idxs = [np.unravel_index(i, t.shape) for i in flat]
        if steps is None:
            num = np.array([numerical_grad(fn, t, ix, h) for ix in idxs])
        else:
            num = np.array([adaptive_numerical_grad(fn, t, ix, steps) for ix in idxs])
        ana = np.array([analytic[ix] for ix in idxs])
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
        t.grad = None
    return worst

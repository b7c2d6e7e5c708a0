"""A small reverse-mode autodiff engine over numpy arrays.

Tensors record the operation that produced them; ``backward`` walks the
recorded graph in reverse topological order and accumulates gradients into
every tensor that requires them. Only the operations the networks and losses
in this package need are provided.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels


class GraphError(RuntimeError):
    """Raised when backward is called on something without a graph."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "op")

    def __init__(self, data, requires_grad=False, _prev=(), _backward=None, op=""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = _prev
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        """Same storage, no graph, no gradient."""
        return Tensor(self.data, requires_grad=False)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _lift(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _prev=parents, _backward=backward_fn, op=op)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def topological_order(root):
    """Nodes reachable from ``root`` that take part in differentiation,
    inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor upstream of scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    # interior nodes start clean so repeated backward on one graph is well defined
    for node in order:
        if node._backward is not None:
            node.grad = None
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(out_data, (a, b), bw, "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(out_data, (a, b), bw, "sub")


def mul(a, b):
    a = _lift(a)
    b = _lift(b, a.dtype)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(out_data.astype(a.dtype, copy=False), (a, b), bw, "mul")


def leaky_relu(x, slope=0.01):
    if slope < 0:
        raise ValueError("leaky_relu slope must be >= 0")
    src = np.ascontiguousarray(x.data)
    out_data = kernels.leaky_relu_forward(src.reshape(-1), slope).reshape(x.shape)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=src.dtype)
        _accum(x, kernels.leaky_relu_backward(src.reshape(-1), g.reshape(-1), slope).reshape(x.shape))
    return _make(out_data, (x,), bw, "leaky_relu")


def sqrt(x):
    out_data = np.sqrt(x.data)

    def bw(g):
        _accum(x, g * 0.5 / np.maximum(out_data, np.finfo(out_data.dtype).tiny))
    return _make(out_data, (x,), bw, "sqrt")


# ------------------------------------------------------------------ reductions

def sum(x):
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))
    return _make(out_data, (x,), bw, "sum")


def mean(x):
    n = x.data.size
    out_data = np.asarray(x.data.mean(), dtype=x.dtype)

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.shape))
    return _make(out_data, (x,), bw, "mean")


def norm(x):
    """Euclidean norm of all elements."""
    out_data = np.asarray(np.sqrt(np.sum(x.data * x.data)), dtype=x.dtype)

    def bw(g):
        denom = out_data if out_data > 0 else np.finfo(x.dtype).tiny
        _accum(x, g * x.data / denom)
    return _make(out_data, (x,), bw, "norm")


# ---------------------------------------------------------------- shape / linalg

def reshape(x, shape):
    out_data = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.shape))
    return _make(out_data, (x,), bw, "reshape")


def transpose(x):
    if x.ndim != 2:
        raise ValueError("transpose expects a matrix")
    out_data = x.data.T

    def bw(g):
        _accum(x, g.T)
    return _make(out_data, (x,), bw, "transpose")


def matmul(a, b):
    a, b = _lift(a), _lift(b, a.dtype)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = np.outer(g, b.data) if b.ndim == 1 else g @ b.data.T
            _accum(a, ga)
        if b.requires_grad:
            gb = a.data.T @ g if g.ndim == 1 else a.data.T @ g
            _accum(b, gb)
    return _make(out_data, (a, b), bw, "matmul")


def index(x, key):
    out_data = x.data[key]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accum(x, full)
    return _make(np.ascontiguousarray(out_data), (x,), bw, "index")


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])
    return _make(out_data, (a, b), bw, "concat")


def split_channels(x, at):
    return x[:, :at], x[:, at:]


# --------------------------------------------------------------- convolutions

def _check_finite(*ts):
    for t in ts:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite values in {t.op or 'input'} tensor of shape {t.shape}")


def conv2d(x, w, b=None, padding=None):
    """Stride-1 cross-correlation with 'same' padding; k in {1, 3}."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x (N,C,H,W) and w (Cout,Cin,k,k)")
    cout, cin, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d supports square 1x1 or 3x3 kernels, got {k}x{k2}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ValueError("only same padding ((k-1)/2) is supported")
    n, c, h, wd = x.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    _check_finite(x, w)
    dt = x.dtype
    cols = kernels.im2col(np.ascontiguousarray(x.data), k)
    wm = w.data.reshape(cout, -1).astype(dt, copy=False)
    out2 = wm @ cols
    if b is not None:
        out2 += b.data.astype(dt, copy=False)[:, None]
    out_data = np.ascontiguousarray(out2.reshape(cout, n, h, wd).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        if w.requires_grad:
            _accum(w, (g2 @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=1))
        if x.requires_grad:
            dcols = np.ascontiguousarray(wm.T @ g2)
            _accum(x, kernels.col2im(dcols, x.shape, k))
    return _make(out_data, parents, bw, "conv2d")


def maxpool2x2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    out_data, idx = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))

    def bw(g):
        _accum(x, kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx))
    return _make(out_data, (x,), bw, "maxpool2x2")


def upsample_nearest2x(x):
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return _make(out_data, (x,), bw, "upsample2x")


def instance_norm(x, eps=1e-5):
    """Per (sample, channel) standardization over H, W; no affine terms."""
    n, c, h, w = x.shape
    if h * w < 2:
        raise ValueError("instance_norm needs at least two spatial positions")
    rows = np.ascontiguousarray(x.data).reshape(n * c, h * w)
    xhat, inv = kernels.instance_norm_forward(rows, eps)

    def bw(g):
        g2 = np.ascontiguousarray(g, dtype=xhat.dtype).reshape(n * c, h * w)
        _accum(x, kernels.instance_norm_backward(g2, xhat, inv).reshape(x.shape))
    return _make(xhat.reshape(x.shape), (x,), bw, "instance_norm")


def channel_matmul(wmat, f):
    """Apply a (C, C) matrix to every pixel's channel vector; a 1x1 conv."""
    cout, cin = wmat.shape
    if f.ndim != 4 or f.shape[1] != cin:
        raise ValueError(f"channel_matmul: expected {cin} channels, got shape {f.shape}")
    return conv2d(f, reshape(wmat, (cout, cin, 1, 1)))


# ------------------------------------------------------------- output / losses

def softmax_channels(x):
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(x, s * (g - (g * s).sum(axis=1, keepdims=True)))
    return _make(s, (x,), bw, "softmax")


def cross_entropy(logits, labels):
    """Mean per-pixel cross entropy; ``labels`` is an int array (N, H, W)."""
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    lab = labels.astype(np.intp)[:, None]
    picked = np.take_along_axis(logp, lab, axis=1)
    count = n * h * w
    out_data = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, lab, np.take_along_axis(p, lab, axis=1) - 1.0, axis=1)
        _accum(logits, p * (g / count))
    return _make(out_data, (logits,), bw, "cross_entropy")


def mse(pred, target):
    """Mean squared error; differentiable in both arguments."""
    pred = _lift(pred)
    target = _lift(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def bw(g):
        d = diff * (2.0 * g / n)
        _accum(pred, d)
        _accum(target, -d)
    return _make(out_data, (pred, target), bw, "mse")


# ---------------------------------------------------------------- optimization

class Adam:
    """Bias-corrected Adam over a list of tensors, updated in place.

    ``lr_scale`` optionally maps a parameter's position in ``params`` to a
    multiplier (scalar or array broadcastable to it) on its step size.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=None):
        self.params = list(params)
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, m, v) in enumerate(zip(self.params, self.m, self.v)):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
                if g.shape != p.shape:
                    raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            lr = self.lr * self.lr_scale[i] if i in self.lr_scale else self.lr
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


# ------------------------------------------------------------- gradient check

def grad_check(f, x, h=1e-6, max_coords=None, rng=None, floor=1e-3, f64=None,
               kink_rtol=None, return_skipped=False):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The analytic gradient is taken at
    ``x``'s own precision; the central differences are always evaluated on a
    float64 copy, since float32 rounding of ``f`` alone is ~1e-4 relative at
    any useful step. Per coordinate the error is |a - n| / max(|a|, |n|, s)
    with s = ``floor`` times the largest analytic magnitude, so coordinates
    whose true gradient is ~0 do not divide by rounding noise. When
    ``max_coords`` is given only a random subset is probed.

    If ``f`` closes over float32 constants, the ops would round the probe
    back to float32; pass ``f64``, the same function built on float64 copies
    of those constants, and it is used for the differences instead.

    Large compositions of leaky ReLUs and max pools have so many kinks that a
    few are crossed by any useful step. With ``kink_rtol`` set, each probed
    coordinate is also differenced at h/4; if the two estimates disagree by
    more than ``kink_rtol`` (relative) the differences there are not
    trustworthy and the coordinate is skipped. A wrong analytic gradient
    still fails, since its differences agree with each other. With
    ``return_skipped`` the result is (error, number skipped).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x)
    if x0.dtype not in (np.float32, np.float64):
        x0 = x0.astype(np.float32)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = xt.grad.reshape(-1).astype(np.float64)
    g = f64 if f64 is not None else f
    probe = x0.astype(np.float64)
    flat = probe.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    scale = max(float(np.abs(analytic).max()) * floor, 1e-12)
    worst = 0.0
    def central(i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(g(Tensor(probe)).data)
        flat[i] = orig - step
        fm = float(g(Tensor(probe)).data)
        flat[i] = orig
        return (fp - fm) / (2 * step)

    worst, skipped = 0.0, 0
    for i in coords:
        num = central(i, h)
        if kink_rtol is not None:
            fine = central(i, h / 4)
            if abs(num - fine) > kink_rtol * max(abs(num), abs(fine), scale):
                skipped += 1
                continue
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), scale))
    return (float(worst), skipped) if return_skipped else float(worst)


def kaiming_normal(rng, shape, slope=0.01, dtype=np.float32):
    """He init, fan-in mode, gain for leaky ReLU with the given slope."""
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / (fan_in * (1.0 + slope * slope)))
    return (rng.standard_normal(shape) * std).astype(dtype)

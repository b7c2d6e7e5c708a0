"""Pure numpy versions of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Outputs are bit-identical except for the instance-norm pair,
whose reductions run in a different order and agree to float32 rounding.
``sdanet.kernels`` picks one at import.
"""
import numpy as np


def im2col(x, k):
    """Unfold ``x`` (N, C, H, W) into columns (C*k*k, N*H*W) for a stride-1,
    same-padded k x k cross-correlation."""
    n, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k * k, n, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy * k + dx] = xp[:, :, dy:dy + h, dx:dx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def col2im(cols, shape, k):
    """Adjoint of :func:`im2col`: scatter-add columns back to (N, C, H, W)."""
    n, c, h, w = shape
    if k == 1:
        return np.ascontiguousarray(cols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    p = (k - 1) // 2
    cols = cols.reshape(c, k * k, n, h, w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[:, dy * k + dx].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, p:p + h, p:p + w])


def maxpool2x2_forward(x):
    """Return (pooled, argmax) where argmax in [0, 4) indexes the 2x2 block in
    row-major order; ties resolve to the first index."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    n, c, h2, w2 = grad.shape
    blocks = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks.reshape(n, c, 2 * h2, 2 * w2))


def median3x3(img):
    """3x3 median of a 2-D image with mirror ('reflect') edge padding."""
    xp = np.pad(img, 1, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3))
    flat = win.reshape(img.shape[0], img.shape[1], 9)
    return np.partition(flat, 4, axis=-1)[..., 4].copy()


def leaky_relu_forward(x, slope):
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x, g, slope):
    return np.where(x > 0, g, g * g.dtype.type(slope))


def instance_norm_forward(x, eps):
    """``x`` is (rows, pixels); each row is standardized. Statistics are
    accumulated in float64."""
    mu = x.mean(axis=1, dtype=np.float64, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    return (xc * inv).astype(x.dtype), inv[:, 0]


def instance_norm_backward(g, xhat, inv):
    gm = g.mean(axis=1, dtype=np.float64, keepdims=True)
    gxm = (g.astype(np.float64) * xhat).mean(axis=1, keepdims=True)
    return (inv[:, None] * (g - gm - xhat * gxm)).astype(g.dtype)

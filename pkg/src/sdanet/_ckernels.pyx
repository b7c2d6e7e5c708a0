# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Same contracts and bit-identical results as _kernels_py."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t p = (k - 1) // 2
    cdef Py_ssize_t ci, dy, dx, ni, i, j, row, base, i0, i1, j0, j1, hw = h * w
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c * k * k, n * hw), dtype=dtype)
    cdef floating[:, ::1] cols = out
    with nogil:
        for ci in range(c):
            for dy in range(k):
                i0 = max(0, p - dy)
                i1 = min(h, h + p - dy)
                for dx in range(k):
                    j0 = max(0, p - dx)
                    j1 = min(w, w + p - dx)
                    row = (ci * k + dy) * k + dx
                    for ni in range(n):
                        for i in range(i0, i1):
                            base = ni * hw + i * w
                            for j in range(j0, j1):
                                cols[row, base + j] = x[ni, ci, i + dy - p, j + dx - p]
    return out


def col2im(floating[:, ::1] cols, shape, int k):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t p = (k - 1) // 2
    cdef Py_ssize_t ci, dy, dx, ni, i, j, row, base, i0, i1, j0, j1, hw = h * w
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    with nogil:
        for ci in range(c):
            for dy in range(k):
                i0 = max(0, p - dy)
                i1 = min(h, h + p - dy)
                for dx in range(k):
                    j0 = max(0, p - dx)
                    j1 = min(w, w + p - dx)
                    row = (ci * k + dy) * k + dx
                    for ni in range(n):
                        for i in range(i0, i1):
                            base = ni * hw + i * w
                            for j in range(j0, j1):
                                x[ni, ci, i + dy - p, j + dx - p] += cols[row, base + j]
    return out


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h2 = x.shape[2] // 2, w2 = x.shape[3] // 2
    cdef Py_ssize_t ni, ci, i, j, q
    cdef floating best, v
    cdef signed char arg
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, h2, w2), dtype=dtype)
    idx = np.empty((n, c, h2, w2), dtype=np.int8)
    cdef floating[:, :, :, ::1] o = out
    cdef signed char[:, :, :, ::1] a = idx
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(h2):
                    for j in range(w2):
                        best = x[ni, ci, 2 * i, 2 * j]
                        arg = 0
                        for q in range(1, 4):
                            v = x[ni, ci, 2 * i + q // 2, 2 * j + q % 2]
                            if v > best:
                                best = v
                                arg = <signed char>q
                        o[ni, ci, i, j] = best
                        a[ni, ci, i, j] = arg
    return out, idx


def maxpool2x2_backward(floating[:, :, :, ::1] grad, signed char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], h2 = grad.shape[2], w2 = grad.shape[3]
    cdef Py_ssize_t ni, ci, i, j
    cdef int q
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, 2 * h2, 2 * w2), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(h2):
                    for j in range(w2):
                        q = idx[ni, ci, i, j]
                        o[ni, ci, 2 * i + q // 2, 2 * j + q % 2] = grad[ni, ci, i, j]
    return out


cdef inline Py_ssize_t _mirror(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def median3x3(floating[:, ::1] img):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], i, j, a, b, m, t
    cdef floating buf[9]
    cdef floating v
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((h, w), dtype=dtype)
    cdef floating[:, ::1] o = out
    with nogil:
        for i in range(h):
            for j in range(w):
                m = 0
                for a in range(-1, 2):
                    for b in range(-1, 2):
                        v = img[_mirror(i + a, h), _mirror(j + b, w)]
                        t = m
                        while t > 0 and buf[t - 1] > v:
                            buf[t] = buf[t - 1]
                            t -= 1
                        buf[t] = v
                        m += 1
                o[i, j] = buf[4]
    return out


def leaky_relu_forward(floating[::1] x, double slope):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating s = <floating>slope
    cdef floating one = 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty(n, dtype=dtype)
    cdef floating[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = x[i] * (one if x[i] > 0 else s)
    return out


def leaky_relu_backward(floating[::1] x, floating[::1] g, double slope):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef floating s = <floating>slope
    dtype = np.float32 if floating is float else np.float64
    out = np.empty(n, dtype=dtype)
    cdef floating[::1] o = out
    cdef floating one = 1
    with nogil:
        for i in range(n):
            o[i] = g[i] * (one if x[i] > 0 else s)
    return out


def instance_norm_forward(floating[:, ::1] x, double eps):
    """x is (N*C, H*W). Returns (xhat, inv_std per row as float64)."""
    cdef Py_ssize_t r, i, rows = x.shape[0], m = x.shape[1]
    cdef double acc, mu, d, iv
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((rows, m), dtype=dtype)
    inv = np.empty(rows, dtype=np.float64)
    cdef floating[:, ::1] o = out
    cdef double[::1] iv_v = inv
    with nogil:
        for r in range(rows):
            acc = 0.0
            for i in range(m):
                acc += x[r, i]
            mu = acc / m
            acc = 0.0
            for i in range(m):
                d = x[r, i] - mu
                acc += d * d
            iv = 1.0 / (acc / m + eps) ** 0.5
            iv_v[r] = iv
            for i in range(m):
                o[r, i] = <floating>((x[r, i] - mu) * iv)
    return out, inv


def instance_norm_backward(floating[:, ::1] g, floating[:, ::1] xhat, double[::1] inv):
    cdef Py_ssize_t r, i, rows = g.shape[0], m = g.shape[1]
    cdef double gm, gxm
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((rows, m), dtype=dtype)
    cdef floating[:, ::1] o = out
    with nogil:
        for r in range(rows):
            gm = 0.0
            gxm = 0.0
            for i in range(m):
                gm += g[r, i]
                gxm += g[r, i] * xhat[r, i]
            gm /= m
            gxm /= m
            for i in range(m):
                o[r, i] = <floating>(inv[r] * (g[r, i] - gm - xhat[r, i] * gxm))
    return out

"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Also reports how far the two backends' outputs are apart. Most kernels
agree bit for bit; the instance-norm reductions sum in a different order and
agree to float32 rounding.
"""
import argparse
import timeit

import numpy as np

from sdanet import _kernels_py as py

try:
    from sdanet import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    x = rng.standard_normal((2, 64, 64, 32)).astype(np.float32)
    small = rng.standard_normal((2, 16, 64, 32)).astype(np.float32)
    cols3 = py.im2col(small, 3)
    pooled, idx = py.maxpool2x2_forward(x)
    rows = x.reshape(128, -1)
    xhat, inv = py.instance_norm_forward(rows, 1e-5)
    flat = x.reshape(-1)
    img = rng.uniform(0, 1, (64, 32)).astype(np.float32)
    return {
        "im2col 3x3 (2,16,64,32)": ("im2col", (small, 3)),
        "col2im 3x3 (2,16,64,32)": ("col2im", (cols3, small.shape, 3)),
        "maxpool fwd (2,64,64,32)": ("maxpool2x2_forward", (x,)),
        "maxpool bwd": ("maxpool2x2_backward", (pooled, idx)),
        "instance norm fwd": ("instance_norm_forward", (rows, 1e-5)),
        "instance norm bwd": ("instance_norm_backward", (rows, xhat, inv)),
        "leaky relu fwd 262k": ("leaky_relu_forward", (flat, 0.01)),
        "leaky relu bwd 262k": ("leaky_relu_backward", (flat, flat, 0.01)),
        "median 3x3 (64,32)": ("median3x3", (img,)),
    }


def _gap(a, b):
    if isinstance(a, tuple):
        return max(_gap(u, v) for u, v in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if cy is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  max |diff|")
    for name, (fn, call_args) in cases(rng).items():
        t_py = min(timeit.repeat(lambda: getattr(py, fn)(*call_args), number=1, repeat=args.repeat))
        if cy is None:
            print(f"{name:28s} {t_py * 1e3:10.3f}")
            continue
        t_cy = min(timeit.repeat(lambda: getattr(cy, fn)(*call_args), number=1, repeat=args.repeat))
        gap = _gap(getattr(py, fn)(*call_args), getattr(cy, fn)(*call_args))
        print(f"{name:28s} {t_py * 1e3:10.3f} {t_cy * 1e3:10.3f} {t_py / t_cy:7.2f}x  {gap:.1e}")


if __name__ == "__main__":
    main()

"""Image-space harmonization baselines: histogram matching and median filtering."""
import logging

import numpy as np

from .. import kernels

log = logging.getLogger(__name__)


def histogram_match(x, ref, bins=256):
    """Monotone remap of ``x`` so its intensity CDF follows ``ref``'s.

    The CDF of ``x`` is a binned histogram interpolated linearly inside each
    bin; its values are pushed through the empirical quantile function of
    ``ref``.
    """
    x = np.asarray(x)
    ref = np.asarray(ref)
    rflat = ref.ravel().astype(np.float64)
    if rflat.max() == rflat.min():
        log.warning("histogram_match: constant reference, returning input unchanged")
        return x.copy()
    xf = x.ravel().astype(np.float64)
    lo, hi = xf.min(), xf.max()
    if hi == lo:
        return np.full_like(x, np.median(rflat))
    width = (hi - lo) / bins
    idx = np.minimum(((xf - lo) / width).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    cdf_left = np.concatenate([[0.0], np.cumsum(counts)[:-1]]) / xf.size
    frac = (xf - (lo + idx * width)) / width
    q = cdf_left[idx] + np.clip(frac, 0, 1) * counts[idx] / xf.size
    out = np.quantile(rflat, np.clip(q, 0, 1))
    return out.reshape(x.shape).astype(x.dtype)


def median_filter3x3(img):
    """3x3 median with mirror padding, applied to every 2-D plane of ``img``."""
    img = np.asarray(img)
    if img.ndim == 2:
        return kernels.median3x3(np.ascontiguousarray(img))
    flat = img.reshape((-1,) + img.shape[-2:])
    out = np.stack([kernels.median3x3(np.ascontiguousarray(p)) for p in flat])
    return out.reshape(img.shape)


def median_and_match(x, ref, bins=256):
    """The M&H baseline: median filter, then histogram matching."""
    return histogram_match(median_filter3x3(x), ref, bins)

"""Adaptation objective: AE reconstruction loss, SRIP orthogonality loss, and
their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .networks import AE_NAMES, ae_forward


@dataclass
class LossReport:
    l_ae_terms: dict = field(default_factory=dict)
    l_ae: float = 0.0
    l_orth: float = 0.0
    lambda_orth: float = 0.0
    l_a: float = 0.0

    @classmethod
    def mean_of(cls, reports):
        """Elementwise mean of several reports (one per mini-batch)."""
        n = len(reports)
        terms = {k: sum(r.l_ae_terms[k] for r in reports) / n for k in reports[0].l_ae_terms}
        l_ae = sum(r.l_ae for r in reports) / n
        l_orth = sum(r.l_orth for r in reports) / n
        lam = reports[0].lambda_orth
        return cls(terms, l_ae, l_orth, lam, l_ae + lam * l_orth)


def reconstruction_loss(bundle, bank):
    """Sum over the five AEs of mean squared reconstruction error.

    Returns the scalar tensor and a dict of per-AE float terms.
    """
    inputs, recon = ae_forward(bank, bundle)
    total = None
    terms = {}
    for name in AE_NAMES:
        term = ad.mse(recon[name], inputs[name])
        terms[name] = float(term.data)
        total = term if total is None else ad.add(total, term)
    return total, terms


def spectral_start_vector(n, seed, dtype=np.float64):
    v = np.random.default_rng(seed).standard_normal(n).astype(dtype)
    return v / np.linalg.norm(v)


def srip_orth_loss(mats, power_iters=2, seed=0):
    """Sum over ``mats`` of a power-iteration estimate of sigma(W^T W - I).

    The iteration vector is computed outside the graph; only the final
    product (W^T W - I) v is differentiated.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    total = None
    for k, w in enumerate(mats):
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"srip_orth_loss needs square matrices, got {w.shape}")
        n = w.shape[1]
        wd = w.data.astype(np.float64)
        m = wd.T @ wd - np.eye(n)
        v = spectral_start_vector(n, seed + k)
        for _ in range(power_iters):
            u = m @ v
            nu = np.linalg.norm(u)
            if nu == 0.0:
                break
            v = u / nu
        vt = ad.Tensor(v.astype(w.dtype))
        # (W^T W - I) v == W^T (W v) - v
        u = ad.sub(ad.matmul(ad.transpose(w), ad.matmul(w, vt)), vt)
        term = ad.norm(u)
        total = term if total is None else ad.add(total, term)
    return total


def spectral_deviation(w):
    """Exact sigma(W^T W - I) by dense eigendecomposition."""
    w = np.asarray(w.data if isinstance(w, ad.Tensor) else w, dtype=np.float64)
    m = w.T @ w - np.eye(w.shape[1])
    return float(np.sqrt(np.max(np.linalg.eigvalsh(m.T @ m))))


def adaptation_loss(bundle, bank, adaptors, lambda_orth, power_iters=2, seed=0):
    if lambda_orth < 0:
        raise ValueError("lambda_orth must be >= 0")
    l_ae, terms = reconstruction_loss(bundle, bank)
    l_orth = srip_orth_loss(adaptors.feature_matrices, power_iters, seed)
    total = ad.add(l_ae, ad.mul(l_orth, float(lambda_orth)))
    l_ae_v, l_orth_v = float(l_ae.data), float(l_orth.data)
    report = LossReport(terms, l_ae_v, l_orth_v, float(lambda_orth), l_ae_v + float(lambda_orth) * l_orth_v)
    return total, report

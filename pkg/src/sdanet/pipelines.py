"""Offline training of the task network and AE bank, and per-subject
test-time adaptation of the adaptors."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import networks as nw
from .losses import LossReport, adaptation_loss, reconstruction_loss

log = logging.getLogger(__name__)

MAX_ITERS = "max-iters"
NO_IMPROVEMENT = "insufficient-improvement"


# L_AE terms are per-element means, so the orthogonality weight sits an order
# of magnitude above a sum-reduced setting; the 1:5 segmentation:synthesis
# ratio is kept.
DEFAULT_LAMBDA_ORTH = {nw.SEGMENTATION: 10.0, nw.SYNTHESIS: 50.0}


class AdaptationError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = nw.SEGMENTATION
    epochs: int = 40
    ae_epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-3
    adapt_lr: float = 1e-3
    lambda_orth: float = -1.0   # negative: use the task default below
    max_adapt_iters: int = 5
    improvement: float = 0.95
    patience: int = 10
    power_iters: int = 10
    first_kernel: int = 1
    seed: int = 0

    def orth_weight(self):
        """lambda_orth, or the task default when unset (negative)."""
        if self.lambda_orth >= 0:
            return self.lambda_orth
        return DEFAULT_LAMBDA_ORTH[self.task]

    def validate(self):
        if self.task not in nw.TASK_KINDS:
            raise ValueError(f"task must be one of {nw.TASK_KINDS}, got {self.task!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.improvement < 1.0:
            raise ValueError("improvement factor must lie in (0, 1)")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.first_kernel not in (1, 3):
            raise ValueError("first_kernel must be 1 or 3")
        if self.max_adapt_iters < 1:
            raise ValueError("max_adapt_iters must be >= 1")


@dataclass
class Prediction:
    outputs: np.ndarray              # (S, C, H, W): probabilities or synthesized image
    labels: np.ndarray | None = None  # (S, H, W) uint8 argmax for segmentation


@dataclass
class AdaptationReport:
    losses: list = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""
    duration: float = 0.0
    prediction: Prediction | None = None

    def lines(self):
        out = []
        for i, r in enumerate(self.losses, 1):
            terms = " ".join(f"{k}={v:.6g}" for k, v in r.l_ae_terms.items())
            out.append(f"iter {i}: L_AE={r.l_ae:.6g} L_orth={r.l_orth:.6g} L_A={r.l_a:.6g} ({terms})")
        out.append(f"iterations: {self.iterations}")
        out.append(f"stop: {self.stop_reason}")
        out.append(f"duration_s: {self.duration:.3f}")
        return out


# ------------------------------------------------------------------ data helpers

def _stack(subjects):
    xs = np.concatenate([s.slices for s in subjects]).astype(np.float32)
    if subjects[0].labels is not None:
        ys = np.concatenate([s.labels for s in subjects])
    elif subjects[0].targets is not None:
        ys = np.concatenate([s.targets for s in subjects]).astype(np.float32)
    else:
        ys = None
    return xs, ys


def _batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def task_loss(weights, x, y):
    bundle = nw.task_forward(ad.Tensor(x), weights)
    if weights.kind == nw.SEGMENTATION:
        return ad.cross_entropy(bundle.logits, y)
    return ad.mse(bundle.logits, ad.Tensor(y))


def _eval_task_loss(weights, xs, ys, batch_size):
    frozen = weights.frozen()
    total = 0.0
    for idx in _batches(len(xs), batch_size):
        total += float(task_loss(frozen, xs[idx], ys[idx]).data) * len(idx)
    return total / len(xs)


# ------------------------------------------------------------------ offline training

def train_task(train, val, cfg, n_out=None):
    """Train T on labelled source subjects with early stopping on ``val``.

    Returns (best TaskWeights, history list of (epoch, train_loss, val_loss)).
    """
    cfg.validate()
    if not train:
        raise ValueError("empty training set")
    xs, ys = _stack(train)
    if ys is None:
        raise ValueError("training subjects carry no labels or targets")
    if cfg.task == nw.SEGMENTATION:
        n_out = n_out or int(ys.max()) + 1
        if ys.max() >= n_out:
            raise ValueError(f"labels reach {ys.max()} but the model has {n_out} classes")
    else:
        n_out = 1
    vx, vy = _stack(val) if val else (xs, ys)

    weights = nw.init_task(cfg.task, n_out, seed=cfg.seed).trainable()
    opt = ad.Adam(weights.params.values(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best = weights.copy()
    best_val = _eval_task_loss(weights, vx, vy, cfg.batch_size)
    history = [(0, math.nan, best_val)]
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        running = 0.0
        for idx in _batches(len(xs), cfg.batch_size, rng):
            loss = task_loss(weights, xs[idx], ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.data) * len(idx)
        val_loss = _eval_task_loss(weights, vx, vy, cfg.batch_size)
        history.append((epoch, running / len(xs), val_loss))
        log.info("task epoch %d train %.5f val %.5f", epoch, running / len(xs), val_loss)
        if val_loss < best_val:
            best_val, best, stale = val_loss, weights.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history


def _cached_bundles(weights, xs, batch_size):
    """Frozen-T taps for every training batch, as plain arrays."""
    frozen = weights.frozen()
    cache = []
    for idx in _batches(len(xs), batch_size):
        b = nw.task_forward(ad.Tensor(xs[idx]), frozen)
        cache.append((idx, b.x.data, [f.data for f in b.features], b.y.data))
    return cache


def _bundle_subset(entry, rows):
    _, x, feats, y = entry
    return nw.FeatureBundle(ad.Tensor(x[rows]), [ad.Tensor(f[rows]) for f in feats],
                            ad.Tensor(y[rows]), None)


def train_autoencoders(weights, train, cfg):
    """Train the AE bank on frozen-T taps of the source training set.

    T never sees a gradient here, so its taps are computed once up front.
    Returns (AEBank, per-epoch mean L_AE list).
    """
    cfg.validate()
    xs, _ = _stack(train)
    bank = nw.init_ae_bank(weights.n_out, seed=cfg.seed + 1).trainable()
    opt = ad.Adam(bank.params.values(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    # one big cache in natural order, then re-batched per epoch
    cache = _cached_bundles(weights, xs, len(xs))[0]
    history = []
    for epoch in range(1, cfg.ae_epochs + 1):
        running = 0.0
        for idx in _batches(len(xs), cfg.batch_size, rng):
            loss, _ = reconstruction_loss(_bundle_subset(cache, idx), bank)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.data) * len(idx)
        history.append(running / len(xs))
        log.info("ae epoch %d L_AE %.5f", epoch, history[-1])
    return bank, history


def mean_reconstruction_error(weights, bank, subjects, batch_size=8):
    """Mean L_AE of the unadapted model over ``subjects``."""
    xs, _ = _stack(subjects)
    tf, bf = weights.frozen(), bank.frozen()
    total = 0.0
    for idx in _batches(len(xs), batch_size):
        loss, _ = reconstruction_loss(nw.task_forward(ad.Tensor(xs[idx]), tf), bf)
        total += float(loss.data) * len(idx)
    return total / len(xs)


# ------------------------------------------------------------------ test time

def run_adaptation_loop(step, max_iters=5, improvement=0.95):
    """Drive ``step(iteration) -> mean L_A`` under the stopping rule.

    The loop continues while fewer than ``max_iters`` iterations have run and
    the latest loss beat ``improvement`` times the previous one; the first
    iteration always runs. Returns (losses, stop_reason).
    """
    losses = []
    prev = math.inf
    while True:
        cur = step(len(losses) + 1)
        losses.append(cur)
        if not improvement * prev > cur:
            return losses, NO_IMPROVEMENT
        if len(losses) >= max_iters:
            return losses, MAX_ITERS
        prev = cur


def predict(subject, weights, adaptors=None, batch_size=8):
    """Per-slice prediction; adds the argmax label map for segmentation."""
    xs = subject.slices if hasattr(subject, "slices") else subject
    tf = weights.frozen()
    outs = []
    for idx in _batches(len(xs), batch_size):
        b = nw.task_forward(ad.Tensor(np.ascontiguousarray(xs[idx])), tf, adaptors)
        outs.append(b.y.data)
    outputs = np.concatenate(outs)
    labels = outputs.argmax(axis=1).astype(np.uint8) if weights.kind == nw.SEGMENTATION else None
    return Prediction(outputs, labels)


def adapt_subject(subject, weights, bank, cfg, seed=None):
    """Fit fresh adaptors to one subject and predict with them.

    Returns (Prediction, AdaptationReport, AdaptorSet).
    """
    cfg.validate()
    xs = subject.slices
    if len({s.shape for s in xs}) != 1:
        raise ValueError("slices of a subject must share one shape")
    seed = cfg.seed if seed is None else seed
    start = time.perf_counter()
    adaptors = nw.calibrate_image_adaptor(nw.init_adaptors(seed, cfg.first_kernel), xs)
    names = list(adaptors.params)
    step_scale = nw.adaptor_step_scale(adaptors)
    opt = ad.Adam([adaptors.params[k] for k in names], lr=cfg.adapt_lr,
                  lr_scale={i: step_scale[k] for i, k in enumerate(names) if k in step_scale})
    tf, bf = weights.frozen(), bank.frozen()
    reports = []

    def step(iteration):
        batch_reports = []
        for idx in _batches(len(xs), cfg.batch_size):
            bundle = nw.task_forward(ad.Tensor(np.ascontiguousarray(xs[idx])), tf, adaptors)
            loss, rep = adaptation_loss(bundle, bf, adaptors, cfg.orth_weight(), cfg.power_iters, seed)
            if not np.isfinite(rep.l_a):
                raise AdaptationError(
                    f"non-finite adaptation loss at iteration {iteration} (L_AE={rep.l_ae}, L_orth={rep.l_orth})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_reports.append(rep)
        mean = LossReport.mean_of(batch_reports)
        reports.append(mean)
        log.info("adapt %s iter %d L_A %.5f", getattr(subject, "subject_id", "?"), iteration, mean.l_a)
        return mean.l_a

    losses, reason = run_adaptation_loop(step, cfg.max_adapt_iters, cfg.improvement)
    pred = predict(subject, weights, adaptors, cfg.batch_size)
    report = AdaptationReport(reports, len(losses), reason, time.perf_counter() - start, pred)
    return pred, report, adaptors

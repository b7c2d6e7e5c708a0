"""End-to-end benchmark on phantom data.

Source subjects are split into train / validation / source-test; target
subjects are drawn from the same generator and then intensity-shifted. The
methods compared per subject are NA (no adaptation), an image-space
harmonization baseline, Ours (1x1 first adaptor layer) and Ours-3x3.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import networks as nw
from .. import pipelines as pl
from ..losses import spectral_deviation
from .harmonize import histogram_match, median_and_match
from .metrics import dice, mse_metric, ssim
from .phantoms import PhantomConfig, ShiftConfig, gen_phantom_dataset, shift_subject

log = logging.getLogger(__name__)

CSV_HEADER = ("method", "subject", "metric", "class", "value")
NA, MH, HIST, OURS, OURS3 = "NA", "M&H", "Hist", "Ours", "Ours-3x3"
# gamma of the default target-domain intensity shift
TARGET_GAMMA = 1.8


@dataclass
class BenchmarkConfig:
    n_train: int = 3
    n_val: int = 1
    n_source_test: int = 3
    n_target: int = 6
    slices_per_subject: int = 8
    shift_seed: int = 100

    def validate(self):
        for name in ("n_train", "n_val", "n_target", "slices_per_subject"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_source_test < 0:
            raise ValueError("n_source_test must be >= 0")


@dataclass
class Split:
    train: list
    val: list
    source_test: list
    target: list


@dataclass
class BenchmarkResult:
    rows: list = field(default_factory=list)       # (method, subject, metric, class, value)
    domains: dict = field(default_factory=dict)    # subject -> "source" | "target"
    timings: dict = field(default_factory=dict)
    adapt_seconds: list = field(default_factory=list)
    deviations: list = field(default_factory=list)  # max sigma(W^T W - I) per Ours run
    weights: object = None
    bank: object = None

    def values(self, method, metric, domain=None, cls="all"):
        """Per-subject values, in subject order."""
        return [v for m, s, k, c, v in self.rows
                if m == method and k == metric and c == cls
                and (domain is None or self.domains[s] == domain)]

    def mean(self, method, metric, domain=None):
        vals = self.values(method, metric, domain)
        return float(np.mean(vals)) if vals else float("nan")

    def methods(self):
        seen = []
        for r in self.rows:
            if r[0] not in seen:
                seen.append(r[0])
        return seen

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for m, s, k, c, v in self.rows:
            w.writerow([m, s, k, c, repr(float(v))])
        return buf.getvalue()

    def table(self):
        """Aligned text summary: one row per method, mean metric per domain."""
        metrics = []
        for r in self.rows:
            if r[2] not in metrics:
                metrics.append(r[2])
        cols = [(d, k) for d in ("target", "source") for k in metrics
                if any(self.domains[s] == d for s in self.domains)]
        header = ["method"] + [f"{d}:{k}" for d, k in cols]
        lines = [header]
        for m in self.methods():
            row = [m]
            for d, k in cols:
                vals = self.values(m, k, d)
                row.append(f"{np.mean(vals):.4f}" if vals else "-")
            lines.append(row)
        widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in lines)


def make_split(phantom, bench, shift):
    """Deterministic source/target split. Target subjects are fresh draws from
    the source generator, then shifted; their ids start with ``t``."""
    bench.validate()
    n_src = bench.n_train + bench.n_val + bench.n_source_test
    subjects = gen_phantom_dataset(phantom, n_src + bench.n_target, bench.slices_per_subject)
    train = subjects[:bench.n_train]
    val = subjects[bench.n_train:bench.n_train + bench.n_val]
    src_test = subjects[bench.n_train + bench.n_val:n_src]
    target = []
    for i, s in enumerate(subjects[n_src:]):
        shifted = shift_subject(s, shift, seed=bench.shift_seed + i)
        target.append(dataclasses.replace(shifted, subject_id="t" + s.subject_id[1:]))
    return Split(train, val, src_test, target)


def reference_slice(split):
    """Harmonization reference: the middle slice of the first training subject."""
    slices = split.train[0].slices
    return slices[len(slices) // 2:len(slices) // 2 + 1]


def _segmentation_rows(method, subject, labels, n_classes):
    per = [dice(labels, subject.labels, k) for k in range(n_classes)]
    rows = [(method, subject.subject_id, "dice", str(k), v) for k, v in enumerate(per)]
    rows.append((method, subject.subject_id, "dice", "all", float(np.mean(per))))
    return rows


def _synthesis_rows(method, subject, images):
    tgt = subject.targets[:, 0]
    img = images[:, 0]
    return [(method, subject.subject_id, "mse", "all", mse_metric(img, tgt)),
            (method, subject.subject_id, "ssim", "all",
             float(np.mean([ssim(a, b) for a, b in zip(img, tgt)])))]


def run_benchmark(task=nw.SEGMENTATION, bench=None, phantom=None, shift=None, train_cfg=None,
                  weights=None, bank=None, methods=None, split=None):
    """Train (unless ``weights``/``bank`` are given), adapt, evaluate.

    Returns a BenchmarkResult. Everything is seeded from ``phantom.seed`` and
    ``train_cfg.seed``; with a single BLAS thread the result is bit-identical
    across runs.
    """
    bench = bench or BenchmarkConfig()
    phantom = phantom or PhantomConfig(task=task)
    shift = shift or ShiftConfig(gamma=TARGET_GAMMA)
    cfg = train_cfg or pl.TrainConfig(task=task, seed=phantom.seed)
    if phantom.task != task or cfg.task != task:
        raise ValueError("task mismatch between benchmark, phantom and training configs")
    baseline = MH if task == nw.SEGMENTATION else HIST
    methods = list(methods or (NA, baseline, OURS, OURS3))
    unknown = set(methods) - {NA, MH, HIST, OURS, OURS3}
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")

    split = split or make_split(phantom, bench, shift)
    result = BenchmarkResult()
    t0 = time.perf_counter()
    if weights is None:
        weights, _ = pl.train_task(split.train, split.val, cfg,
                                   n_out=phantom.n_classes if task == nw.SEGMENTATION else None)
    result.timings["train_task"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    if bank is None:
        bank, _ = pl.train_autoencoders(weights, split.train, cfg)
    result.timings["train_ae"] = time.perf_counter() - t0
    result.weights, result.bank = weights, bank

    reference = reference_slice(split)
    t0 = time.perf_counter()
    for subject in split.target + split.source_test:
        result.domains[subject.subject_id] = subject.domain
        for method in methods:
            if method == NA:
                pred = pl.predict(subject, weights)
            elif method in (MH, HIST):
                fn = median_and_match if method == MH else histogram_match
                pred = pl.predict(subject.with_slices(fn(subject.slices, reference)), weights)
            else:
                k = 1 if method == OURS else 3
                pred, report, adaptors = pl.adapt_subject(
                    subject, weights, bank, dataclasses.replace(cfg, first_kernel=k))
                result.adapt_seconds.append(report.duration)
                result.deviations.append(max(spectral_deviation(w.data) for w in adaptors.feature_matrices))
            if task == nw.SEGMENTATION:
                result.rows += _segmentation_rows(method, subject, pred.labels, phantom.n_classes)
            else:
                result.rows += _synthesis_rows(method, subject, pred.outputs)
        log.info("benchmark: %s done", subject.subject_id)
    result.timings["evaluate"] = time.perf_counter() - t0
    return result


def write_results(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.csv_text(), encoding="utf-8")
    (out / "summary.txt").write_text(result.table() + "\n", encoding="utf-8")
    return out / "results.csv"

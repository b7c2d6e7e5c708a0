"""Layered phantoms standing in for retinal OCT (segmentation) and paired
T1/T2 slices (synthesis), plus the intensity shift that defines a target
domain."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

SEGMENTATION = "segmentation"
SYNTHESIS = "synthesis"


@dataclass
class PhantomConfig:
    task: str = SEGMENTATION
    height: int = 64
    width: int = 32
    n_classes: int = 5
    # low-frequency boundary wobble: number of sine modes and peak amplitude in px
    boundary_modes: int = 2
    boundary_amplitude: float = 4.0
    band_means: tuple = (0.05, 0.25, 0.45, 0.65, 0.85)
    band_stds: tuple = (0.02, 0.02, 0.02, 0.02, 0.02)
    noise: float = 0.05
    subject_jitter: float = 0.03
    target_noise: float = 0.02
    # Gaussian point-spread width in px applied to the band image before noise
    blur: float = 1.5
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.height % 8 or self.width % 8:
            raise ValueError("phantom size must be divisible by 8")
        if len(self.band_means) != self.n_classes or len(self.band_stds) != self.n_classes:
            raise ValueError("band_means/band_stds need one entry per class")
        if self.height < 4 * self.n_classes:
            raise ValueError(f"{self.n_classes} bands do not fit in {self.height} rows")
        if not all(0.0 <= m <= 1.0 for m in self.band_means):
            raise ValueError("band means must lie in [0, 1]")


@dataclass
class ShiftConfig:
    gamma: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    noise: float = 0.0
    speckle: bool = False

    def validate(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def is_identity(self):
        return (self.gamma == 1.0 and self.contrast == 1.0 and self.brightness == 0.0
                and self.noise == 0.0)


@dataclass
class SubjectRecord:
    subject_id: str
    slices: np.ndarray                 # (S, 1, H, W) float32 in [0, 1]
    labels: np.ndarray | None = None   # (S, H, W) uint8, segmentation
    targets: np.ndarray | None = None  # (S, 1, H, W) float32, synthesis
    domain: str = "source"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.slices.ndim != 4 or self.slices.shape[1] != 1:
            raise ValueError(f"slices must be (S, 1, H, W), got {self.slices.shape}")
        if self.labels is not None and self.labels.shape != (self.slices.shape[0],) + self.slices.shape[2:]:
            raise ValueError("label stack does not match slices")
        if self.targets is not None and self.targets.shape != self.slices.shape:
            raise ValueError("target stack does not match slices")

    def __len__(self):
        return self.slices.shape[0]

    def with_slices(self, slices, domain=None, **prov):
        return SubjectRecord(self.subject_id, slices.astype(np.float32), self.labels, self.targets,
                             domain or self.domain, {**self.provenance, **prov})


def remap_t2(m):
    """Fixed monotone (decreasing) nonlinear intensity map from T1 to T2 contrast."""
    return 0.9 * (1.0 - np.asarray(m)) ** 1.5 + 0.05


def _boundaries(rng, cfg):
    h, w, k = cfg.height, cfg.width, cfg.n_classes
    min_thick = 3
    # bands of random thickness filling the height, then low-frequency wobble
    weights = rng.uniform(0.7, 1.3, size=k)
    edges = np.cumsum(weights / weights.sum() * h)[:-1]
    xs = np.arange(w) / w
    curves = []
    shared = np.zeros(w)
    for _ in range(cfg.boundary_modes):
        freq = rng.uniform(0.3, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        shared += np.sin(2 * np.pi * freq * xs + phase)
    shared *= cfg.boundary_amplitude / max(cfg.boundary_modes, 1)
    for e in edges:
        local = 0.6 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * xs + rng.uniform(0, 2 * np.pi))
        curves.append(e + shared + local)
    curves = np.array(curves)
    for i in range(1, len(curves)):
        curves[i] = np.maximum(curves[i], curves[i - 1] + min_thick)
    return np.clip(curves, min_thick, h - min_thick)


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with edge replication; ``sigma`` <= 0 is a no-op."""
    if sigma <= 0:
        return img
    r = int(np.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    out = np.pad(img, r, mode="edge")
    out = np.apply_along_axis(np.convolve, 0, out, k, mode="valid")
    return np.apply_along_axis(np.convolve, 1, out, k, mode="valid")


def label_map(curves, height):
    rows = np.arange(height)[:, None] + 0.5
    return (rows[None] > curves[:, None, :]).sum(axis=0).astype(np.uint8)


def gen_subject(cfg, subject_id, n_slices, rng):
    means = np.asarray(cfg.band_means) + rng.normal(0, cfg.subject_jitter, size=cfg.n_classes)
    stds = np.asarray(cfg.band_stds)
    slices, labels, targets = [], [], []
    for _ in range(n_slices):
        lab = label_map(_boundaries(rng, cfg), cfg.height)
        for _ in range(8):
            if len(np.unique(lab)) == cfg.n_classes:
                break
            lab = label_map(_boundaries(rng, cfg), cfg.height)
        else:
            raise ValueError("could not place all bands; increase height or reduce n_classes")
        band_level = means[lab] + rng.normal(0, 1, size=cfg.n_classes)[lab] * stds[lab]
        img = gaussian_blur(band_level, cfg.blur) + rng.normal(0, cfg.noise, size=lab.shape)
        slices.append(np.clip(img, 0, 1))
        labels.append(lab)
        if cfg.task == SYNTHESIS:
            t2 = remap_t2(np.clip(band_level, 0, 1)) + rng.normal(0, cfg.target_noise, size=lab.shape)
            targets.append(np.clip(t2, 0, 1))
    slices = np.stack(slices)[:, None].astype(np.float32)
    labels = np.stack(labels)
    prov = {"phantom": asdict(cfg), "subject": subject_id}
    if cfg.task == SYNTHESIS:
        return SubjectRecord(subject_id, slices, labels=None,
                             targets=np.stack(targets)[:, None].astype(np.float32), provenance=prov)
    return SubjectRecord(subject_id, slices, labels=labels, provenance=prov)


def gen_phantom_dataset(cfg, n_subjects, slices_per_subject, prefix="s"):
    """Deterministic list of subjects drawn from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    return [gen_subject(cfg, f"{prefix}{i:03d}", slices_per_subject, rng) for i in range(n_subjects)]


def apply_shift(x, shift, seed=0):
    """clip(contrast * x**gamma + brightness + noise, 0, 1); labels are untouched."""
    shift.validate()
    x = np.asarray(x, dtype=np.float64)
    y = shift.contrast * np.power(np.clip(x, 0, 1), shift.gamma) + shift.brightness
    if shift.noise > 0:
        rng = np.random.default_rng(seed)
        if shift.speckle:
            y = y * (1.0 + rng.normal(0, shift.noise, size=y.shape))
        else:
            y = y + rng.normal(0, shift.noise, size=y.shape)
    return np.clip(y, 0, 1).astype(np.float32)


def shift_subject(subject, shift, seed=0):
    prov = {"shift": asdict(shift), "shift_seed": seed}
    return subject.with_slices(apply_shift(subject.slices, shift, seed), domain="target", **prov)

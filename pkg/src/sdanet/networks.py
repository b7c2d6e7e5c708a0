"""Task network, auto-encoder bank and adaptors as functions over parameter dicts.

All three parameter groups are plain ``dict[str, Tensor]`` wrapped in small
dataclasses so they can be checkpointed by name and frozen without copying.

The task network is a residual U-Net with three 2x2 poolings and 64 channels
everywhere. Its input is instance-normalized; with adaptors attached the image
adaptor's output (itself instance-normalized) takes that place, so both paths
feed the network the same intensity space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SEGMENTATION = "segmentation"
SYNTHESIS = "synthesis"
TASK_KINDS = (SEGMENTATION, SYNTHESIS)

WIDTH = 64
AE_FEATURE_CHANNELS = (64, 32, 16)
AE_IMAGE_CHANNELS = (32, 16, 8)
SLOPE = 0.01


class ArchitectureError(ValueError):
    """Parameters do not fit the expected architecture."""


def _group(params, requires_grad):
    return {k: Tensor(v.data, requires_grad=requires_grad) for k, v in params.items()}


@dataclass
class TaskWeights:
    kind: str
    n_out: int
    params: dict = field(default_factory=dict)

    def frozen(self):
        """Read-only view sharing storage with ``self``."""
        return TaskWeights(self.kind, self.n_out, _group(self.params, False))

    def trainable(self):
        return TaskWeights(self.kind, self.n_out, _group(self.params, True))

    def copy(self):
        return TaskWeights(self.kind, self.n_out,
                           {k: Tensor(v.data.copy()) for k, v in self.params.items()})


@dataclass
class AEBank:
    y_channels: int
    params: dict = field(default_factory=dict)

    def frozen(self):
        return AEBank(self.y_channels, _group(self.params, False))

    def trainable(self):
        return AEBank(self.y_channels, _group(self.params, True))

    def copy(self):
        return AEBank(self.y_channels, {k: Tensor(v.data.copy()) for k, v in self.params.items()})


@dataclass
class AdaptorSet:
    first_kernel: int = 1
    params: dict = field(default_factory=dict)

    @property
    def feature_matrices(self):
        return [self.params[f"a{i}"] for i in (1, 2, 3)]

    def copy(self):
        return AdaptorSet(self.first_kernel,
                          {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                           for k, v in self.params.items()})


@dataclass
class FeatureBundle:
    """Taps of one forward pass: x', f^1..f^6 (index 0..5), prediction y'."""
    x: Tensor
    features: list
    y: Tensor
    logits: Tensor

    def pair(self, level):
        """Encoder/decoder taps sharing a resolution, level in {1, 2, 3}."""
        return self.features[level - 1], self.features[6 - level]


# ------------------------------------------------------------------ building blocks

def _init_conv(params, rng, name, cin, cout, k, bias=True):
    params[f"{name}.w"] = Tensor(ad.kaiming_normal(rng, (cout, cin, k, k), SLOPE))
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32))


def _conv(params, name, x):
    return ad.conv2d(x, params[f"{name}.w"], params.get(f"{name}.b"))


def _init_res(params, rng, name, cin, cout):
    _init_conv(params, rng, f"{name}.c1", cin, cout, 3)
    _init_conv(params, rng, f"{name}.c2", cout, cout, 3)
    if cin != cout:
        _init_conv(params, rng, f"{name}.proj", cin, cout, 1, bias=False)


def residual_block(params, name, x):
    """conv3-IN-lrelu-conv3-IN, plus (projected) identity, then lrelu."""
    h = ad.leaky_relu(ad.instance_norm(_conv(params, f"{name}.c1", x)), SLOPE)
    h = ad.instance_norm(_conv(params, f"{name}.c2", h))
    skip = _conv(params, f"{name}.proj", x) if f"{name}.proj.w" in params else x
    return ad.leaky_relu(ad.add(h, skip), SLOPE)


def _up_block(params, name, x):
    h = _conv(params, name, ad.upsample_nearest2x(x))
    return ad.leaky_relu(ad.instance_norm(h), SLOPE)


# ------------------------------------------------------------------ task network

def init_task(kind, n_out, seed=0):
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    if kind == SYNTHESIS and n_out != 1:
        raise ValueError("synthesis produces a single channel")
    rng = np.random.default_rng(seed)
    p = {}
    _init_res(p, rng, "enc0", 1, WIDTH)
    for i in (1, 2, 3):
        _init_res(p, rng, f"enc{i}", WIDTH, WIDTH)
    _init_res(p, rng, "dec3", WIDTH, WIDTH)
    for i in (2, 1, 0):
        _init_conv(p, rng, f"up{i}", WIDTH, WIDTH, 3)
    _init_res(p, rng, "dec2", 2 * WIDTH, WIDTH)
    _init_res(p, rng, "dec1", 2 * WIDTH, WIDTH)
    _init_conv(p, rng, "head", 2 * WIDTH, n_out, 1)
    return TaskWeights(kind, n_out, p)


def check_input(x):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected single-channel NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if h % 8 or w % 8:
        raise ValueError(f"spatial size {h}x{w} must be divisible by 8")


def task_forward(x, weights, adaptors=None, image_adaptor=True):
    """Run T, optionally with adaptors, returning every tap.

    ``image_adaptor=False`` keeps the feature adaptors but replaces A^x by the
    unadapted input path (a test hook).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    check_input(x)
    p = weights.params
    if adaptors is not None and image_adaptor:
        xp = image_adaptor_forward(adaptors, x)
    else:
        xp = ad.instance_norm(x)

    def tap(level, f):
        if adaptors is None:
            return f
        return adaptor_feature_apply(adaptors.params[f"a{level}"], f)

    e0 = residual_block(p, "enc0", xp)
    f1 = tap(1, residual_block(p, "enc1", ad.maxpool2x2(e0)))
    f2 = tap(2, residual_block(p, "enc2", ad.maxpool2x2(f1)))
    f3 = tap(3, residual_block(p, "enc3", ad.maxpool2x2(f2)))
    f4 = residual_block(p, "dec3", f3)
    f5 = residual_block(p, "dec2", ad.concat_channels(_up_block(p, "up2", f4), f2))
    f6 = residual_block(p, "dec1", ad.concat_channels(_up_block(p, "up1", f5), f1))
    logits = _conv(p, "head", ad.concat_channels(_up_block(p, "up0", f6), e0))
    y = ad.softmax_channels(logits) if weights.kind == SEGMENTATION else logits
    return FeatureBundle(xp, [f1, f2, f3, f4, f5, f6], y, logits)


# ------------------------------------------------------------------ auto-encoders

AE_NAMES = ("x", "l1", "l2", "l3", "y")


def _init_ae(p, rng, name, cin, chans):
    c1, c2, c3 = chans
    _init_res(p, rng, f"{name}.enc0", cin, c1)
    _init_res(p, rng, f"{name}.enc1", c1, c2)
    _init_res(p, rng, f"{name}.enc2", c2, c3)
    _init_res(p, rng, f"{name}.dec1", c3, c2)
    _init_res(p, rng, f"{name}.dec0", c2, c1)
    _init_conv(p, rng, f"{name}.out", c1, cin, 1)


def init_ae_bank(y_channels, seed=0):
    rng = np.random.default_rng(seed)
    p = {}
    _init_ae(p, rng, "x", 1, AE_IMAGE_CHANNELS)
    for i in (1, 2, 3):
        _init_ae(p, rng, f"l{i}", 2 * WIDTH, AE_FEATURE_CHANNELS)
    _init_ae(p, rng, "y", y_channels, AE_IMAGE_CHANNELS)
    return AEBank(y_channels, p)


def autoencode(params, name, x):
    """One AE: two poolings, no long skips, linear 1x1 output."""
    expected = params[f"{name}.out.w"].shape[0]
    if x.shape[1] != expected:
        raise ArchitectureError(f"AE {name} expects {expected} channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise ArchitectureError(f"AE {name} input {h}x{w} not divisible by 4")
    h = residual_block(params, f"{name}.enc0", x)
    h = residual_block(params, f"{name}.enc1", ad.maxpool2x2(h))
    h = residual_block(params, f"{name}.enc2", ad.maxpool2x2(h))
    h = residual_block(params, f"{name}.dec1", ad.upsample_nearest2x(h))
    h = residual_block(params, f"{name}.dec0", ad.upsample_nearest2x(h))
    return _conv(params, f"{name}.out", h)


def ae_inputs(bundle):
    """AE name -> the tensor that AE reconstructs."""
    out = {"x": bundle.x}
    for i in (1, 2, 3):
        out[f"l{i}"] = ad.concat_channels(*bundle.pair(i))
    out["y"] = bundle.y
    return out


def ae_forward(bank, bundle):
    """Return (inputs, reconstructions), both keyed by AE name."""
    inputs = ae_inputs(bundle)
    if bundle.y.shape[1] != bank.y_channels:
        raise ArchitectureError(f"AE^y built for {bank.y_channels} channels, prediction has {bundle.y.shape[1]}")
    recon = {name: autoencode(bank.params, name, inputs[name]) for name in AE_NAMES}
    return inputs, recon


# ------------------------------------------------------------------ adaptors

def init_adaptors(seed=0, first_kernel=1):
    """A^x Kaiming-normal with zero biases; each W_{A^i} the identity.

    With ``first_kernel=3`` the first layer's 1x1 draw sits at the centre tap
    of a zero 3x3 kernel, so both variants start from the same function and
    the off-centre taps are learned at test time.
    """
    if first_kernel not in (1, 3):
        raise ValueError("first_kernel must be 1 or 3")
    rng = np.random.default_rng(seed)
    p = {}
    _init_conv(p, rng, "ax0", 1, WIDTH, 1)
    if first_kernel == 3:
        w = np.zeros((WIDTH, 1, 3, 3), dtype=np.float32)
        w[:, :, 1, 1] = p["ax0.w"].data[:, :, 0, 0]
        p["ax0.w"] = Tensor(w)
    _init_conv(p, rng, "ax1", WIDTH, WIDTH, 1)
    _init_conv(p, rng, "ax2", WIDTH, 1, 1)
    for i in (1, 2, 3):
        p[f"a{i}"] = Tensor(np.eye(WIDTH, dtype=np.float32))
    for t in p.values():
        t.requires_grad = True
    return AdaptorSet(first_kernel, p)


def image_adaptor_forward(adaptors, x):
    """Three (conv -> leaky ReLU -> instance norm) layers, channels 64, 64, 1."""
    h = x
    for i in range(3):
        h = ad.instance_norm(ad.leaky_relu(_conv(adaptors.params, f"ax{i}", h), SLOPE))
    return h


def calibrate_image_adaptor(adaptors, x, margin=0.0, rescale=(1, 2), first_norm=0.25):
    """Data-dependent initialization of A^x on the slices ``x``.

    Layer by layer, each bias is set so its leaky ReLU sits on the positive
    branch for every pixel of ``x``, with the kink ``margin`` below the
    smallest pre-activation. With all activations linear, instance norm
    cancels the affine part, so in 1x1 mode A^x(x) equals IN(x) up to sign;
    the sign is made positive by flipping the last layer.

    Layers listed in ``rescale`` also get each output channel's weights
    divided by its pre-activation std over ``x``. At this starting point all
    64 first-layer channels carry the same image up to sign, so a channel of
    layers 2 and 3 sees a weighted sum whose net coefficient can be tiny; a
    single sign-like Adam step then flips it and instance norm blows the flip
    up to full scale. Unit net coefficients remove that failure. The first
    layer keeps its Kaiming directions but each channel's weight vector is
    brought to norm ``first_norm``: small enough that one Adam step moves a
    channel's kink across a meaningful part of the intensity range, and
    equal across channels so none starts out nearly dead.
    Modifies ``adaptors`` in place and returns it.
    """
    p = adaptors.params
    x = ad.Tensor(np.ascontiguousarray(x, dtype=np.float32))
    h = x
    for i in range(3):
        w, b = p[f"ax{i}.w"], p[f"ax{i}.b"]
        b.data[...] = 0
        z = _conv(p, f"ax{i}", h).data.astype(np.float64)
        if i in rescale:
            scale = z.std(axis=(0, 2, 3))
        elif i == 0 and first_norm:
            norms = np.sqrt((w.data.astype(np.float64) ** 2).sum(axis=(1, 2, 3)))
            scale = norms / first_norm
        else:
            scale = np.ones(z.shape[1])
        scale[scale == 0] = 1.0
        if i == 2 and np.sum(z * ad.instance_norm(x).data) < 0:
            scale = -scale
        w.data[...] = (w.data / scale[:, None, None, None]).astype(w.data.dtype)
        z /= scale[None, :, None, None]
        lo = z.min(axis=(0, 2, 3))
        b.data[...] = (np.maximum(-lo, 0.0) + margin).astype(b.data.dtype)
        h = ad.instance_norm(ad.leaky_relu(_conv(p, f"ax{i}", h), SLOPE))
    return adaptors


def adaptor_step_scale(adaptors):
    """Per-parameter step multipliers for the adaptation optimizer.

    A 3x3 first layer starts from the 1x1 draw at its centre tap. Adam moves
    every tap by about the same amount, so the eight zero-initialized outer
    taps would together change the filter response eight times faster than
    the centre. They get 1/9 of the step each; the centre moves exactly as
    in the 1x1 variant.
    """
    scale = {}
    if adaptors.first_kernel == 3:
        m = np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=np.float32)
        m[..., 1, 1] = 1.0
        scale["ax0.w"] = m
    return scale


def adaptor_feature_apply(wmat, f):
    if f.shape[1] != WIDTH or wmat.shape != (WIDTH, WIDTH):
        raise ValueError(f"feature adaptor needs {WIDTH}x{WIDTH} weights and {WIDTH}-channel features")
    return ad.channel_matmul(wmat, f)


# ------------------------------------------------------------------ state dicts

def _check_state(expected, entries, what):
    missing = sorted(set(expected) - set(entries))
    if missing:
        raise ArchitectureError(f"{what}: missing tensor {missing[0]!r}")
    extra = sorted(set(entries) - set(expected))
    if extra:
        raise ArchitectureError(f"{what}: unexpected tensor {extra[0]!r}")
    for name, ref in expected.items():
        got = entries[name]
        if tuple(got.shape) != tuple(ref.shape):
            raise ArchitectureError(
                f"{what}: shape conflict for {name!r}: checkpoint {tuple(got.shape)} vs model {tuple(ref.shape)}")


def task_state(weights):
    state = {f"task.{k}": v.data for k, v in weights.params.items()}
    state["task.meta.kind"] = np.asarray(TASK_KINDS.index(weights.kind), dtype=np.float32)
    state["task.meta.n_out"] = np.asarray(weights.n_out, dtype=np.float32)
    return state


def load_task(entries, kind=None, n_out=None):
    """Rebuild TaskWeights from ``task.*`` entries; ``kind``/``n_out`` pin the
    expected architecture."""
    meta_kind = TASK_KINDS[int(entries["task.meta.kind"])]
    meta_out = int(entries["task.meta.n_out"])
    kind = kind or meta_kind
    n_out = n_out or meta_out
    ref = init_task(kind, n_out)
    got = {k[len("task."):]: v for k, v in entries.items()
           if k.startswith("task.") and not k.startswith("task.meta.")}
    _check_state({k: v.data for k, v in ref.params.items()}, got, "task network")
    return TaskWeights(kind, n_out, {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in got.items()})


def ae_state(bank):
    state = {f"ae.{k}": v.data for k, v in bank.params.items()}
    state["ae.meta.y_channels"] = np.asarray(bank.y_channels, dtype=np.float32)
    return state


def load_ae(entries, y_channels=None):
    y_channels = y_channels or int(entries["ae.meta.y_channels"])
    ref = init_ae_bank(y_channels)
    got = {k[len("ae."):]: v for k, v in entries.items()
           if k.startswith("ae.") and not k.startswith("ae.meta.")}
    _check_state({k: v.data for k, v in ref.params.items()}, got, "auto-encoder bank")
    return AEBank(y_channels, {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in got.items()})


def adaptor_state(adaptors):
    state = {f"adaptor.{k}": v.data for k, v in adaptors.params.items()}
    state["adaptor.meta.first_kernel"] = np.asarray(adaptors.first_kernel, dtype=np.float32)
    return state


def load_adaptors(entries):
    first_kernel = int(entries["adaptor.meta.first_kernel"])
    ref = init_adaptors(0, first_kernel)
    got = {k[len("adaptor."):]: v for k, v in entries.items()
           if k.startswith("adaptor.") and not k.startswith("adaptor.meta.")}
    _check_state({k: v.data for k, v in ref.params.items()}, got, "adaptors")
    return AdaptorSet(first_kernel, {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
                                     for k, v in got.items()})

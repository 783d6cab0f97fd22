"""Compact three-layer convolutional EEG decoder.

Layers, applied to a time-major segment of shape (T, C):

1. spatial: ``f1`` filters spanning all C channels (a (1, C) kernel), ELU
2. temporal: kernel of ``temporal_kernel`` samples over the ``f1`` maps,
   ``f2`` outputs, zero 'same' padding, ELU
3. pointwise: 1x1 mixing ``f2 -> f3``, ELU
4. mean over time, affine map to ``n_classes`` logits

The flat parameter vector is the concatenation, in this order, of::

    spatial_w  (C, f1)        spatial_b  (f1,)
    temporal_w (K, f1, f2)    temporal_b (f2,)
    pointwise_w (f2, f3)      pointwise_b (f3,)
    head_w     (f3, n)        head_b     (n,)

each flattened row-major.  A flat vector with a leading batch axis (B, P)
gives every example in a batch its own weights.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod, sqrt
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .seeding import stream

CHECKPOINT_MAGIC = b"DRDMDL1\x00"
_ARCH_FIELDS = ("n_channels", "window", "n_classes", "f1", "f2", "f3", "temporal_kernel")


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN/Inf; ``layer`` names the first bad layer."""

    def __init__(self, layer: str, detail: str = ""):
        self.layer = layer
        super().__init__(f"non-finite values at layer {layer!r}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class DecoderArch:
    n_channels: int
    window: int
    n_classes: int
    f1: int = 8
    f2: int = 16
    f3: int = 16
    temporal_kernel: int = 32

    def __post_init__(self):
        for name in _ARCH_FIELDS:
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"DecoderArch.{name} must be a positive integer, got {v!r}")
        if self.temporal_kernel > self.window:
            raise ValueError(f"temporal_kernel {self.temporal_kernel} exceeds window {self.window}")

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        C, K, n = self.n_channels, self.temporal_kernel, self.n_classes
        return [
            ("spatial_w", (C, self.f1)),
            ("spatial_b", (self.f1,)),
            ("temporal_w", (K, self.f1, self.f2)),
            ("temporal_b", (self.f2,)),
            ("pointwise_w", (self.f2, self.f3)),
            ("pointwise_b", (self.f3,)),
            ("head_w", (self.f3, n)),
            ("head_b", (n,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(prod(s) for _, s in self.layout())

    def fans(self) -> dict[str, tuple[int, int]]:
        """(fan_in, fan_out) per weight; conv fans count the kernel's receptive field."""
        K = self.temporal_kernel
        return {
            "spatial_w": (self.n_channels, self.f1),
            "temporal_w": (K * self.f1, K * self.f2),
            "pointwise_w": (self.f2, self.f3),
            "head_w": (self.f3, self.n_classes),
        }


@dataclass(frozen=True, eq=False)
class DecoderParams:
    arch: DecoderArch
    flat: np.ndarray

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64)
        if flat.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got shape {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters contain NaN or Inf")
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)

    def unpack(self) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.arch.layout():
            n = prod(shape)
            out[name] = self.flat[off:off + n].reshape(shape)
            off += n
        return out


@dataclass(frozen=True, eq=False)
class LabeledExample:
    segment: np.ndarray
    label: int
    subject: int = 0


def init_params(arch: DecoderArch, seed: int) -> DecoderParams:
    """Glorot-uniform weights, zero biases."""
    rng = stream(seed, "init")
    fans = arch.fans()
    parts = []
    for name, shape in arch.layout():
        if name in fans:
            fan_in, fan_out = fans[name]
            limit = sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-limit, limit, prod(shape)))
        else:
            parts.append(np.zeros(prod(shape)))
    return DecoderParams(arch, np.concatenate(parts))


def _build(arch: DecoderArch, theta: ad.Var, x: ad.Var):
    if x.shape[-2:] != (arch.window, arch.n_channels):
        raise ad.ShapeError("decoder", x.shape, (arch.window, arch.n_channels),
                            detail="segment must be (T, C) time-major")
    if theta.shape[-1] != arch.n_params:
        raise ad.ShapeError("decoder", theta.shape, (arch.n_params,), detail="parameter count")
    lead = theta.shape[:-1]
    if lead and x.shape[:-2] != lead:
        raise ad.ShapeError("decoder", theta.shape, x.shape, detail="per-example parameters need a matching batch")

    p, off = {}, 0
    for name, shape in arch.layout():
        n = prod(shape)
        if name.endswith("_b"):
            shape = (1,) + shape
        p[name] = ad.reshape(ad.take(theta, off, off + n), lead + shape)
        off += n

    layers = {}
    h = ad.elu(ad.add(ad.matmul(x, p["spatial_w"]), p["spatial_b"]))
    layers["spatial"] = h
    h = ad.elu(ad.add(ad.conv_time(h, p["temporal_w"]), p["temporal_b"]))
    layers["temporal"] = h
    h = ad.elu(ad.add(ad.matmul(h, p["pointwise_w"]), p["pointwise_b"]))
    layers["pointwise"] = h
    pooled = ad.mean(h, axis=-2)
    layers["pool"] = pooled
    pooled = ad.reshape(pooled, pooled.shape[:-1] + (1, arch.f3))
    z = ad.add(ad.matmul(pooled, p["head_w"]), p["head_b"])
    logits = ad.reshape(z, z.shape[:-2] + (arch.n_classes,))
    layers["logits"] = logits
    return logits, layers


def _first_bad_layer(layers) -> str:
    for name, var in layers.items():
        if not np.all(np.isfinite(var.value)):
            return name
    return "loss"


def _split(params):
    if isinstance(params, DecoderParams):
        return params.arch, params.flat
    arch, flat = params
    return arch, np.asarray(flat, dtype=np.float64)


def forward(params, segment) -> np.ndarray:
    """Logits for one segment (T, C) or a batch (B, T, C)."""
    arch, flat = _split(params)
    tape = ad.Tape()
    logits, layers = _build(arch, tape.constant(flat), tape.constant(segment))
    if not np.all(np.isfinite(logits.value)):
        raise NonFiniteError(_first_bad_layer(layers))
    return logits.value.copy()


def batch_loss_grads(arch: DecoderArch, theta, x, y, wrt: str = "both"):
    """Cross-entropy per example plus gradients of the *summed* loss.

    ``wrt`` is one of ``"both"``, ``"theta"``, ``"x"``, ``"none"``; gradients
    that are not requested come back as None and cost nothing.  With a (B, P)
    ``theta`` the parameter gradient is per example.
    """
    if wrt not in ("both", "theta", "x", "none"):
        raise ValueError(f"bad wrt {wrt!r}")
    tape = ad.Tape()
    tv = tape.param(theta) if wrt in ("both", "theta") else tape.constant(theta)
    xv = tape.input(x) if wrt in ("both", "x") else tape.constant(x)
    logits, layers = _build(arch, tv, xv)
    losses = ad.nll(ad.log_softmax(logits), y)
    if not np.all(np.isfinite(losses.value)):
        raise NonFiniteError(_first_bad_layer(layers))
    lv = losses.value.copy()
    if wrt == "none":
        return lv, None, None
    g = ad.backward(tape, ad.sum(losses))
    g_theta = g.params[0] if g.params else None
    g_x = g.inputs[0] if g.inputs else None
    return lv, g_theta, g_x


def loss_with_grads(params: DecoderParams, example: LabeledExample):
    """(loss, grad wrt parameters, grad wrt segment) for a single example."""
    loss, g_theta, g_x = batch_loss_grads(params.arch, params.flat, example.segment,
                                          np.asarray(example.label), wrt="both")
    return float(loss), g_theta, g_x


class DecoderObjective:
    """Loss oracle ``(theta, x, y, wrt) -> (losses, grad_theta, grad_x)`` used by evolve/trainer."""

    def __init__(self, arch: DecoderArch):
        self.arch = arch

    def __call__(self, theta, x, y, wrt: str = "both"):
        return batch_loss_grads(self.arch, theta, x, y, wrt)


class Decoder:
    """Fixed-parameter classifier view used by the robustness evaluators."""

    def __init__(self, params: DecoderParams):
        self.params = params
        self.arch = params.arch
        self.n_classes = params.arch.n_classes

    def logits(self, x) -> np.ndarray:
        return forward(self.params, x)

    def loss_input_grad(self, x, y):
        losses, _, g_x = batch_loss_grads(self.arch, self.params.flat, x, y, wrt="x")
        return losses, g_x

    def logit_input_grad(self, x, coeffs):
        """Logits and the input gradient of ``sum(coeffs * logits)``."""
        tape = ad.Tape()
        logits, layers = _build(self.arch, tape.constant(self.params.flat), tape.input(x))
        if not np.all(np.isfinite(logits.value)):
            raise NonFiniteError(_first_bad_layer(layers))
        out = ad.sum(ad.mul(logits, tape.constant(coeffs)))
        g = ad.backward(tape, out)
        return logits.value.copy(), g.inputs[0]


def save_params(params: DecoderParams, path) -> None:
    arch = params.arch
    header = CHECKPOINT_MAGIC + struct.pack("<7I", *(getattr(arch, f) for f in _ARCH_FIELDS))
    Path(path).write_bytes(header + params.flat.astype("<f8").tobytes())


def load_params(path) -> DecoderParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0")
    if len(raw) < 8 + 28:
        raise ValueError(f"{path}: truncated header, expected 36 bytes, got {len(raw)}")
    fields = struct.unpack_from("<7I", raw, 8)
    arch = DecoderArch(**dict(zip(_ARCH_FIELDS, fields)))
    expected = 36 + 8 * arch.n_params
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8", offset=36).astype(np.float64)
    return DecoderParams(arch, flat)

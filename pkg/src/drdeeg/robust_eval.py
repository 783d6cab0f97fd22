"""Robustness measurement: corruption suite, PGD (l-inf) and Carlini-Wagner (l2) attacks.

Models are anything exposing ``logits(x)``, ``loss_input_grad(x, y)`` and
``logit_input_grad(x, coeffs)`` (see :class:`drdeeg.decoder.Decoder`);
:class:`~drdeeg.decoder.DecoderParams` are wrapped automatically.  All
functions work on batches (B, T, C); per-example randomness comes from
``stream(seed, <component>, ..., i)`` so results do not depend on batching.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .decoder import Decoder, DecoderParams
from .seeding import stream

EVAL_BATCH = 256


def as_model(model):
    return Decoder(model) if isinstance(model, DecoderParams) else model


def _xy(data):
    if isinstance(data, tuple):
        x, y = data
    else:
        x, y = data.x, data.y
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def predict(model, x) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index (``np.argmax`` semantics)."""
    model = as_model(model)
    out = [np.argmax(model.logits(x[i:i + EVAL_BATCH]), axis=1) for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(out)


def accuracy(model, data) -> float:
    x, y = _xy(data)
    if len(x) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, x) == y))


# -- corruptions ------------------------------------------------------------

CORRUPTIONS = ("gauss_noise", "channel_drop", "channel_shuffle", "time_mask", "time_shift", "amp_scale")


@dataclass(frozen=True)
class CorruptionKind:
    name: str
    param: float | None = None

    def __post_init__(self):
        p = self.param
        if self.name not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.name!r}; expected one of {CORRUPTIONS}")
        if self.name == "channel_shuffle":
            if p is not None:
                raise ValueError("channel_shuffle takes no parameter")
            return
        if p is None or not np.isfinite(p):
            raise ValueError(f"{self.name} needs a finite parameter")
        if self.name == "gauss_noise" and not p > 0:
            raise ValueError(f"gauss_noise sigma must be > 0, got {p}")
        if self.name in ("channel_drop", "time_mask") and not 0 < p < 1:
            raise ValueError(f"{self.name} parameter must lie in (0, 1), got {p}")
        if self.name == "time_shift" and int(p) != p:
            raise ValueError(f"time_shift needs an integer sample count, got {p}")

    @property
    def label(self) -> str:
        return self.name if self.param is None else f"{self.name}({self.param:g})"


DEFAULT_SUITE = (
    CorruptionKind("gauss_noise", 0.1),
    CorruptionKind("gauss_noise", 0.2),
    CorruptionKind("channel_drop", 0.2),
    CorruptionKind("channel_shuffle"),
    CorruptionKind("time_mask", 0.1),
    CorruptionKind("time_shift", 20),
    CorruptionKind("time_shift", -20),
    CorruptionKind("amp_scale", 0.8),
    CorruptionKind("amp_scale", 1.2),
)


def corrupt(segment, kind: CorruptionKind, rng: np.random.Generator) -> np.ndarray:
    x = np.array(segment, dtype=np.float64)
    t, c = x.shape
    name, p = kind.name, kind.param
    if name == "gauss_noise":
        return x + p * rng.standard_normal(x.shape)
    if name == "channel_drop":
        drop = rng.uniform(size=c) < p
        if drop.all():
            drop[rng.integers(c)] = False
        x[:, drop] = 0.0
        return x
    if name == "channel_shuffle":
        return x[:, rng.permutation(c)]
    if name == "time_mask":
        width = max(1, int(round(p * t)))
        start = int(rng.integers(0, t - width + 1))
        x[start:start + width] = 0.0
        return x
    if name == "time_shift":
        if abs(p) >= t:
            raise ValueError(f"time_shift {p} must be shorter than the segment ({t})")
        return np.roll(x, int(p), axis=0)
    return x * p  # amp_scale


@dataclass
class CorruptionResult:
    errors: dict[str, float]
    mean: float


def corruption_error(model, data, suite=DEFAULT_SUITE, seed: int = 0) -> CorruptionResult:
    """Error (1 - accuracy) on freshly corrupted copies for every kind, plus their mean."""
    x, y = _xy(data)
    if len(x) == 0 or len(suite) == 0:
        raise ValueError("need a non-empty dataset and suite")
    errors = {}
    for k, kind in enumerate(suite):
        xc = np.stack([corrupt(x[i], kind, stream(seed, "corrupt", k, i)) for i in range(len(x))])
        errors[kind.label] = 1.0 - accuracy(model, (xc, y))
    return CorruptionResult(errors, float(sum(errors.values()) / len(errors)))


# -- attacks ----------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    eps: float = 0.02
    pgd_steps: int = 40
    pgd_step_size: float | None = None  # None means eps / 10
    random_start: bool = True
    cw_c: float = 1.0
    cw_steps: int = 200
    cw_lr: float = 0.01
    cw_kappa: float = 0.0
    cw_box: float = 5.0
    cw_max_halvings: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("pgd", "cw"):
            raise ValueError(f"attack kind must be 'pgd' or 'cw', got {self.kind!r}")
        if not self.eps >= 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        for name in ("pgd_steps", "cw_steps"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be an integer >= 1")
        if not self.cw_c >= 0 or not self.cw_lr > 0 or not self.cw_kappa >= 0 or not self.cw_box > 0:
            raise ValueError("need cw_c >= 0, cw_lr > 0, cw_kappa >= 0, cw_box > 0")

    @property
    def step_size(self) -> float:
        return self.eps / 10 if self.pgd_step_size is None else self.pgd_step_size


def project_linf(x, x0, eps: float) -> np.ndarray:
    """Clip into the l-inf ball, then nudge until ``|x - x0| <= eps`` holds in floating point."""
    x = np.clip(x, x0 - eps, x0 + eps)
    bad = np.abs(x - x0) > eps
    while bad.any():
        x[bad] = np.nextafter(x[bad], x0[bad])
        bad = np.abs(x - x0) > eps
    return x


def pgd_attack(model, x0, y, cfg: AttackConfig, indices=None) -> np.ndarray:
    """Sign-gradient ascent on the loss inside the l-inf ball of radius ``cfg.eps``.

    ``indices`` name the examples (default ``0..B-1``) for the random-start streams.
    """
    model = as_model(model)
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    if cfg.eps == 0:
        return x0.copy()
    indices = range(len(x0)) if indices is None else indices
    x = x0.copy()
    if cfg.random_start:
        noise = np.stack([stream(cfg.seed, "pgd", int(i)).uniform(-cfg.eps, cfg.eps, x0.shape[1:])
                          for i in indices])
        x = project_linf(x0 + noise, x0, cfg.eps)
    for _ in range(cfg.pgd_steps):
        _, g = model.loss_input_grad(x, y)
        x = project_linf(x + cfg.step_size * np.sign(g), x0, cfg.eps)
    return x


def _cw_margin(logits, y, kappa):
    """Per-row max(z_y - max_{i != y} z_i, -kappa) and the runner-up class."""
    rows = np.arange(len(y))
    others = logits.copy()
    others[rows, y] = -np.inf
    runner = np.argmax(others, axis=1)
    return np.maximum(logits[rows, y] - logits[rows, runner], -kappa), runner


def _cw_objective(model, x0, delta, y, cfg):
    margin, _ = _cw_margin(model.logits(x0 + delta), y, cfg.cw_kappa)
    return np.sum(delta.reshape(len(delta), -1) ** 2, axis=1) + cfg.cw_c * margin


def _cw_objective_grad(model, x0, delta, y, cfg):
    n_classes = model.n_classes
    logits = model.logits(x0 + delta)
    margin, runner = _cw_margin(logits, y, cfg.cw_kappa)
    rows = np.arange(len(y))
    active = (logits[rows, y] - logits[rows, runner]) > -cfg.cw_kappa
    coeffs = np.zeros((len(y), n_classes))
    coeffs[rows[active], y[active]] = cfg.cw_c
    coeffs[rows[active], runner[active]] -= cfg.cw_c
    _, g_margin = model.logit_input_grad(x0 + delta, coeffs)
    obj = np.sum(delta.reshape(len(delta), -1) ** 2, axis=1) + cfg.cw_c * margin
    return obj, 2.0 * delta + g_margin


@dataclass(eq=False)
class CWResult:
    x_adv: np.ndarray
    trace: np.ndarray  # (steps + 1, B) objective values, non-increasing per row


def cw_attack(model, x0, y, cfg: AttackConfig) -> CWResult:
    """Minimize |delta|^2 + c * max(z_y - max_{i!=y} z_i, -kappa) by gradient descent.

    Each iteration tries ``delta - lr * grad`` with ``lr`` starting at
    ``cfg.cw_lr`` and halves it until the objective does not increase (rows
    that never improve keep their delta).  ``x0 + delta`` is clipped to
    ``[-cw_box, cw_box]``.
    """
    model = as_model(model)
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    delta = np.clip(x0, -cfg.cw_box, cfg.cw_box) - x0
    obj, grad = _cw_objective_grad(model, x0, delta, y, cfg)
    trace = [obj.copy()]
    for _ in range(cfg.cw_steps):
        lr = np.full(len(x0), cfg.cw_lr)
        pending = np.arange(len(x0))
        for _ in range(cfg.cw_max_halvings):
            shape = (-1,) + (1,) * (x0.ndim - 1)
            cand = np.clip(x0[pending] + delta[pending] - lr[pending].reshape(shape) * grad[pending],
                           -cfg.cw_box, cfg.cw_box) - x0[pending]
            cand_obj = _cw_objective(model, x0[pending], cand, y[pending], cfg)
            ok = cand_obj <= obj[pending]
            delta[pending[ok]] = cand[ok]
            lr[pending[~ok]] /= 2
            pending = pending[~ok]
            if pending.size == 0:
                break
        obj, grad = _cw_objective_grad(model, x0, delta, y, cfg)
        trace.append(obj.copy())
    return CWResult(x0 + delta, np.stack(trace))


def attack_accuracy(model, data, cfg: AttackConfig, batch: int = 64) -> float:
    """Accuracy on adversarial copies of every example in ``data``."""
    x, y = _xy(data)
    if len(x) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for lo in range(0, len(x), batch):
        xb, yb = x[lo:lo + batch], y[lo:lo + batch]
        if cfg.kind == "pgd":
            adv = pgd_attack(model, xb, yb, cfg, indices=range(lo, lo + len(xb)))
        else:
            adv = cw_attack(model, xb, yb, cfg).x_adv
        correct += int(np.sum(predict(model, adv) == yb))
    return correct / len(x)


# -- reporting --------------------------------------------------------------

ROW_COLUMNS = ("method", "kind", "param", "value", "seed")


@dataclass
class EvalReport:
    method: str
    seed: int
    clean_acc: float
    corruption: dict[str, float] = field(default_factory=dict)
    corruption_mean: float | None = None
    attacks: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def rows(self) -> list[tuple]:
        out = [(self.method, "clean", "", self.clean_acc, self.seed)]
        for label, err in self.corruption.items():
            name, _, param = label.partition("(")
            out.append((self.method, f"corruption:{name}", param.rstrip(")"), err, self.seed))
        if self.corruption_mean is not None:
            out.append((self.method, "corruption:mean", "", self.corruption_mean, self.seed))
        for label, acc in self.attacks.items():
            name, _, param = label.partition("(")
            out.append((self.method, f"attack:{name}", param.rstrip(")"), acc, self.seed))
        return out


def append_rows(path, rows) -> None:
    """Append CSV rows, writing the header first if the file is new or empty."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(ROW_COLUMNS)
        for method, kind, param, value, seed in rows:
            w.writerow([method, kind, param, repr(float(value)), seed])

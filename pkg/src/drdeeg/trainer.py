"""Outer minimization: plain SGD on clean plus evolved (or augmented) segments.

Methods
    base           step on mean L(x)
    drd-ld/drd-hmc evolve every x to x' (Langevin / underdamped), step on mean L(x) + mean L(x')
    ft-surrogate, bandstop, freq-shift
                   step on mean L(x) + mean L(aug(x)), each row augmented with prob ``aug_prob``
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AUG_METHODS, augment_batch
from .data import SegmentDataset
from .decoder import DecoderArch, DecoderObjective, DecoderParams, NonFiniteError, init_params
from .evolve import EvolutionConfig, EvolutionError, evolve_batch
from .robust_eval import accuracy
from .seeding import stream, streams

METHODS = ("base", "drd-ld", "drd-hmc") + AUG_METHODS


class TrainingError(FloatingPointError):
    def __init__(self, detail: str, epoch: int | None = None, batch: int | None = None):
        self.epoch, self.batch = epoch, batch
        where = "" if epoch is None else f"epoch {epoch} batch {batch}: "
        super().__init__(where + detail)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    method: str = "base"
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    fraction: float = 1.0
    seed: int = 0
    aug_prob: float = 0.5

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be an integer >= 1, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if not 0 <= self.aug_prob <= 1:
            raise ValueError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")

    def evolution_for_method(self) -> EvolutionConfig:
        """The evolution config with dynamics set by the method name."""
        return replace(self.evolution, dynamics=self.method.removeprefix("drd-"))


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    holdout_acc: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)


@dataclass(frozen=True, eq=False)
class StepResult:
    theta: np.ndarray
    loss: float
    x_extra: np.ndarray | None  # evolved or augmented batch, None for base


def train_step(objective, theta, x, y, cfg: TrainConfig, rngs=None, fs: float = 250.0) -> StepResult:
    """One SGD step ``theta - eta * grad`` on the method's batch loss.

    ``rngs`` holds one generator per row (evolution noise or augmentation
    draws); it is ignored by ``base``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("empty batch")
    if rngs is None:
        rngs = streams(cfg.seed, "step", indices=range(n))

    extra = None
    if cfg.method.startswith("drd-"):
        extra = evolve_batch(objective, theta, x, y, cfg.evolution_for_method(), rngs).x_prime
    elif cfg.method in AUG_METHODS:
        extra = augment_batch(cfg.method, x, rngs, fs, cfg.aug_prob)

    xs, ys = (x, y) if extra is None else (np.concatenate([x, extra]), np.concatenate([y, y]))
    losses, g_theta, _ = objective(theta, xs, ys, wrt="theta")
    # mean over the batch of each term, summed over terms
    loss = float(np.sum(losses) / n)
    grad = g_theta / n
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise TrainingError(f"non-finite loss {loss} or gradient")
    return StepResult(theta - cfg.eta * grad, loss, extra)


def loso_split(dataset: SegmentDataset, test_subject: int):
    subjects = np.unique(dataset.subjects)
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    if test_subject not in subjects:
        raise ValueError(f"unknown subject {test_subject}; present: {subjects.tolist()}")
    held = dataset.subjects == test_subject
    return dataset.subset(np.flatnonzero(~held)), dataset.subset(np.flatnonzero(held))


def stratified_subsample(y, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices keeping round(fraction * n_k) examples of every class k."""
    y = np.asarray(y)
    keep = []
    for k in np.unique(y):
        idx = np.flatnonzero(y == k)
        m = int(math.floor(fraction * len(idx) + 0.5))
        keep.append(rng.permutation(idx)[:m])
    out = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=np.int64)
    if out.size == 0:
        raise ValueError(f"no training examples left after subsampling to fraction {fraction}")
    return out


def train(dataset: SegmentDataset, arch: DecoderArch, cfg: TrainConfig,
          holdout: SegmentDataset | None = None, objective=None,
          init: DecoderParams | None = None):
    """Run ``cfg.epochs`` epochs of seeded mini-batch SGD; returns (params, history)."""
    objective = DecoderObjective(arch) if objective is None else objective
    theta = (init_params(arch, cfg.seed) if init is None else init).flat.copy()
    if cfg.fraction < 1:
        dataset = dataset.subset(stratified_subsample(dataset.y, cfg.fraction,
                                                      stream(cfg.seed, "subsample")))
    if len(dataset) == 0:
        raise ValueError("empty training set")
    history = TrainHistory()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            rngs = streams(cfg.seed, "batch", epoch, b, indices=range(len(idx)))
            try:
                step = train_step(objective, theta, dataset.x[idx], dataset.y[idx], cfg, rngs, dataset.fs)
            except (NonFiniteError, EvolutionError, TrainingError) as err:
                raise TrainingError(str(err), epoch, b) from err
            theta = step.theta
            total += step.loss * len(idx)
        params = DecoderParams(arch, theta)
        history.train_loss.append(total / n)
        history.holdout_acc.append(accuracy(params, holdout) if holdout is not None and len(holdout) else math.nan)
        history.seconds.append(time.perf_counter() - start)
    return DecoderParams(arch, theta), history


HISTORY_COLUMNS = ("epoch", "train_loss", "holdout_acc")


def write_history(history: TrainHistory, path, with_seconds: bool = False) -> None:
    """CSV with one row per epoch; ``seconds`` is optional because it is not reproducible."""
    cols = HISTORY_COLUMNS + (("seconds",) if with_seconds else ())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in range(len(history)):
            row = [e + 1, repr(history.train_loss[e]), repr(history.holdout_acc[e])]
            if with_seconds:
                row.append(f"{history.seconds[e]:.6f}")
            w.writerow(row)


def read_history(path) -> TrainHistory:
    h = TrainHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            h.train_loss.append(float(row["train_loss"]))
            h.holdout_acc.append(float(row["holdout_acc"]))
            h.seconds.append(float(row.get("seconds") or "nan"))
    return h

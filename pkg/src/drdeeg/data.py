"""Synthetic EEG-like recordings, segmentation, normalization and the EEGSEG1 file format.

EEGSEG1 layout (all little-endian)::

    bytes 0..7    b"EEGSEG1\\0"
    u32 n_segments, u32 T, u32 C, u32 n_classes, f64 fs        (header, 32 bytes)
    per segment:  u16 subject, u16 label, T*C f32 time-major   (4 + 4*T*C bytes)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .decoder import LabeledExample
from .seeding import stream

MAGIC = b"EEGSEG1\x00"
_HEADER = struct.Struct("<4Id")
HEADER_BYTES = len(MAGIC) + _HEADER.size
STD_FLOOR = 1e-8

BCI_TRIAL_LEN = 750     # 3 s at 250 Hz
SEED_TRIAL_LEN = 47_900  # shortest trial giving 472 windows of 800 at stride 100


class FormatError(ValueError):
    def __init__(self, path, offset: int, detail: str):
        self.offset = offset
        super().__init__(f"{path}: {detail} (byte offset {offset})")


@dataclass(frozen=True)
class RawRecording:
    subject: int
    trials: list  # [(samples (L, C), label)]
    fs: float

    def __post_init__(self):
        if not self.trials:
            raise ValueError("recording has no trials")
        c = self.trials[0][0].shape[1]
        for samples, _ in self.trials:
            if samples.ndim != 2 or samples.shape[1] != c:
                raise ValueError("all trials must be (L, C) with the same channel count")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class SegmentDataset:
    """Segments stored as arrays: ``x`` (N, T, C), ``y`` (N,), ``subjects`` (N,)."""

    x: np.ndarray
    y: np.ndarray
    subjects: np.ndarray
    n_classes: int
    fs: float
    stats: NormStats | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError(f"segments must be (N, T, C), got {x.shape}")
        y = np.asarray(self.y, dtype=np.int64)
        subjects = np.asarray(self.subjects, dtype=np.int64)
        if y.shape != (len(x),) or subjects.shape != (len(x),):
            raise ValueError("labels and subjects need one entry per segment")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "subjects", subjects)

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i) -> LabeledExample:
        return LabeledExample(self.x[i], int(self.y[i]), int(self.subjects[i]))

    @property
    def window(self) -> int:
        return self.x.shape[1]

    @property
    def n_channels(self) -> int:
        return self.x.shape[2]

    @property
    def examples(self) -> list[LabeledExample]:
        return [self[i] for i in range(len(self))]

    def subset(self, index) -> "SegmentDataset":
        index = np.asarray(index)
        return replace(self, x=self.x[index], y=self.y[index], subjects=self.subjects[index])


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 6
    trials_per_subject: int = 60
    n_classes: int = 4
    window: int = 400
    n_channels: int = 8
    fs: float = 250.0
    snr: float = 1.0
    n_sources: int = 3
    trial_len: int = 600
    stride: int = 50
    freqs: tuple[float, ...] | None = None  # default 6 + 4k Hz
    harmonic_gain: float = 0.5
    mixing_seed: int | None = None  # defaults to the generation seed

    def __post_init__(self):
        for name in ("n_subjects", "trials_per_subject", "n_classes", "window",
                     "n_channels", "n_sources", "trial_len", "stride"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.fs > 0:
            raise ValueError(f"fs must be > 0, got {self.fs}")
        if not self.snr > 0:
            raise ValueError(f"snr must be > 0, got {self.snr}")
        if self.window > self.trial_len:
            raise ValueError(f"window {self.window} exceeds trial_len {self.trial_len}")
        freqs = self.class_freqs()
        if len(freqs) != self.n_classes:
            raise ValueError("need one frequency per class")
        if max(freqs) >= self.fs / 2:
            raise ValueError(f"class frequencies must stay below fs/2 = {self.fs / 2}")

    def class_freqs(self) -> tuple[float, ...]:
        if self.freqs is not None:
            return tuple(float(f) for f in self.freqs)
        return tuple(6.0 + 4.0 * k for k in range(self.n_classes))


def gen_synthetic(cfg: SynthConfig, seed: int) -> list[RawRecording]:
    """Class-k trials are mixed sinusoids at f_k and 2 f_k plus white noise at the target SNR."""
    mix_root = seed if cfg.mixing_seed is None else cfg.mixing_seed
    freqs = cfg.class_freqs()
    t = np.arange(cfg.trial_len) / cfg.fs
    recordings = []
    for s in range(cfg.n_subjects):
        mixing = stream(mix_root, "mixing", s).standard_normal((cfg.n_channels, cfg.n_sources))
        trials = []
        for j in range(cfg.trials_per_subject):
            label = j % cfg.n_classes
            rng = stream(seed, "trial", s, j)
            phase = rng.uniform(0, 2 * np.pi, (2, cfg.n_sources))
            f = freqs[label]
            sources = (np.sin(2 * np.pi * f * t[:, None] + phase[0])
                       + cfg.harmonic_gain * np.sin(4 * np.pi * f * t[:, None] + phase[1]))
            signal = sources @ mixing.T
            noise = rng.standard_normal(signal.shape)
            if np.isfinite(cfg.snr):
                signal = signal + np.sqrt(np.mean(signal**2) / cfg.snr) * noise
            trials.append((signal, label))
        recordings.append(RawRecording(s, trials, cfg.fs))
    return recordings


def segment_count(length: int, window: int, stride: int) -> int:
    if window > length:
        raise ValueError(f"window {window} longer than trial ({length} samples)")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return (length - window) // stride + 1


def segment(recording: RawRecording, window: int, stride: int) -> list[LabeledExample]:
    out = []
    for samples, label in recording.trials:
        n = segment_count(len(samples), window, stride)
        for i in range(n):
            start = i * stride
            out.append(LabeledExample(samples[start:start + window], int(label), recording.subject))
    return out


def build_dataset(recordings: list[RawRecording], window: int, stride: int,
                  n_classes: int) -> SegmentDataset:
    examples = [e for rec in recordings for e in segment(rec, window, stride)]
    fs = recordings[0].fs
    if any(rec.fs != fs for rec in recordings):
        raise ValueError("recordings disagree on sample rate")
    return SegmentDataset(
        np.stack([e.segment for e in examples]),
        np.array([e.label for e in examples]),
        np.array([e.subject for e in examples]),
        n_classes, fs)


def synthetic_dataset(cfg: SynthConfig, seed: int) -> SegmentDataset:
    return build_dataset(gen_synthetic(cfg, seed), cfg.window, cfg.stride, cfg.n_classes)


# -- normalization ----------------------------------------------------------

def fit_stats(train: SegmentDataset) -> NormStats:
    if len(train) == 0:
        raise ValueError("cannot compute normalization stats from an empty split")
    if train.stats is not None:
        raise ValueError("dataset is already normalized")
    flat = train.x.reshape(-1, train.n_channels)
    return NormStats(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))


def normalize(dataset: SegmentDataset, stats: NormStats) -> SegmentDataset:
    """Per-channel z-score with precomputed stats; stats are applied exactly once."""
    if dataset.stats is not None:
        raise ValueError("dataset is already normalized")
    x = (dataset.x - stats.mean) / stats.std
    return replace(dataset, x=x, stats=stats)


def normalize_split(train: SegmentDataset, test: SegmentDataset):
    stats = fit_stats(train)
    return normalize(train, stats), normalize(test, stats)


# -- EEGSEG1 ----------------------------------------------------------------

def _record_dtype(t: int, c: int) -> np.dtype:
    return np.dtype([("subject", "<u2"), ("label", "<u2"), ("x", "<f4", (t, c))])


def write_dataset(dataset: SegmentDataset, path) -> None:
    if len(dataset) and (dataset.subjects.max() > 0xFFFF or dataset.subjects.min() < 0):
        raise ValueError("subject ids must fit in u16")
    rec = np.empty(len(dataset), dtype=_record_dtype(dataset.window, dataset.n_channels))
    rec["subject"] = dataset.subjects
    rec["label"] = dataset.y
    rec["x"] = dataset.x
    header = MAGIC + _HEADER.pack(len(dataset), dataset.window, dataset.n_channels,
                                  dataset.n_classes, float(dataset.fs))
    Path(path).write_bytes(header + rec.tobytes())


def read_dataset(path) -> SegmentDataset:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        if raw[:6] == MAGIC[:6]:
            raise FormatError(path, 6, f"unsupported version {raw[6:8]!r}")
        raise FormatError(path, 0, "bad magic")
    if len(raw) < HEADER_BYTES:
        raise FormatError(path, len(raw), f"truncated header: expected {HEADER_BYTES} bytes, got {len(raw)}")
    n, t, c, n_classes, fs = _HEADER.unpack_from(raw, len(MAGIC))
    if t == 0 or c == 0 or n_classes == 0:
        raise FormatError(path, len(MAGIC), f"invalid header dims T={t} C={c} n_classes={n_classes}")
    dtype = _record_dtype(t, c)
    expected = HEADER_BYTES + n * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(path, min(len(raw), expected),
                          f"payload size mismatch: expected {expected} bytes, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=HEADER_BYTES)
    bad = np.flatnonzero(rec["label"] >= n_classes)
    if bad.size:
        raise FormatError(path, HEADER_BYTES + int(bad[0]) * dtype.itemsize + 2,
                          f"label {rec['label'][bad[0]]} out of range for {n_classes} classes")
    return SegmentDataset(rec["x"].astype(np.float64), rec["label"].astype(np.int64),
                          rec["subject"].astype(np.int64), n_classes, fs)

"""Synthetic utterance-classification tasks.

Each class owns a fixed source signature: a random FIR colouring of white noise
plus a harmonic comb. Utterances draw fresh excitation noise, comb phases and a
small pitch jitter, are scaled to unit RMS, then receive additive white noise at
the requested SNR.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accounting import derive_rng
from .tensor import ConfigError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_classes: int = 10
    samples_per_class: int = 100
    wave_length: int = 400
    snr_db: float = 30.0
    seed: int = 0
    fir_taps: int = 16
    n_harmonics: int = 4
    jitter: float = 0.02


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def split_sizes(self) -> tuple[int, int, int]:
        return len(self.y_train), len(self.y_val), len(self.y_test)

    def subset(self, fraction: float) -> "Dataset":
        """Keep a class-balanced prefix of the training split."""
        if not 0 < fraction <= 1:
            raise ConfigError(f"subset fraction must be in (0, 1], got {fraction}")
        if fraction == 1:
            return self
        keep = []
        for c in range(self.n_classes):
            idx = np.flatnonzero(self.y_train == c)
            k = int(math.floor(fraction * len(idx) + 1e-9))
            if k == 0:
                raise ConfigError(f"fraction {fraction} leaves class {c} with no training samples")
            keep.append(idx[:k])
        keep = np.sort(np.concatenate(keep))
        return Dataset(self.spec, self.x_train[keep], self.y_train[keep],
                       self.x_val, self.y_val, self.x_test, self.y_test)


def class_signature(spec: SyntheticTaskSpec, c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(fir, harmonic_freqs_hz, harmonic_amps)`` for class ``c``."""
    rng = derive_rng(spec.seed, f"class-{c}")
    fir = rng.standard_normal(spec.fir_taps) * np.exp(-np.arange(spec.fir_taps) / (spec.fir_taps / 3))
    f0 = rng.uniform(120.0, 900.0)
    freqs = f0 * np.arange(1, spec.n_harmonics + 1)
    amps = rng.uniform(0.3, 1.0, spec.n_harmonics) / np.arange(1, spec.n_harmonics + 1)
    return fir, freqs, amps


def _utterance(spec, sig, rng) -> np.ndarray:
    fir, freqs, amps = sig
    n = spec.wave_length
    coloured = np.convolve(rng.standard_normal(n + len(fir) - 1), fir, mode="valid")
    coloured /= np.sqrt(np.mean(coloured ** 2))
    t = np.arange(n) / SAMPLE_RATE
    scale = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
    phases = rng.uniform(0, 2 * np.pi, len(freqs))
    comb = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * scale * t + phases[:, None])).sum(axis=0)
    comb /= np.sqrt(np.mean(comb ** 2))
    wave = coloured + comb
    wave /= np.sqrt(np.mean(wave ** 2))
    if math.isfinite(spec.snr_db):
        wave = wave + rng.standard_normal(n) * 10.0 ** (-spec.snr_db / 20.0)
    return wave


def gen_synthetic_dataset(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic under ``spec.seed``; 8:1:1 train/val/test split per class."""
    if spec.n_classes < 2:
        raise ConfigError("need at least two classes")
    if spec.samples_per_class < 10:
        raise ConfigError("need at least 10 samples per class for an 8:1:1 split")
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for c in range(spec.n_classes):
        sig = class_signature(spec, c)
        rng = derive_rng(spec.seed, f"utterances-{c}")
        waves = np.stack([_utterance(spec, sig, rng) for _ in range(spec.samples_per_class)])
        order = derive_rng(spec.seed, f"split-{c}").permutation(spec.samples_per_class)
        n_tr = spec.samples_per_class * 8 // 10
        n_va = spec.samples_per_class // 10
        for name, idx in (("train", order[:n_tr]), ("val", order[n_tr:n_tr + n_va]),
                          ("test", order[n_tr + n_va:])):
            parts[name][0].append(waves[idx])
            parts[name][1].append(np.full(len(idx), c))
    arrays = {k: (np.concatenate(x)[:, None, :], np.concatenate(y)) for k, (x, y) in parts.items()}
    return Dataset(spec, *arrays["train"], *arrays["val"], *arrays["test"])

"""Desk-scale evaluation: Frechet distance on fixed random features, flicker, drift."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EIG_TOL = 1e-10


class FeatureEmbedder:
    """tanh of a seeded Gaussian projection of the flattened frame."""

    def __init__(self, input_dim: int, num_features: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.input_dim = input_dim
        self.seed = seed
        self.proj = rng.standard_normal((input_dim, num_features)) / math.sqrt(input_dim)
        self.bias = rng.uniform(-1.0, 1.0, num_features)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        flat = np.asarray(frames, dtype=np.float64).reshape(-1, self.input_dim)
        return np.tanh(flat @ self.proj + self.bias)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise ValueError("need at least two feature rows")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False), len(feats))


def _psd_eigh(m: np.ndarray, what: str):
    m = 0.5 * (m + m.T)
    w, q = np.linalg.eigh(m)
    if w.min() < -EIG_TOL * max(1.0, abs(w).max()):
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), q


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, q = _psd_eigh(m, "matrix")
    return (q * np.sqrt(w)) @ q.T


def frechet(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError("dimension mismatch")
    root_a = sqrtm_psd(a.cov)
    _psd_eigh(b.cov, "second covariance")
    w, _ = _psd_eigh(root_a @ b.cov @ root_a, "covariance product")
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(w).sum())
    return max(d, 0.0)


def frame_error(generated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-frame mean squared error between two equally shaped clips."""
    g = np.asarray(generated, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if g.shape != r.shape:
        raise ValueError(f"clip shapes differ: {g.shape} vs {r.shape}")
    return ((g - r) ** 2).reshape(g.shape[0], -1).mean(axis=1)


def flicker(video: np.ndarray) -> float:
    """Mean over consecutive frame pairs of the mean absolute difference."""
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        raise ValueError("flicker needs at least two frames")
    diffs = np.abs(np.diff(video, axis=0)).reshape(video.shape[0] - 1, -1).mean(axis=1)
    return float(diffs.mean())


@dataclass
class DriftBucket:
    start: int
    stop: int
    value: float
    num_generated: int
    num_reference: int
    valid: bool


def bucket_bounds(horizon: int, window: int) -> list[tuple[int, int]]:
    return [(s, min(s + window, horizon)) for s in range(0, horizon, window)]


def drift_curve(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray], window: int,
                embedder: FeatureEmbedder, num_init: int, min_samples: int = 100) -> list[DriftBucket]:
    """Frechet value per horizon bucket.

    ``generated`` and ``reference`` are sequences of (T, V, H, W) clips whose
    first ``num_init`` frames are the shared init frames. Bucket k pools the
    frames at horizon offsets [k*window, (k+1)*window) from every clip.
    Buckets with fewer than ``min_samples`` rows on either side are marked
    invalid with value NaN.
    """
    gen = [np.asarray(c)[num_init:] for c in generated]
    ref = [np.asarray(c)[num_init:] for c in reference]
    horizon = min(c.shape[0] for c in gen)
    out = []
    for start, stop in bucket_bounds(horizon, window):
        g = np.concatenate([embedder(c[start:stop]) for c in gen])
        r = np.concatenate([embedder(c[start:stop]) for c in ref if c.shape[0] > start])
        ok = len(g) >= min_samples and len(r) >= min_samples
        value = frechet(GaussianStats.from_features(g), GaussianStats.from_features(r)) if ok else float("nan")
        out.append(DriftBucket(start, stop, value, len(g), len(r), ok))
    return out

"""Old-class feature generation and compensation strategies.

Generation turns stored statistics into one feature per requested old label;
compensation then pulls each generated feature toward a feature of the
current (rotated) batch.  All strategy names are the lowercase strings used
in config files and run records.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gaussmem import StatsStore, mgs_sample_many

log = logging.getLogger(__name__)

GENERATION_STRATEGIES = ("prototype", "prototype_mixing", "gaussian_noise_aug", "mgs")
COMPENSATION_STRATEGIES = ("none", "rand_interp", "rand_avg", "least_sim_avg", "sfc")


@dataclass
class StrategyConfig:
    generation: str = "mgs"
    compensation: str = "sfc"
    K: int = 1000
    noise_scale: Optional[float] = None  # None: sqrt of mean stored variance
    interp_low: float = 0.0
    interp_high: float = 1.0

    def __post_init__(self):
        if self.generation not in GENERATION_STRATEGIES:
            raise ValueError(f"unknown generation strategy {self.generation!r}")
        if self.compensation not in COMPENSATION_STRATEGIES:
            raise ValueError(f"unknown compensation strategy {self.compensation!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")

    @property
    def name(self) -> str:
        return f"{self.generation}+{self.compensation}"


@dataclass
class GeneratedBatch:
    features: np.ndarray  # (B, m)
    labels: np.ndarray  # (B,) primary old class ids
    soft_targets: Optional[dict] = None  # prototype_mixing: partner ids and weights


@dataclass
class SynthesisBatch:
    old_features: np.ndarray
    old_labels: np.ndarray
    compensated: np.ndarray
    strategy: str
    matched: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-by-row cosine similarity; pairs involving a zero row score 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero_a, zero_b = na == 0, nb == 0
    if zero_a.any() or zero_b.any():
        log.warning("cosine similarity: %d zero-norm old rows, %d zero-norm new rows",
                    int(zero_a.sum()), int(zero_b.sum()))
    sim = (a @ b.T) / (np.where(zero_a, 1.0, na)[:, None] * np.where(zero_b, 1.0, nb)[None, :])
    sim[zero_a, :] = 0.0
    sim[:, zero_b] = 0.0
    return np.clip(sim, -1.0, 1.0)


def sfc_compensate(old: np.ndarray, new_rotated: np.ndarray, labels=None) -> SynthesisBatch:
    """Average each old feature with its most cosine-similar new feature."""
    sim = cosine_similarity_matrix(old, new_rotated)
    j = np.argmax(sim, axis=1)
    comp = (old + new_rotated[j]) / 2.0
    labels = np.zeros(len(old), dtype=np.int64) if labels is None else np.asarray(labels)
    return SynthesisBatch(old, labels, comp, "sfc", j)


def generate(strategy: StrategyConfig, store: StatsStore, y_old, rng: np.random.Generator) -> GeneratedBatch:
    y_old = np.asarray(y_old, dtype=np.int64)
    for c in np.unique(y_old):
        if int(c) not in store:
            raise KeyError(f"class {int(c)} has no stored statistics")
    means = np.stack([store[c].mean for c in y_old]) if len(y_old) else np.zeros((0, store.feature_dim))
    kind = strategy.generation
    if kind == "prototype":
        return GeneratedBatch(means.copy(), y_old)
    if kind == "gaussian_noise_aug":
        sigma = strategy.noise_scale
        if sigma is None:
            sigma = float(np.sqrt(store.mean_variance()))
        eps = rng.standard_normal(means.shape)
        return GeneratedBatch(means + sigma * eps, y_old)
    if kind == "prototype_mixing":
        classes = np.asarray(store.classes())
        partners = rng.choice(classes, size=len(y_old))
        lam = rng.uniform(0.0, 1.0, size=len(y_old))
        return mix_prototypes(store, y_old, partners, lam)
    # mgs: group rows by class; each class draws its candidate pools in row order
    out = np.empty_like(means)
    for c in np.unique(y_old):
        rows = np.flatnonzero(y_old == c)
        out[rows] = mgs_sample_many(store.sampling_stats(c), len(rows), strategy.K, rng)
    return GeneratedBatch(out, y_old)


def mix_prototypes(store: StatsStore, y_a, y_b, lam) -> GeneratedBatch:
    y_a = np.asarray(y_a, dtype=np.int64)
    y_b = np.asarray(y_b, dtype=np.int64)
    lam = np.asarray(lam, dtype=np.float64)
    mu_a = np.stack([store[c].mean for c in y_a])
    mu_b = np.stack([store[c].mean for c in y_b])
    feats = lam[:, None] * mu_a + (1.0 - lam[:, None]) * mu_b
    return GeneratedBatch(feats, y_a, {"partner": y_b, "weight": lam})


def compensate(strategy: StrategyConfig, old: np.ndarray, new_rotated: np.ndarray,
               rng: np.random.Generator, labels=None) -> SynthesisBatch:
    old = np.asarray(old, dtype=np.float64)
    new_rotated = np.asarray(new_rotated, dtype=np.float64)
    if old.shape[1] != new_rotated.shape[1]:
        raise ValueError("feature dims differ")
    labels = np.zeros(len(old), dtype=np.int64) if labels is None else np.asarray(labels)
    kind = strategy.compensation
    n_new = len(new_rotated)
    if kind == "none":
        return SynthesisBatch(old, labels, old.copy(), kind, np.full(len(old), -1))
    if kind == "sfc":
        batch = sfc_compensate(old, new_rotated, labels)
        return batch
    if kind == "least_sim_avg":
        j = np.argmin(cosine_similarity_matrix(old, new_rotated), axis=1)
        return SynthesisBatch(old, labels, (old + new_rotated[j]) / 2.0, kind, j)
    j = rng.integers(0, n_new, size=len(old))
    if kind == "rand_avg":
        return SynthesisBatch(old, labels, (old + new_rotated[j]) / 2.0, kind, j)
    # rand_interp; beta kept strictly inside (low, high)
    beta = rng.uniform(strategy.interp_low, strategy.interp_high, size=len(old))
    beta = np.clip(beta, np.nextafter(strategy.interp_low, 1.0), np.nextafter(strategy.interp_high, 0.0))
    comp = beta[:, None] * old + (1.0 - beta[:, None]) * new_rotated[j]
    return SynthesisBatch(old, labels, comp, kind, j)

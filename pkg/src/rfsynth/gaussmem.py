"""Stored per-class feature statistics and multivariate Gaussian sampling.

Each learned class keeps the mean and population covariance of its features
(computed once, with the extractor as it stood when the class was learned).
New old-class features are drawn from N(mean, cov + lam*I) by keeping the
most likely of K candidates.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import cholesky, log_det_from_cholesky, solve_lower

STATS_MAGIC = b"RFSSTAT1"
LOG_2PI = float(np.log(2 * np.pi))


class InsufficientSamplesError(ValueError):
    pass


class WriteOnceError(KeyError):
    pass


class ProtocolError(ValueError):
    pass


def regularization(cov: np.ndarray) -> float:
    m = cov.shape[0]
    return max(1e-6, 1e-4 * float(np.trace(cov)) / m)


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray  # Cholesky factor of cov + lam * I
    sample_count: int
    learned_at_task: int
    lam: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def regularized_cov(self) -> np.ndarray:
        return self.cov + self.lam * np.eye(self.dim)

    @classmethod
    def from_moments(cls, class_id: int, mean, cov, sample_count: int, task: int) -> "ClassStats":
        mean = np.array(mean, dtype=np.float64)
        cov = np.array(cov, dtype=np.float64)
        cov = 0.5 * (cov + cov.T)
        lam = regularization(cov)
        chol = cholesky(cov + lam * np.eye(len(mean)))
        for arr in (mean, cov, chol):
            arr.setflags(write=False)
        return cls(int(class_id), mean, cov, chol, int(sample_count), int(task), lam)


def estimate_class_stats(features, class_id: int, task: int) -> ClassStats:
    """Arithmetic mean and divide-by-N covariance of an (N, m) feature block."""
    feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"class {class_id}: need at least 2 samples, got {n}")
    mean = feats.mean(axis=0)
    dev = feats - mean
    cov = dev.T @ dev / n
    return ClassStats.from_moments(class_id, mean, cov, n, task)


def sample_raw(stats: ClassStats, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. rows of mean + L @ eps."""
    eps = rng.standard_normal((count, stats.dim))
    return stats.mean + eps @ stats.chol.T


def squared_mahalanobis(stats: ClassStats, x: np.ndarray) -> np.ndarray:
    """Quadratic form under the regularised covariance for a vector or rows."""
    x = np.asarray(x, dtype=np.float64)
    dev = np.atleast_2d(x) - stats.mean
    z = solve_lower(stats.chol, dev.T)
    q = np.sum(z * z, axis=0)
    return q if x.ndim == 2 else float(q[0])


def log_likelihood(stats: ClassStats, x) -> np.ndarray | float:
    """Multivariate normal log-density; accepts one vector or a block of rows."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("log_likelihood input contains non-finite values")
    q = squared_mahalanobis(stats, x)
    return -0.5 * (stats.dim * LOG_2PI + log_det_from_cholesky(stats.chol) + q)


def mgs_sample(stats: ClassStats, K: int, rng: np.random.Generator, return_candidates: bool = False):
    """Most likely of ``K`` fresh candidates (first index wins ties)."""
    if K < 1:
        raise ValueError("K must be at least 1")
    cands = sample_raw(stats, K, rng)
    ll = log_likelihood(stats, cands)
    best = cands[int(np.argmax(ll))]
    return (best, cands, ll) if return_candidates else best


def mgs_sample_many(stats: ClassStats, count: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent MGS draws.

    Consumes the generator exactly like ``count`` calls of :func:`mgs_sample`.
    A candidate mean + L @ eps has squared Mahalanobis distance |eps|^2 under
    its own distribution, so candidates are ranked on |eps|^2 and only the
    winners are mapped into feature space.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    eps = rng.standard_normal((count, K, stats.dim))
    q = np.einsum("ckm,ckm->ck", eps, eps)
    pick = np.argmin(q, axis=1)
    return stats.mean + eps[np.arange(count), pick] @ stats.chol.T


def select_old_batch(old_classes, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Old-class labels for one batch of generated features.

    Fewer slots than classes: a random subset.  Equal: every class once.
    More: every class once, then further rounds drawn without replacement
    until the batch is full.
    """
    pool = np.asarray(sorted(old_classes), dtype=np.int64)
    if pool.size == 0:
        raise ProtocolError("no old classes to sample from")
    if batch < pool.size:
        return rng.choice(pool, size=batch, replace=False)
    parts = [pool]
    remaining = batch - pool.size
    while remaining > 0:
        take = min(remaining, pool.size)
        parts.append(rng.choice(pool, size=take, replace=False))
        remaining -= take
    return np.concatenate(parts)


class StatsStore:
    """Write-once map class id -> ClassStats."""

    def __init__(self, feature_dim: int, tied: bool = False):
        self.feature_dim = feature_dim
        self.tied = tied
        self._stats: dict[int, ClassStats] = {}
        self._tied_cache: dict[int, ClassStats] = {}

    def __len__(self) -> int:
        return len(self._stats)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._stats

    def __iter__(self) -> Iterator[int]:
        return iter(self._stats)

    def classes(self) -> list[int]:
        return list(self._stats)

    def insert(self, stats: ClassStats) -> None:
        if stats.class_id in self._stats:
            raise WriteOnceError(f"class {stats.class_id} already stored")
        if stats.dim != self.feature_dim:
            raise ValueError(f"feature dim {stats.dim} != store dim {self.feature_dim}")
        self._stats[stats.class_id] = stats
        self._tied_cache.clear()

    def __getitem__(self, class_id) -> ClassStats:
        return self._stats[int(class_id)]

    def sampling_stats(self, class_id) -> ClassStats:
        """Stats used for generation: per-class, or the sample-weighted pooled
        covariance around the class mean when ``tied`` is set."""
        stats = self._stats[int(class_id)]
        if not self.tied:
            return stats
        if stats.class_id not in self._tied_cache:
            total = sum(s.sample_count for s in self._stats.values())
            pooled = sum(s.cov * s.sample_count for s in self._stats.values()) / total
            self._tied_cache[stats.class_id] = ClassStats.from_moments(
                stats.class_id, stats.mean, pooled, stats.sample_count, stats.learned_at_task)
        return self._tied_cache[stats.class_id]

    def mean_variance(self) -> float:
        """Average of the covariance diagonals over all stored classes."""
        return float(np.mean([np.mean(np.diag(s.cov)) for s in self._stats.values()]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for cid in sorted(self._stats):
            s = self._stats[cid]
            h.update(struct.pack("<qqq", cid, s.sample_count, s.learned_at_task))
            h.update(s.mean.tobytes())
            h.update(s.cov.tobytes())
        return h.hexdigest()


def save_stats(path, store: StatsStore, config_hash: str = "") -> None:
    """Header: magic, u32 feature_dim, u32 class count, 64-byte config hash.
    Per class: i64 class_id, i64 N, i64 task, mean (m f8), cov (m*m f8)."""
    m = store.feature_dim
    tag = config_hash.encode()[:64].ljust(64, b"\0")
    with open(path, "wb") as fh:
        fh.write(STATS_MAGIC + struct.pack("<II", m, len(store)) + tag)
        for cid in sorted(store):
            s = store[cid]
            fh.write(struct.pack("<qqq", s.class_id, s.sample_count, s.learned_at_task))
            fh.write(s.mean.astype("<f8").tobytes())
            fh.write(s.cov.astype("<f8").tobytes())


def load_stats(path) -> tuple[StatsStore, str]:
    raw = Path(path).read_bytes()
    if raw[:8] != STATS_MAGIC:
        raise ValueError("not a stats file")
    m, count = struct.unpack_from("<II", raw, 8)
    config_hash = raw[16:80].rstrip(b"\0").decode()
    store = StatsStore(m)
    off = 80
    for _ in range(count):
        cid, n, task = struct.unpack_from("<qqq", raw, off)
        off += 24
        mean = np.frombuffer(raw, "<f8", m, off)
        off += 8 * m
        cov = np.frombuffer(raw, "<f8", m * m, off).reshape(m, m)
        off += 8 * m * m
        store.insert(ClassStats.from_moments(cid, mean, cov, n, task))
    return store, config_hash

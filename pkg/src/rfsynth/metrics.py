"""Accuracy bookkeeping across phases and the three summary metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class ProtocolError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """``counts[t][p] = (correct, total)`` for task p measured after phase t, p <= t."""

    num_tasks: int
    counts: list[list[tuple[int, int]]] = field(default_factory=list)

    def add_phase(self, per_task: list[tuple[int, int]]) -> None:
        t = len(self.counts)
        if t >= self.num_tasks:
            raise ProtocolError("all phases already recorded")
        if len(per_task) != t + 1:
            raise ProtocolError(f"phase {t} needs {t + 1} task entries, got {len(per_task)}")
        self.counts.append([(int(c), int(n)) for c, n in per_task])

    @property
    def complete(self) -> bool:
        return len(self.counts) == self.num_tasks

    def accuracy(self, t: int, p: int) -> float:
        if p > t:
            raise IndexError("accuracy is only defined for p <= t")
        c, n = self.counts[t][p]
        return c / n

    def phase_overall_exact(self, t: int) -> Fraction:
        correct = sum(c for c, _ in self.counts[t])
        total = sum(n for _, n in self.counts[t])
        return Fraction(correct, total)

    @property
    def phase_overall(self) -> list[float]:
        return [float(self.phase_overall_exact(t)) for t in range(len(self.counts))]

    def as_array(self) -> np.ndarray:
        """Dense (T+1, T+1) float matrix with NaN above the diagonal."""
        T = len(self.counts)
        arr = np.full((T, T), np.nan)
        for t in range(T):
            for p in range(t + 1):
                arr[t, p] = self.accuracy(t, p)
        return arr

    @classmethod
    def from_fractions(cls, rows: list[list[float]], total: int = 1000) -> "AccuracyMatrix":
        """Build from accuracy fractions (convenient in tests); each task is
        treated as ``total`` test samples."""
        mat = cls(len(rows))
        for row in rows:
            mat.add_phase([(round(a * total), total) for a in row])
        return mat


def _require_complete(mat: AccuracyMatrix) -> None:
    if not mat.complete:
        raise ProtocolError(f"matrix has {len(mat.counts)} of {mat.num_tasks} phases")


def average_incremental_accuracy(mat: AccuracyMatrix) -> float:
    _require_complete(mat)
    exact = sum(mat.phase_overall_exact(t) for t in range(mat.num_tasks)) / mat.num_tasks
    return float(exact)


def final_accuracy(mat: AccuracyMatrix) -> float:
    _require_complete(mat)
    return float(mat.phase_overall_exact(mat.num_tasks - 1))


def average_forgetting(mat: AccuracyMatrix, include_final: bool = False) -> float:
    """Mean over tasks of (peak accuracy - final accuracy).  The last task is
    left out unless ``include_final`` (its forgetting is zero by construction)."""
    _require_complete(mat)
    T = mat.num_tasks - 1
    if T < 1:
        raise ProtocolError("forgetting needs at least one incremental phase")
    last = T + 1 if include_final else T
    drops = []
    for p in range(last):
        accs = [Fraction(*mat.counts[t][p]) for t in range(p, T + 1)]
        drops.append(max(accs) - accs[-1])
    return float(sum(drops) / len(drops))

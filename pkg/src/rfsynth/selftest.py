"""Fast invariant checks runnable without pytest (``rfsynth selftest``)."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .compensate import StrategyConfig, sfc_compensate
from .engine import TaskContext, TrainConfig, compute_losses, run_incremental
from .gaussmem import StatsStore, estimate_class_stats, log_likelihood, mgs_sample, mgs_sample_many
from .metrics import AccuracyMatrix, average_forgetting, average_incremental_accuracy
from .model import IncrementalModel, expand_unified_head, snapshot
from .numerics import cholesky
from .numerics.gradcheck import check_gradients
from .synthdata import generate_dataset, rotate90, split_tasks


def micro_problem(seed: int = 0, strategy: StrategyConfig | None = None):
    """Task 1 of a 2 + 2 protocol with feature dim 4 and batch 2."""
    rng = np.random.default_rng(seed)
    model = IncrementalModel(in_dim=9, hidden=5, feature_dim=4, seed=seed)
    expand_unified_head(model, [0, 1])
    store = StatsStore(4)
    for c in (0, 1):
        store.insert(estimate_class_stats(model.extract(rng.random((6, 3, 3))).data, c, 0))
    snap = snapshot(model)
    expand_unified_head(model, [2, 3])
    for p in model.parameters():
        p.data += rng.normal(scale=0.05, size=p.shape)
    ctx = TaskContext(1, [2, 3], {0: 0, 1: 1, 2: 2, 3: 3}, [0, 1], snap)
    cfg = TrainConfig(strategy=strategy or StrategyConfig("mgs", "sfc", K=10))
    return model, ctx, store, cfg, rng.random((2, 3, 3)), np.array([3, 2])


def loss_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error of every loss term.

    The two old-class terms see synthetic inputs, so they are checked
    against the unified head only.
    """
    model, ctx, store, cfg, x, y = micro_problem(seed)
    errors = {}
    for name in ("new_cls", "new_aug_cls", "new_ka", "old_cls", "old_feat_kd", "old_logit_kd"):
        def term(name=name):
            return compute_losses(model, ctx, x, y, store, cfg, np.random.default_rng(seed + 1))[2][name]
        params = model.unified.parameters() if name in ("old_cls", "old_logit_kd") else model.parameters()
        errors[name] = check_gradients(term, params)
    return errors


def _check_gradients():
    worst = max(loss_gradient_errors().values())
    return worst < 1e-4, f"worst relative error {worst:.2e}"


def _check_cholesky():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 6))
    spd = a @ a.T + 6 * np.eye(6)
    err = np.max(np.abs(cholesky(spd) @ cholesky(spd).T - spd))
    return err < 1e-12, f"reconstruction error {err:.1e}"


def _check_mgs_paths():
    rng = np.random.default_rng(2)
    stats = estimate_class_stats(rng.normal(size=(40, 4)), 0, 0)
    fast = mgs_sample_many(stats, 5, 50, np.random.default_rng(3))
    ref_rng = np.random.default_rng(3)
    eps = ref_rng.standard_normal((5, 50, 4))
    ref = []
    for block in eps:
        cand = stats.mean + block @ stats.chol.T
        ref.append(cand[np.argmax(log_likelihood(stats, cand))])
    err = np.max(np.abs(fast - np.array(ref)))
    single = mgs_sample(stats, 50, np.random.default_rng(4))
    return err < 1e-10 and single.shape == (4,), f"fast vs reference {err:.1e}"


def _check_sfc():
    rng = np.random.default_rng(5)
    old, new = rng.normal(size=(3, 5)), rng.normal(size=(12, 5))
    out = sfc_compensate(old, new)
    sims = [[a @ b / np.linalg.norm(a) / np.linalg.norm(b) for b in new] for a in old]
    ok = out.matched.tolist() == [int(np.argmax(s)) for s in sims]
    gap = np.max(np.abs(np.linalg.norm(out.compensated - old, axis=1)
                        - np.linalg.norm(out.compensated - new[out.matched], axis=1)))
    return ok and gap < 1e-12, f"midpoint gap {gap:.1e}"


def _check_rotation():
    imgs = np.random.default_rng(6).random((100, 8, 8))
    back = imgs
    for _ in range(4):
        back = rotate90(back, 1)
    return back.tobytes() == imgs.tobytes(), "rotate^4 bit-exact"


def _check_metrics():
    mat = AccuracyMatrix.from_fractions([[0.90], [0.80, 0.85], [0.70, 0.80, 0.95]])
    f = average_forgetting(mat)
    curve = AccuracyMatrix.from_fractions([[0.9], [0.8, 0.8], [0.7, 0.7, 0.7]])
    a = average_incremental_accuracy(curve)
    return f == 0.125 and a == 0.8, f"forgetting {f}, average {a}"


def _check_determinism():
    train, test = generate_dataset(6, 12, 6, seed=0)
    stream = split_tasks(6, 2, 2, 2, 0)
    cfg = TrainConfig(epochs=2, milestones=(1,), batch_size=8, strategy=StrategyConfig("mgs", "sfc", K=20))
    a = run_incremental(train, test, stream, cfg, hidden=8, feature_dim=4)
    b = run_incremental(train, test, stream, cfg, hidden=8, feature_dim=4)
    return a.matrix.counts == b.matrix.counts and a.loss_log == b.loss_log, "two identical runs"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "loss gradients": _check_gradients,
    "cholesky": _check_cholesky,
    "mgs fast path": _check_mgs_paths,
    "sfc matching": _check_sfc,
    "rotation group": _check_rotation,
    "metrics": _check_metrics,
    "determinism": _check_determinism,
}


def run_selftest(emit=print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        emit(f"{'PASS' if ok else 'FAIL'}  {name:16s} {detail} ({time.perf_counter() - start:.2f}s)")
    return all_ok

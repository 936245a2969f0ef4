"""Incremental training loop: per-task optimisation, statistics capture and
evaluation with the extractor plus unified head.

Random draws for one run come from a single generator in a fixed order per
minibatch: data shuffle (once per epoch), old-class selection, generation
(MGS candidates / noise / mixing), then compensation.  Rotation batches are
deterministic and consume nothing.  Parameter initialisation uses its own
stream spawned from the same seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .compensate import StrategyConfig, compensate, generate
from .gaussmem import StatsStore, estimate_class_stats, select_old_batch
from .metrics import AccuracyMatrix
from .model import IncrementalModel, ModelSnapshot, expand_unified_head, snapshot
from .numerics import Adam, Tensor, cross_entropy, kl_divergence, row_norm, step_decay_lr
from .synthdata import LabeledSet, TaskStream, generate_dataset, rotation_batch, split_tasks

log = logging.getLogger(__name__)

LOSS_KEYS = ("new_cls", "new_aug_cls", "new_ka", "old_cls", "old_feat_kd", "old_logit_kd")


class ProtocolError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, breakdown: "LossBreakdown", task: int, epoch: int, step: int):
        self.breakdown = breakdown
        self.task, self.epoch, self.step = task, epoch, step
        super().__init__(f"non-finite loss at task {task} epoch {epoch} step {step}: {breakdown}")


@dataclass
class TrainConfig:
    epochs: int = 30
    milestones: tuple = (14, 27)
    batch_size: int = 32
    lr: float = 5e-3
    weight_decay: float = 2e-4
    alpha: float = 15.0
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    feature_kd: bool = True
    logit_kd: bool = True
    kd_temperature: float = 1.0
    new_cls_full_logits: bool = True
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(m >= self.epochs or m < 0 for m in self.milestones):
            raise ValueError("milestones must lie in [0, epochs)")
        if self.kd_temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossBreakdown:
    new_cls: float = 0.0
    new_aug_cls: float = 0.0
    new_ka: float = 0.0
    old_cls: float = 0.0
    old_feat_kd: float = 0.0
    old_logit_kd: float = 0.0
    total: float = 0.0

    def recompose(self, alpha: float) -> float:
        return (self.new_cls + self.new_aug_cls + self.new_ka
                + alpha * (self.old_cls + self.old_feat_kd + self.old_logit_kd))

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskContext:
    """Column bookkeeping for one task.  Unified-head columns follow the order
    in which classes were learned."""

    index: int
    classes: list[int]
    column: dict[int, int]
    old_classes: list[int]
    snap: Optional[ModelSnapshot] = None

    @property
    def old_width(self) -> int:
        return len(self.old_classes)

    @property
    def current_columns(self) -> np.ndarray:
        return np.array([self.column[c] for c in self.classes])

    def local_labels(self, y) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([pos[int(c)] for c in y], dtype=np.int64)
        except KeyError as exc:
            raise ProtocolError(f"label {exc.args[0]} is not in the current task") from None

    def columns(self, y) -> np.ndarray:
        return np.array([self.column[int(c)] for c in y], dtype=np.int64)


def augment_labels(local_labels, num_classes: Optional[int] = None) -> np.ndarray:
    """Rotation labels y*4 + j, laid out so rows 4i..4i+3 belong to sample i."""
    y = np.asarray(local_labels, dtype=np.int64)
    if num_classes is not None and (y.min(initial=0) < 0 or y.max(initial=0) >= num_classes):
        raise ProtocolError("label outside the current task")
    return (y[:, None] * 4 + np.arange(4)[None, :]).reshape(-1)


def aggregate_rotation_logits(aug_logits: Tensor) -> Tensor:
    """(4B, 4C) rotation-head logits -> (B, C): the mean over j of the logit
    for (class c, rotation j) on the j-th rotated view."""
    rows, cols = aug_logits.shape
    if rows % 4 or cols % 4:
        raise ProtocolError(f"rotation logits must be (4B, 4C), got {aug_logits.shape}")
    B, C = rows // 4, cols // 4
    j = np.arange(4)
    row_idx = np.broadcast_to(4 * np.arange(B)[:, None, None] + j, (B, C, 4))
    col_idx = np.broadcast_to(4 * np.arange(C)[None, :, None] + j, (B, C, 4))
    return aug_logits[row_idx, col_idx].mean(axis=2)


def aggregation_loss(aug_logits: Tensor, unified_logits: Tensor, current_columns,
                     temperature: float = 1.0) -> Tensor:
    agg = aggregate_rotation_logits(aug_logits)
    restricted = unified_logits[:, np.asarray(current_columns)]
    return kl_divergence(agg, restricted, temperature)


def feature_distill(live_features: Tensor, snap_features: Tensor) -> Tensor:
    """Mean Euclidean distance between live and frozen features."""
    return row_norm(live_features - Tensor(snap_features.data)).mean()


def logit_distill(live_logits: Tensor, snap_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(live old-class logits || frozen logits); the live head is wider, so
    it is cut to the frozen width first."""
    width = snap_logits.shape[1]
    return kl_divergence(live_logits[:, :width], Tensor(snap_logits.data), temperature)


def old_targets(ctx: TaskContext, generated) -> np.ndarray:
    """Integer columns, or a probability matrix for prototype mixing."""
    cols = ctx.columns(generated.labels)
    if generated.soft_targets is None:
        return cols
    width = len(ctx.column)
    target = np.zeros((len(cols), width))
    lam = generated.soft_targets["weight"]
    partner = ctx.columns(generated.soft_targets["partner"])
    rows = np.arange(len(cols))
    np.add.at(target, (rows, cols), lam)
    np.add.at(target, (rows, partner), 1.0 - lam)
    return target


def compute_losses(model: IncrementalModel, ctx: TaskContext, images: np.ndarray, labels: np.ndarray,
                   store: StatsStore, cfg: TrainConfig, rng: np.random.Generator):
    """Build the graph for one minibatch.  Returns (total, breakdown, parts)
    where ``parts`` maps each loss name to its Tensor."""
    B = len(labels)
    rotated = rotation_batch(images)
    feats_rot = model.extract(rotated)
    feats_up = feats_rot[0::4]
    local = ctx.local_labels(labels)
    n_seen = model.unified.width

    unified_logits = model.unified(feats_up)
    if cfg.new_cls_full_logits:
        new_cls = cross_entropy(unified_logits, ctx.columns(labels))
    else:
        cur = ctx.current_columns
        new_cls = cross_entropy(unified_logits[:, cur], local)
    aug_logits = model.augmented(feats_rot)
    new_aug = cross_entropy(aug_logits, augment_labels(local, len(ctx.classes)))
    new_ka = aggregation_loss(aug_logits, unified_logits, ctx.current_columns, cfg.kd_temperature)
    parts = {"new_cls": new_cls, "new_aug_cls": new_aug, "new_ka": new_ka}
    total = new_cls + new_aug + new_ka

    if ctx.index > 0:
        if ctx.snap is None:
            raise ProtocolError(f"task {ctx.index} has no snapshot")
        y_old = select_old_batch(ctx.old_classes, B, rng)
        gen = generate(cfg.strategy, store, y_old, rng)
        synth = compensate(cfg.strategy, gen.features, feats_rot.data, rng, gen.labels)
        synthetic = Tensor(synth.compensated)
        live_old_logits = model.unified(synthetic)
        old_cls = cross_entropy(live_old_logits, old_targets(ctx, gen))
        old_terms = old_cls
        parts["old_cls"] = old_cls
        if cfg.feature_kd:
            feat_kd = feature_distill(feats_rot, ctx.snap.extract(rotated))
            parts["old_feat_kd"] = feat_kd
            old_terms = old_terms + feat_kd
        if cfg.logit_kd:
            logit_kd = logit_distill(live_old_logits, ctx.snap.logits(synthetic), cfg.kd_temperature)
            parts["old_logit_kd"] = logit_kd
            old_terms = old_terms + logit_kd
        total = total + cfg.alpha * old_terms
    assert n_seen == len(ctx.column)

    values = {k: (parts[k].item() if k in parts else 0.0) for k in LOSS_KEYS}
    breakdown = LossBreakdown(**values, total=total.item())
    return total, breakdown, parts


def train_task(model: IncrementalModel, ctx: TaskContext, data: LabeledSet, store: StatsStore,
               cfg: TrainConfig, rng: np.random.Generator) -> list[dict]:
    """Optimise one task; returns one averaged LossBreakdown dict per epoch."""
    if model.unified.width != len(ctx.column):
        raise ProtocolError("unified head has not been expanded for this task")
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(data)
    history = []
    for epoch in range(cfg.epochs):
        opt.state.learning_rate = step_decay_lr(cfg.lr, epoch, cfg.milestones)
        perm = rng.permutation(n)
        sums = dict.fromkeys(LOSS_KEYS + ("total",), 0.0)
        steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            total, br, _ = compute_losses(model, ctx, data.images[idx], data.labels[idx], store, cfg, rng)
            if not np.isfinite(br.total):
                raise NonFiniteLossError(br, ctx.index, epoch, step)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in br.as_dict().items():
                sums[k] += v
            steps += 1
        history.append({k: v / steps for k, v in sums.items()} | {"epoch": epoch, "lr": opt.state.learning_rate})
    return history


def finalize_task(model: IncrementalModel, ctx: TaskContext, data: LabeledSet, store: StatsStore) -> StatsStore:
    """Store mean/covariance of every current-task class under the current extractor."""
    for c in ctx.classes:
        imgs = data.images[data.labels == c]
        feats = model.extract(imgs).data
        store.insert(estimate_class_stats(feats, c, ctx.index))
    return store


@dataclass
class Evaluation:
    per_task: list[tuple[int, int]]
    per_class: dict[int, tuple[int, int]]
    confusion: np.ndarray  # rows: true column, cols: predicted column
    classes: list[int]  # column order

    @property
    def overall(self) -> float:
        return sum(c for c, _ in self.per_task) / sum(n for _, n in self.per_task)


def evaluate(model: IncrementalModel, stream: TaskStream, t: int, test: LabeledSet) -> Evaluation:
    """Top-1 accuracy of the upright view under the unified head, over all
    classes seen up to task ``t``."""
    seen = stream.seen_classes(t)
    column = {c: i for i, c in enumerate(seen)}
    sub = test.subset(seen)
    logits = model.unified(model.extract(sub.images)).data
    pred = np.argmax(logits, axis=1)
    truth = np.array([column[int(c)] for c in sub.labels])
    k = len(seen)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    correct = pred == truth
    per_class = {c: (int(correct[truth == column[c]].sum()), int((truth == column[c]).sum())) for c in seen}
    per_task = []
    for task in stream.tasks[: t + 1]:
        per_task.append((sum(per_class[c][0] for c in task), sum(per_class[c][1] for c in task)))
    return Evaluation(per_task, per_class, confusion, seen)


@dataclass
class RunResult:
    matrix: AccuracyMatrix
    loss_log: list[list[dict]]
    confusions: list[np.ndarray]
    class_columns: list[int]
    timings: list[float]
    stream: TaskStream
    store: StatsStore
    model: IncrementalModel


def build_model(in_dim: int, seed: int, hidden: int = 64, feature_dim: int = 32, depth: int = 2,
                head_bias: bool = False, init_gain: float = 1.0) -> tuple[IncrementalModel, np.random.Generator]:
    """Model plus the training generator, both spawned from ``seed``."""
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    model = IncrementalModel(in_dim, hidden, feature_dim, depth, head_bias, init_gain,
                             seed=init_ss)
    return model, np.random.default_rng(train_ss)


def run_incremental(train: LabeledSet, test: LabeledSet, stream: TaskStream, cfg: TrainConfig,
                    hidden: int = 64, feature_dim: int = 32, depth: int = 2, head_bias: bool = False,
                    init_gain: float = 1.0, tied_covariance: bool = False, on_phase=None) -> RunResult:
    model, rng = build_model(train.side ** 2, cfg.seed, hidden, feature_dim, depth, head_bias, init_gain)
    store = StatsStore(feature_dim, tied=tied_covariance)
    matrix = AccuracyMatrix(stream.num_tasks)
    column: dict[int, int] = {}
    losses, confusions, timings = [], [], []
    for t, classes in enumerate(stream.tasks):
        start = time.perf_counter()
        old = list(column)
        snap = snapshot(model) if t > 0 else None
        for c in classes:
            column[c] = len(column)
        expand_unified_head(model, classes)
        ctx = TaskContext(t, list(classes), dict(column), old, snap)
        data = train.subset(classes)
        losses.append(train_task(model, ctx, data, store, cfg, rng))
        finalize_task(model, ctx, data, store)
        ev = evaluate(model, stream, t, test)
        matrix.add_phase(ev.per_task)
        confusions.append(ev.confusion)
        timings.append(time.perf_counter() - start)
        log.info("task %d: overall accuracy %.4f (%.1fs)", t, ev.overall, timings[-1])
        if on_phase is not None:
            on_phase(t, ev)
    return RunResult(matrix, losses, confusions, list(column), timings, stream, store, model)


def quick_benchmark(seed: int = 0, class_count: int = 20, per_class_train: int = 100,
                    per_class_test: int = 50, noise_std: float = 0.15):
    """Dataset and 10 + 2x5 split used by the default config."""
    train, test = generate_dataset(class_count, per_class_train, per_class_test, seed=seed,
                                   noise_std=noise_std)
    stream = split_tasks(class_count, class_count // 2, 2, (class_count - class_count // 2) // 2, seed)
    return train, test, stream

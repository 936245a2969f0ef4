import numpy as np
import pytest

from rfsynth.compensate import StrategyConfig
from rfsynth.engine import TaskContext, TrainConfig
from rfsynth.gaussmem import StatsStore, estimate_class_stats
from rfsynth.model import IncrementalModel, expand_unified_head, snapshot


class MicroSetup:
    """Task 1 of a 2 + 2 protocol on 3x3 images, feature dim 4, batch 2.

    The live model is nudged away from its snapshot so both distillation
    terms are non-zero.
    """

    def __init__(self, strategy: StrategyConfig, seed: int = 0, **cfg):
        rng = np.random.default_rng(seed)
        self.model = IncrementalModel(in_dim=9, hidden=5, feature_dim=4, seed=seed)
        expand_unified_head(self.model, [0, 1])
        self.store = StatsStore(4)
        for c in (0, 1):
            imgs = rng.random((6, 3, 3))
            self.store.insert(estimate_class_stats(self.model.extract(imgs).data, c, 0))
        snap = snapshot(self.model)
        expand_unified_head(self.model, [2, 3])
        for p in self.model.parameters():
            p.data += rng.normal(scale=0.05, size=p.shape)
        self.ctx = TaskContext(1, [2, 3], {0: 0, 1: 1, 2: 2, 3: 3}, [0, 1], snap)
        self.images = rng.random((2, 3, 3))
        self.labels = np.array([3, 2])
        self.cfg = TrainConfig(strategy=strategy, **cfg)


@pytest.fixture
def micro():
    return MicroSetup


@pytest.fixture(scope="session")
def tiny_benchmark():
    """Small 6-class stream used by engine/cli tests: B=2, C=2, T=2."""
    from rfsynth.synthdata import generate_dataset, split_tasks

    train, test = generate_dataset(6, 20, 10, seed=0, noise_std=0.2)
    return train, test, split_tasks(6, 2, 2, 2, order_seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rfsynth.compensate import (
    COMPENSATION_STRATEGIES,
    StrategyConfig,
    compensate,
    cosine_similarity_matrix,
    generate,
    mix_prototypes,
    sfc_compensate,
)
from rfsynth.gaussmem import StatsStore, estimate_class_stats


def brute_cosine_argmax(old, new, lowest=False):
    """Exhaustive pair scan; strict comparison keeps the first index on ties."""
    out = []
    for a in old:
        best_j, best = None, None
        for j, b in enumerate(new):
            s = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
            if best is None or (s < best if lowest else s > best):
                best_j, best = j, s
        out.append(best_j)
    return np.array(out)


@pytest.fixture
def store():
    st = StatsStore(4)
    rng = np.random.default_rng(0)
    for c in (2, 5, 7):
        st.insert(estimate_class_stats(rng.normal(size=(50, 4)) + 3 * c, c, 0))
    return st


# cosine similarity ------------------------------------------------------------

def test_cosine_cases():
    assert cosine_similarity_matrix([[1.0, 0.0]], [[0.0, 1.0]])[0, 0] == 0.0
    assert cosine_similarity_matrix([[1.0, 1.0]], [[2.0, 2.0]])[0, 0] == pytest.approx(1.0)
    assert cosine_similarity_matrix([[1.0, 0.0]], [[-1.0, 0.0]])[0, 0] == -1.0


def test_cosine_zero_rows_score_zero():
    sim = cosine_similarity_matrix([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]])
    assert sim.tolist() == [[0.0, 0.0], [1.0, 0.0]]


def test_cosine_shape():
    rng = np.random.default_rng(1)
    sim = cosine_similarity_matrix(rng.normal(size=(3, 5)), rng.normal(size=(12, 5)))
    assert sim.shape == (3, 12)
    assert np.all(np.abs(sim) <= 1.0)
    with pytest.raises(ValueError):
        cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


# SFC --------------------------------------------------------------------------

def test_sfc_elementwise_mean():
    out = sfc_compensate(np.array([[2.0, 4.0]]), np.array([[0.0, 2.0]]))
    assert out.compensated.tolist() == [[1.0, 3.0]]


def test_sfc_fixed_point():
    rng = np.random.default_rng(2)
    old = rng.normal(size=(3, 6))
    new = rng.normal(size=(12, 6))
    new[7] = old[1]
    out = sfc_compensate(old, new)
    assert out.matched[1] == 7
    assert np.array_equal(out.compensated[1], old[1])


def test_sfc_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    for _ in range(100):
        old, new = rng.normal(size=(3, 5)), rng.normal(size=(12, 5))
        assert np.array_equal(sfc_compensate(old, new).matched, brute_cosine_argmax(old, new))


def test_sfc_ties_take_lowest_index():
    new = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0]])
    assert sfc_compensate(np.array([[3.0, 0.0]]), new).matched.tolist() == [1]


def test_matching_is_scale_invariant():
    rng = np.random.default_rng(4)
    old, new = rng.normal(size=(3, 5)), rng.normal(size=(12, 5))
    scaled = new * rng.uniform(0.1, 10.0, size=(12, 1))
    assert np.array_equal(sfc_compensate(old, new).matched, sfc_compensate(old, scaled).matched)


@pytest.mark.parametrize("kind", ["sfc", "rand_avg", "least_sim_avg"])
def test_midpoint_identity(kind):
    rng = np.random.default_rng(5)
    old, new = rng.normal(size=(8, 6)), rng.normal(size=(32, 6))
    out = compensate(StrategyConfig("mgs", kind), old, new, rng)
    partner = new[out.matched]
    d_old = np.linalg.norm(out.compensated - old, axis=1)
    d_new = np.linalg.norm(out.compensated - partner, axis=1)
    assert_allclose(d_old, d_new, atol=1e-12)


# compensate dispatch ------------------------------------------------------------

def test_none_is_identity():
    rng = np.random.default_rng(6)
    old = rng.normal(size=(4, 3))
    out = compensate(StrategyConfig("mgs", "none"), old, rng.normal(size=(16, 3)), rng)
    assert np.array_equal(out.compensated, old)


def test_rand_avg_equals_sfc_with_single_candidate():
    rng = np.random.default_rng(7)
    old, new = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    a = compensate(StrategyConfig("mgs", "rand_avg"), old, new, np.random.default_rng(0))
    b = compensate(StrategyConfig("mgs", "sfc"), old, new, np.random.default_rng(0))
    assert np.array_equal(a.compensated, b.compensated)


def test_least_sim_is_argmin_of_same_matrix():
    rng = np.random.default_rng(8)
    for _ in range(20):
        old, new = rng.normal(size=(3, 5)), rng.normal(size=(12, 5))
        least = compensate(StrategyConfig("mgs", "least_sim_avg"), old, new, rng)
        assert np.array_equal(least.matched, brute_cosine_argmax(old, new, lowest=True))


def test_rand_interp_stays_on_segment():
    rng = np.random.default_rng(9)
    old, new = rng.normal(size=(50, 3)), rng.normal(size=(40, 3))
    out = compensate(StrategyConfig("mgs", "rand_interp"), old, new, rng)
    partner = new[out.matched]
    seg = partner - old
    beta = 1.0 - np.sum((out.compensated - old) * seg, axis=1) / np.sum(seg * seg, axis=1)
    assert np.all((beta > 0) & (beta < 1))
    assert_allclose(out.compensated, beta[:, None] * old + (1 - beta[:, None]) * partner, atol=1e-12)


@pytest.mark.parametrize("kind", COMPENSATION_STRATEGIES)
def test_labels_never_change(kind):
    rng = np.random.default_rng(10)
    labels = np.array([3, 1, 4, 1])
    out = compensate(StrategyConfig("mgs", kind), rng.normal(size=(4, 3)), rng.normal(size=(16, 3)), rng, labels)
    assert out.old_labels.tolist() == [3, 1, 4, 1]
    assert out.compensated.shape == (4, 3)


# generation ---------------------------------------------------------------------

def test_prototype_returns_means(store):
    out = generate(StrategyConfig("prototype", "none"), store, [5, 2, 5], np.random.default_rng(0))
    assert np.array_equal(out.features, np.stack([store[5].mean, store[2].mean, store[5].mean]))


def test_noise_aug_with_zero_scale_is_prototype(store):
    out = generate(StrategyConfig("gaussian_noise_aug", "none", noise_scale=0.0), store, [7, 2],
                   np.random.default_rng(0))
    assert np.array_equal(out.features, np.stack([store[7].mean, store[2].mean]))


def test_noise_aug_default_scale(store):
    rng = np.random.default_rng(1)
    out = generate(StrategyConfig("gaussian_noise_aug", "none"), store, [2] * 20000, rng)
    assert np.std(out.features - store[2].mean) == pytest.approx(np.sqrt(store.mean_variance()), rel=0.02)


def test_mixing_endpoint_is_prototype(store):
    out = mix_prototypes(store, [5, 7], [2, 2], [1.0, 1.0])
    assert np.array_equal(out.features, np.stack([store[5].mean, store[7].mean]))
    assert out.soft_targets["weight"].tolist() == [1.0, 1.0]


def test_mixing_draws_partners(store):
    out = generate(StrategyConfig("prototype_mixing", "none"), store, [2, 5, 7, 2], np.random.default_rng(2))
    lam = out.soft_targets["weight"]
    partner = out.soft_targets["partner"]
    expected = np.stack([lam[i] * store[a].mean + (1 - lam[i]) * store[b].mean
                         for i, (a, b) in enumerate(zip([2, 5, 7, 2], partner))])
    assert_allclose(out.features, expected)


def test_mgs_generation_row_count_and_labels(store):
    out = generate(StrategyConfig("mgs", "sfc", K=50), store, [2, 7, 7, 5, 2], np.random.default_rng(3))
    assert out.features.shape == (5, 4)
    assert out.labels.tolist() == [2, 7, 7, 5, 2]


def test_unknown_class(store):
    with pytest.raises(KeyError):
        generate(StrategyConfig("prototype", "none"), store, [99], np.random.default_rng(0))


def test_strategy_validation():
    with pytest.raises(ValueError):
        StrategyConfig("vae", "sfc")
    with pytest.raises(ValueError):
        StrategyConfig("mgs", "midpoint")
    assert StrategyConfig().name == "mgs+sfc"

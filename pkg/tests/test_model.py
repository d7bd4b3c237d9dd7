import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairbandit.model import (
    IDLE,
    RewardModel,
    SlotFeedback,
    collision_indicator,
    grid_means,
    latin_means,
    pseudo_regret_increment,
    realize_slot,
    regret_increments,
)
from fairbandit.oracle import maxmin_bruteforce

M2 = [[0.9, 0.2], [0.3, 0.8]]


@pytest.mark.parametrize(
    "profile, expected",
    [((0, 0, 1), (0, 1, 1)), ((0, 1, 2), (1, 1, 1)), ((1, 1, 1), (1, 0, 1))],
)
def test_collision_indicator_examples(profile, expected):
    assert collision_indicator(profile).tolist() == list(expected)


def test_collision_indicator_ignores_idle():
    assert collision_indicator((IDLE, IDLE, 2)).tolist() == [1, 1, 1]


def test_collision_indicator_rejects_out_of_range():
    with pytest.raises(ValueError):
        collision_indicator((0, 3, 1))


@given(st.lists(st.integers(0, 5), min_size=6, max_size=6))
def test_eta_is_binary_and_one_for_single_or_empty(profile):
    eta = collision_indicator(profile)
    counts = np.bincount(profile, minlength=6)
    assert set(eta.tolist()) <= {0, 1}
    assert np.array_equal(eta == 1, counts <= 1)


def test_reward_model_validation():
    with pytest.raises(ValueError):
        RewardModel(np.ones((2, 3)))
    with pytest.raises(ValueError):
        RewardModel([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        RewardModel([[1.0]], family="gaussian")
    m = RewardModel(M2)
    assert np.array_equal(m.supports, 2 * np.asarray(M2))
    with pytest.raises(ValueError):
        m.means[0, 0] = 5.0


def test_realize_slot_no_collision_support():
    m = RewardModel(M2)
    fb = realize_slot(m, (0, 1), np.random.default_rng(0))
    assert all(f.no_collision for f in fb)
    assert 0 < fb[0].reward <= 1.8 and 0 < fb[1].reward <= 1.6


def test_realize_slot_collision_zeroes():
    fb = realize_slot(RewardModel(M2), (0, 0), np.random.default_rng(0))
    assert fb == [SlotFeedback(0.0, False), SlotFeedback(0.0, False)]


def test_realize_slot_idle_agent():
    fb = realize_slot(RewardModel(M2), (IDLE, 1), np.random.default_rng(0))
    assert fb[0] == SlotFeedback(0.0, True) and fb[1].reward > 0


def test_realize_slot_deterministic():
    m = RewardModel(M2, family="triangular")
    a = realize_slot(m, (1, 0), np.random.default_rng(42))
    b = realize_slot(m, (1, 0), np.random.default_rng(42))
    assert a == b


def test_realize_slot_consumes_n_uniforms():
    m = RewardModel(M2)
    r1 = np.random.default_rng(7)
    realize_slot(m, (0, 0), r1)
    r2 = np.random.default_rng(7)
    r2.bit_generator.advance(2)
    assert r1.random() == r2.random()


@pytest.mark.parametrize("family", ["uniform", "triangular"])
def test_sampling_law_mean_and_support(family):
    m = RewardModel([[0.4, 1.5], [0.7, 0.2]], family=family)
    u = np.random.default_rng(3).random(200_000)
    x = m.inverse_cdf(u, np.zeros_like(u, dtype=int), np.ones_like(u, dtype=int))
    assert x.min() > 0 and x.max() <= 3.0
    assert abs(x.mean() - 1.5) < 4 * x.std() / np.sqrt(len(x))


def test_pseudo_regret_examples():
    m = RewardModel(M2)
    rho = maxmin_bruteforce(M2).rho_star
    assert rho == 0.8
    assert pseudo_regret_increment(m, rho, (0, 1)) == 0.0
    assert pseudo_regret_increment(m, rho, (0, 0)) == pytest.approx(0.8)
    assert pseudo_regret_increment(m, rho, (1, 0)) == pytest.approx(0.6)


def test_pseudo_regret_idle_counts_as_zero_utility():
    m = RewardModel(M2)
    assert pseudo_regret_increment(m, 0.8, (0, IDLE)) == pytest.approx(0.8)


@given(st.integers(2, 5).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.01, 10), min_size=n * n, max_size=n * n),
    st.lists(st.integers(-1, n - 1), min_size=n, max_size=n),
)))
def test_pseudo_regret_nonnegative(data):
    flat, profile = data
    n = len(profile)
    R = np.array(flat).reshape(n, n)
    rho = maxmin_bruteforce(R).rho_star
    assert pseudo_regret_increment(RewardModel(R), rho, profile) >= -1e-12


def test_regret_increments_matches_scalar():
    rng = np.random.default_rng(0)
    R = rng.uniform(0.1, 1, (4, 4))
    rho = maxmin_bruteforce(R).rho_star
    profiles = rng.integers(-1, 4, size=(50, 4))
    vec = regret_increments(R, rho, profiles)
    m = RewardModel(R)
    assert np.allclose(vec, [pseudo_regret_increment(m, rho, p) for p in profiles], atol=0)


def test_generators():
    rng = np.random.default_rng(0)
    g = grid_means(4, rng)
    assert sorted(g.ravel().tolist()) == [i / 16 for i in range(1, 17)]
    lat = latin_means(5, rng)
    for row in lat:
        assert sorted(row.tolist()) == [k / 5 for k in range(1, 6)]

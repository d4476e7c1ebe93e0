import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tabular_grpo.advantage import exact_stats
from tabular_grpo.policy_core import ConfigError, Policy, PromptSpace, RngStream
from tabular_grpo.reward_env import (
    RESPONSE_CAP,
    Environment,
    RewardModel,
    RewardValidationError,
    SequenceTask,
    make_bernoulli_env,
    normalize_reward,
    success_rate,
    success_rates,
)


def test_reward_model_range_and_binary_flag():
    assert RewardModel(np.array([[0.0, 1.0]])).is_binary
    assert not RewardModel(np.array([[0.0, 0.5]])).is_binary
    with pytest.raises(RewardValidationError):
        RewardModel(np.array([[0.0, 1.5]]))
    with pytest.raises(RewardValidationError):
        RewardModel(np.array([[0.0, 0.5]]), is_binary=True)


class TestNormalize:
    def test_examples(self):
        np.testing.assert_array_equal(normalize_reward([[0, 2], [1, 2]]).table, [[0, 1], [0.5, 1]])
        binary = np.array([[0.0, 1.0], [1.0, 1.0]])
        np.testing.assert_array_equal(normalize_reward(binary).table, binary)
        np.testing.assert_array_equal(normalize_reward([[3]]).table, [[1]])

    def test_errors(self):
        with pytest.raises(RewardValidationError):
            normalize_reward([[0, -1]])
        with pytest.raises(RewardValidationError):
            normalize_reward([[0, 0]])

    @given(st.lists(st.floats(0, 100), min_size=2, max_size=12).filter(lambda v: max(v) > 0))
    def test_idempotent(self, vals):
        once = normalize_reward(np.array([vals]))
        assert once.table.max() == 1.0
        np.testing.assert_array_equal(normalize_reward(once.table).table, once.table)


class TestSuccessRate:
    def test_examples(self):
        r = RewardModel(np.array([[1.0, 0.0]]))
        assert success_rate(Policy(np.zeros((1, 2))), r, 0) == 0.5
        assert success_rate(Policy(np.array([[0.0, -800.0]])), r, 0) == 1.0
        assert success_rate(Policy(np.array([[np.log(3), 0.0]])), r, 0) == pytest.approx(0.75, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            success_rate(Policy(np.zeros((1, 3))), RewardModel(np.array([[1.0, 0.0]])), 0)

    @given(st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_linear_in_probability_row(self, lam, seed):
        rng = np.random.default_rng(seed)
        r = RewardModel(rng.random((1, 5)))
        p1, p2 = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        mix = lam * p1 + (1 - lam) * p2
        sr = [float(np.dot(p, r.table[0])) for p in (p1, p2)]
        got = success_rate(Policy(np.log(mix)[None, :]), r, 0)
        assert got == pytest.approx(lam * sr[0] + (1 - lam) * sr[1], abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_binary_variance_identity(self, seed):
        rng = np.random.default_rng(seed)
        table = (rng.random((3, 6)) < 0.5).astype(float)
        pol = Policy(rng.normal(size=(3, 6)) * 2)
        rm = RewardModel(table)
        for x in range(3):
            p = success_rate(pol, rm, x)
            assert exact_stats(pol, rm, x, 0.0).std ** 2 == pytest.approx(p * (1 - p), abs=1e-12)


class TestBernoulliEnv:
    def test_saturated_rows(self):
        env, pol = make_bernoulli_env([0.0, 1.0], 5, RngStream(0))
        assert (env.reward.table[0] == 0).all() and (env.reward.table[1] == 1).all()
        np.testing.assert_array_equal(success_rates(pol, env.reward), [0.0, 1.0])

    def test_half_on_eight(self):
        env, pol = make_bernoulli_env([0.5], 8, RngStream(1))
        assert env.reward.table.sum() == 4
        np.testing.assert_allclose(pol.probs, 1 / 8, atol=1e-15)
        assert success_rate(pol, env.reward, 0) == pytest.approx(0.5, abs=1e-15)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.integers(2, 16))
    def test_rates_reproduced(self, ps, n):
        env, pol = make_bernoulli_env(ps, n, RngStream(3))
        assert env.reward.is_binary
        np.testing.assert_allclose(success_rates(pol, env.reward), ps, atol=1e-9)

    def test_extreme_probabilities_reachable(self):
        ps = [1e-300, 1e-12, 1 - 1e-12]
        env, pol = make_bernoulli_env(ps, 4, RngStream(0))
        np.testing.assert_allclose(success_rates(pol, env.reward), ps, atol=1e-9)

    def test_out_of_range(self):
        with pytest.raises(RewardValidationError):
            make_bernoulli_env([1.2], 4)


class TestSequenceTask:
    def test_digit_sum(self):
        env = SequenceTask(alphabet_size=3, sequence_length=2, targets=(0, 2)).compile()
        assert env.response_count == 9
        seqs = [(a, b) for a in range(3) for b in range(3)]
        want = np.array([[float(a + b == t) for a, b in seqs] for t in (0, 2)])
        np.testing.assert_array_equal(env.reward.table, want)

    def test_cap(self):
        with pytest.raises(ConfigError):
            SequenceTask(alphabet_size=10, sequence_length=4, targets=(3,))
        assert 10**4 > RESPONSE_CAP

    def test_environment_cap(self):
        with pytest.raises(ConfigError):
            Environment(RewardModel(np.zeros((1, RESPONSE_CAP + 1))), PromptSpace(1))

"""Exact and group-estimated whitened-reward advantages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .policy_core import ConfigError, DomainError, Policy
from .reward_env import RewardModel

DEFAULT_VAR_EPSILON = 1e-4


@dataclass(frozen=True)
class RewardStats:
    mean: float
    std: float
    var_epsilon: float

    @property
    def smoothed_std(self) -> float:
        return float(np.sqrt(self.std**2 + self.var_epsilon))


@dataclass(frozen=True, eq=False)
class GroupSampleBatch:
    """G sampled responses for one prompt, with their rewards and the sampler that drew them."""

    prompt: int
    responses: np.ndarray
    rewards: np.ndarray
    sampler: str = "old"

    def __post_init__(self):
        responses = np.asarray(self.responses, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if responses.shape != rewards.shape or responses.ndim != 1:
            raise ValueError("responses and rewards must be 1-d arrays of equal length")
        if len(responses) < 2:
            raise ConfigError("a group needs at least 2 samples")
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "rewards", rewards)

    @classmethod
    def from_reward(cls, reward: RewardModel, prompt: int, responses, sampler: str = "old"):
        responses = np.asarray(responses, dtype=np.int64)
        return cls(prompt, responses, reward.lookup(prompt, responses), sampler)

    @property
    def group_size(self) -> int:
        return len(self.responses)


@dataclass(frozen=True, eq=False)
class AdvantageField:
    """Advantage values plus the statistics that produced them.

    In ``exact`` mode ``values`` has shape (prompts, responses) and ``stats``
    holds one entry per prompt. In ``empirical`` mode ``values`` is one entry
    per sampled item of a single group and ``stats`` has length 1.
    """

    values: np.ndarray
    stats: tuple[RewardStats, ...]
    mode: Literal["exact", "empirical"]

    @property
    def smoothed_std(self) -> np.ndarray:
        return np.array([s.smoothed_std for s in self.stats])

    @property
    def std(self) -> np.ndarray:
        return np.array([s.std for s in self.stats])


def _moments(probs: np.ndarray, values: np.ndarray) -> tuple[float, float]:
    support = values[probs > 0]
    if np.all(support == support[0]):
        # constant on the support: exact zero variance, no rounding residue
        return float(support[0]), 0.0
    mean = float(probs @ values)
    var = float(probs @ (values - mean) ** 2)
    return mean, float(np.sqrt(max(var, 0.0)))


def zero_variance_prompts(policy: Policy, reward: RewardModel) -> np.ndarray:
    """Boolean mask of prompts whose reward is constant on the support of ``policy``."""
    return np.array([exact_stats(policy, reward, x, 0.0).std == 0.0 for x in range(policy.prompt_count)])


def exact_stats(alpha: Policy, reward: RewardModel, prompt: int, var_epsilon: float) -> RewardStats:
    """Mean and population std of the reward under ``alpha(.|prompt)``."""
    if var_epsilon < 0:
        raise ConfigError("var_epsilon must be >= 0")
    mean, std = _moments(alpha.probs[prompt], reward.table[prompt])
    return RewardStats(mean, std, var_epsilon)


def exact_advantage(
    alpha: Policy, reward: RewardModel, var_epsilon: float, zero_variance: Literal["raise", "zero"] = "raise"
) -> AdvantageField:
    """Whitened reward ``(r - mean) / sqrt(std**2 + var_epsilon)`` with statistics under ``alpha``.

    With ``var_epsilon == 0`` a zero-variance prompt raises unless
    ``zero_variance="zero"``, which sets its row to 0 (used by masked objectives).
    """
    if alpha.shape != reward.shape:
        raise ValueError(f"shape mismatch: policy {alpha.shape} vs reward {reward.shape}")
    stats = tuple(exact_stats(alpha, reward, x, var_epsilon) for x in range(alpha.prompt_count))
    values = np.empty(alpha.shape)
    for x, st in enumerate(stats):
        denom = st.smoothed_std
        if denom == 0.0:
            if zero_variance == "zero":
                values[x] = 0.0
                continue
            raise DomainError(f"zero reward variance at prompt {x} with var_epsilon = 0")
        values[x] = (reward.table[x] - st.mean) / denom
    return AdvantageField(values, stats, "exact")


def group_stats(
    rewards, var_epsilon: float, std_divisor: Literal["population", "sample"] = "population"
) -> RewardStats:
    rewards = np.asarray(rewards, dtype=np.float64)
    ddof = 0 if std_divisor == "population" else 1
    if std_divisor not in ("population", "sample"):
        raise ConfigError(f"unknown std_divisor {std_divisor!r}")
    return RewardStats(float(rewards.mean()), float(rewards.std(ddof=ddof)), var_epsilon)


def group_advantage(
    batch: GroupSampleBatch,
    var_epsilon: float = DEFAULT_VAR_EPSILON,
    std_divisor: Literal["population", "sample"] = "population",
) -> AdvantageField:
    st = group_stats(batch.rewards, var_epsilon, std_divisor)
    centered = batch.rewards - st.mean
    denom = st.smoothed_std
    if denom == 0.0:
        # constant group with var_epsilon = 0: numerator is zero everywhere
        values = np.zeros_like(centered)
    else:
        values = centered / denom
    return AdvantageField(values, (st,), "empirical")


def is_zero_variance(batch: GroupSampleBatch, binary: bool | None = None) -> bool:
    rewards = batch.rewards
    if binary is None:
        binary = bool(np.all((rewards == 0) | (rewards == 1)))
    if binary:
        return bool(np.all(rewards == rewards[0]))
    return bool(np.ptp(rewards) <= 1e-12)

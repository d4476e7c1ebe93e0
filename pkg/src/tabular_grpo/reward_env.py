"""Verifiable-reward environments on finite prompt x response grids."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .policy_core import ConfigError, Policy, PromptSpace, RngStream

RESPONSE_CAP = 4096


class RewardValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Deterministic reward table with entries in [0, 1]."""

    table: np.ndarray
    is_binary: bool = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        table = np.array(self.table, dtype=np.float64)
        if table.ndim != 2:
            raise RewardValidationError("reward table must be 2-d (prompts x responses)")
        if not np.all(np.isfinite(table)) or table.min() < 0 or table.max() > 1:
            raise RewardValidationError("reward entries must lie in [0, 1]; use normalize_reward")
        binary = bool(np.all((table == 0) | (table == 1)))
        if self.is_binary is None:
            object.__setattr__(self, "is_binary", binary)
        elif self.is_binary and not binary:
            raise RewardValidationError("is_binary set but table has non-{0,1} entries")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def shape(self) -> tuple[int, int]:
        return self.table.shape

    @property
    def prompt_count(self) -> int:
        return self.table.shape[0]

    @property
    def response_count(self) -> int:
        return self.table.shape[1]

    def lookup(self, prompt: int, responses) -> np.ndarray:
        return self.table[prompt, np.asarray(responses)]


@dataclass(frozen=True)
class Environment:
    """A reward model together with the prompt distribution it is trained on."""

    reward: RewardModel
    prompts: PromptSpace

    def __post_init__(self):
        if self.prompts.prompt_count != self.reward.prompt_count:
            raise ConfigError("prompt space and reward table disagree on prompt count")
        if self.reward.response_count > RESPONSE_CAP:
            raise ConfigError(
                f"response_count {self.reward.response_count} exceeds cap {RESPONSE_CAP}"
            )

    @property
    def prompt_count(self) -> int:
        return self.reward.prompt_count

    @property
    def response_count(self) -> int:
        return self.reward.response_count


def normalize_reward(raw) -> RewardModel:
    """Scale a nonnegative reward table by its sup-norm so that max entry is 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise RewardValidationError("reward table must be 2-d")
    if np.any(raw < 0):
        raise RewardValidationError("reward entries must be nonnegative")
    peak = raw.max()
    if not peak > 0:
        raise RewardValidationError("reward table is identically zero; cannot normalize")
    return RewardModel(raw / peak)


def _check_shapes(policy: Policy, reward: RewardModel) -> None:
    if policy.shape != reward.shape:
        raise ValueError(f"shape mismatch: policy {policy.shape} vs reward {reward.shape}")


def success_rate(policy: Policy, reward: RewardModel, prompt: int) -> float:
    """Expected reward of ``policy`` at ``prompt``; for binary rewards, the success probability."""
    _check_shapes(policy, reward)
    return float(policy.probs[prompt] @ reward.table[prompt])


def success_rates(policy: Policy, reward: RewardModel) -> np.ndarray:
    _check_shapes(policy, reward)
    return np.einsum("xy,xy->x", policy.probs, reward.table)


def expected_reward(policy: Policy, env: Environment) -> float:
    return float(env.prompts.prompt_weights @ success_rates(policy, env.reward))


def _bernoulli_row(p: float, n: int) -> tuple[int, float]:
    """Number of correct responses and the logit gap (correct minus wrong) giving mass p."""
    if p == 0.0 or p == 1.0:
        return (0 if p == 0.0 else n), 0.0
    correct = min(max(round(p * n), 1), n - 1)
    gap = math.log(p * (n - correct)) - math.log((1.0 - p) * correct)
    return correct, gap


def make_bernoulli_env(
    success_probs: Sequence[float],
    responses_per_prompt: int,
    rng: RngStream | None = None,
    prompt_weights=None,
) -> tuple[Environment, Policy]:
    """Binary-reward bandit where the returned policy succeeds at prompt x with probability p[x].

    For each prompt roughly ``p * n`` responses are marked correct (positions
    shuffled by ``rng``) and the correct logits are offset so the policy mass
    on them equals ``p`` exactly.
    """
    probs = np.asarray(success_probs, dtype=np.float64)
    n = int(responses_per_prompt)
    if n < 2:
        raise ConfigError("responses_per_prompt must be at least 2")
    if n > RESPONSE_CAP:
        raise ConfigError(f"responses_per_prompt {n} exceeds cap {RESPONSE_CAP}")
    if probs.ndim != 1 or len(probs) == 0:
        raise RewardValidationError("success_probs must be a non-empty vector")
    if np.any(~np.isfinite(probs)) or np.any(probs < 0) or np.any(probs > 1):
        raise RewardValidationError("success probabilities must lie in [0, 1]")
    gen = rng.generator() if rng is not None else None
    table = np.zeros((len(probs), n))
    logits = np.zeros((len(probs), n))
    for x, p in enumerate(probs):
        correct, gap = _bernoulli_row(float(p), n)
        mask = np.zeros(n, dtype=bool)
        mask[:correct] = True
        if gen is not None:
            mask = mask[gen.permutation(n)]
        table[x, mask] = 1.0
        logits[x, mask] = gap
    policy = Policy(logits)
    reward = RewardModel(table, is_binary=True)
    achieved = success_rates(policy, reward)
    off = np.flatnonzero(np.abs(achieved - probs) > 1e-9)
    if off.size:
        x = int(off[0])
        raise RewardValidationError(
            f"success probability {probs[x]!r} at prompt {x} is not representable on a "
            f"{n}-response grid in double precision; nearest achievable is {achieved[x]!r}"
        )
    prompts = PromptSpace(len(probs), prompt_weights)
    return Environment(reward, prompts), policy


@dataclass(frozen=True)
class SequenceTask:
    """Enumerated token-sequence task with a verifiable target predicate.

    Responses are all ``alphabet_size ** sequence_length`` sequences in
    lexicographic order. Each prompt carries one target; by default a
    sequence is correct when its digit sum equals the target.
    """

    alphabet_size: int
    sequence_length: int
    targets: tuple[int, ...]
    predicate: Callable[[tuple[int, ...], int], bool] | None = None
    response_cap: int = RESPONSE_CAP

    def __post_init__(self):
        if self.alphabet_size < 2 or self.sequence_length < 1:
            raise ConfigError("alphabet_size must be >= 2 and sequence_length >= 1")
        if self.alphabet_size ** self.sequence_length > self.response_cap:
            raise ConfigError(
                f"{self.alphabet_size}^{self.sequence_length} sequences exceed cap {self.response_cap}"
            )
        if not self.targets:
            raise ConfigError("at least one target is required")

    @property
    def response_count(self) -> int:
        return self.alphabet_size ** self.sequence_length

    def sequences(self) -> list[tuple[int, ...]]:
        return list(itertools.product(range(self.alphabet_size), repeat=self.sequence_length))

    def compile(self, prompt_weights=None) -> Environment:
        check = self.predicate or (lambda seq, target: sum(seq) == target)
        seqs = self.sequences()
        table = np.array([[1.0 if check(s, t) else 0.0 for s in seqs] for t in self.targets])
        return Environment(RewardModel(table, is_binary=True), PromptSpace(len(self.targets), prompt_weights))

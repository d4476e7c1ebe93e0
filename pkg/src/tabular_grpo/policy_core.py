"""Finite prompt/response spaces, softmax policies, divergences and sampling.

Every other module works on top of these primitives. A policy is a logit
table of shape ``(prompt_count, response_count)``; probabilities are always
materialized through a row-wise softmax and never edited directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_ATOL = 1e-12


class DomainError(ValueError):
    """Raised when an input lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Raised for invalid configuration values (group sizes, counts, ...)."""


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class PromptSpace:
    prompt_count: int
    prompt_weights: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.prompt_count < 1:
            raise ConfigError("prompt_count must be positive")
        if self.prompt_weights is None:
            weights = np.full(self.prompt_count, 1.0 / self.prompt_count)
        else:
            weights = np.array(self.prompt_weights, dtype=np.float64)
        if weights.shape != (self.prompt_count,):
            raise ConfigError(
                f"prompt_weights has shape {weights.shape}, expected ({self.prompt_count},)"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > PROB_ATOL:
            raise ConfigError("prompt_weights must be nonnegative and sum to 1")
        weights.setflags(write=False)
        object.__setattr__(self, "prompt_weights", weights)

    @classmethod
    def uniform(cls, prompt_count: int) -> "PromptSpace":
        return cls(prompt_count)


@dataclass(frozen=True)
class ResponseSpace:
    response_count: int

    def __post_init__(self):
        if self.response_count < 2:
            raise ConfigError("response_count must be at least 2")


@dataclass(frozen=True, eq=False)
class Policy:
    """Tabular softmax policy. ``probs[x]`` is the response distribution for prompt ``x``.

    The arrays are read-only snapshots; training code builds a new ``Policy``
    for every parameter update.
    """

    logits: np.ndarray
    probs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ConfigError("logits must be a 2-d table (prompts x responses)")
        ResponseSpace(logits.shape[1])
        if not np.all(np.isfinite(logits)):
            raise DomainError("logits must be finite")
        probs = softmax_rows(logits)
        logits.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "probs", probs)

    @property
    def prompt_count(self) -> int:
        return self.logits.shape[0]

    @property
    def response_count(self) -> int:
        return self.logits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    @classmethod
    def uniform(cls, prompt_count: int, response_count: int) -> "Policy":
        return cls(np.zeros((prompt_count, response_count)))

    def with_temperature(self, temperature: float) -> "Policy":
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        return Policy(self.logits / temperature)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints, e.g. ``(iteration, prompt)``.
    Distinct ids give statistically independent Philox streams, and the same
    id always replays the same draws.
    """

    seed: int
    stream_id: int | tuple[int, ...] = 0

    def generator(self) -> np.random.Generator:
        key = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "RngStream":
        base = self.stream_id if isinstance(self.stream_id, tuple) else (self.stream_id,)
        return RngStream(self.seed, base + tuple(key))


def _check_prompt(policy: Policy, prompt: int) -> None:
    if not 0 <= prompt < policy.prompt_count:
        raise IndexError(f"prompt {prompt} out of range [0, {policy.prompt_count})")


def row_distribution(policy: Policy, prompt: int) -> np.ndarray:
    _check_prompt(policy, prompt)
    return policy.probs[prompt]


def _check_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return p, q


def tv_distance(p, q) -> float:
    """Total variation distance, half the L1 distance between ``p`` and ``q``."""
    p, q = _check_pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with the convention 0 * log(0 / q) = 0."""
    p, q = _check_pair(p, q)
    support = p > 0
    if np.any(q[support] <= 0):
        bad = int(np.flatnonzero(support & (q <= 0))[0])
        raise DomainError(f"q[{bad}] = 0 where p[{bad}] > 0 (not absolutely continuous)")
    ps, qs = p[support], q[support]
    return max(float(np.sum(ps * (np.log(ps) - np.log(qs)))), 0.0)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL for two row-stochastic tables."""
    return np.array([kl_divergence(pr, qr) for pr, qr in zip(p, q)])


def tv_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def sample_from_probs(probs: np.ndarray, size: int, rng: RngStream) -> np.ndarray:
    # inverse-CDF sampling; zero-mass entries can never be selected
    cdf = np.cumsum(probs)
    u = rng.generator().random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(probs) - 1)


def sample_group(
    policy: Policy, prompt: int, group_size: int, rng: RngStream, temperature: float = 1.0
) -> np.ndarray:
    """Draw ``group_size`` i.i.d. responses for ``prompt``.

    ``temperature`` divides the logits at sampling time only.
    """
    if group_size < 2:
        raise ConfigError(f"group_size must be >= 2, got {group_size}")
    _check_prompt(policy, prompt)
    if temperature == 1.0:
        probs = policy.probs[prompt]
    else:
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        probs = softmax_rows(policy.logits[prompt] / temperature)
    return sample_from_probs(probs, group_size, rng)


def grad_log_prob(policy: Policy, prompt: int, response: int) -> np.ndarray:
    """Gradient of log pi(response | prompt) with respect to the full logit table."""
    _check_prompt(policy, prompt)
    if not 0 <= response < policy.response_count:
        raise IndexError(f"response {response} out of range [0, {policy.response_count})")
    grad = np.zeros(policy.shape)
    grad[prompt] = -policy.probs[prompt]
    grad[prompt, response] += 1.0
    return grad

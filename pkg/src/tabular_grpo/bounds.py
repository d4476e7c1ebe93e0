"""Exact evaluation of the reward-improvement lower bounds and their diagnostics.

For a triple (pi, pi_k, alpha) and a reward in [0, 1] the per-prompt bound is

    J(pi) - J(pi_k) >= L_alpha(pi) - 2 * c_alpha * TV(pi, alpha) - 2 * TV(pi_k, alpha)

with ``c_alpha = (1 - s) / s`` and ``s = sqrt(var_alpha(r) + var_epsilon)``.
Every term is computed exactly on the finite grid; ``slack = lhs - rhs`` must
be nonnegative. Violations are surfaced by :func:`counterexample_search`,
never clamped.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .advantage import AdvantageField, RewardStats, exact_stats
from .policy_core import ConfigError, DomainError, Policy, RngStream, kl_divergence, tv_rows
from .reward_env import RewardModel, RewardValidationError, success_rates
from .surrogate import surrogate_plain

SLACK_TOLERANCE = 1e-9
COUNTEREXAMPLE_SCHEMA = "tabular_grpo.counterexample"
COUNTEREXAMPLE_VERSION = 1


@dataclass(frozen=True, eq=False)
class BoundReport:
    """All terms of the per-prompt bound, plus the integrated bound when requested.

    Per-prompt fields are arrays indexed by prompt. ``reward_scale`` is the
    sup-norm multiplying the TV terms (1 for normalized rewards).
    """

    j_pi: np.ndarray
    j_pi_k: np.ndarray
    surrogate: np.ndarray
    factor: np.ndarray
    tv_pi_alpha: np.ndarray
    tv_pik_alpha: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    slack: np.ndarray
    reward_scale: float = 1.0
    prompt_weights: np.ndarray | None = None
    integrated_lhs: float | None = None
    integrated_rhs: float | None = None
    m_constant: float | None = None
    kl_budget: float | None = None
    vicinity: float | None = None

    @property
    def min_slack(self) -> float:
        return float(self.slack.min())

    @property
    def integrated_slack(self) -> float | None:
        if self.integrated_lhs is None:
            return None
        return self.integrated_lhs - self.integrated_rhs

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _check_epsilon(var_epsilon: float) -> None:
    if not 0.0 <= var_epsilon < 1.0:
        raise ConfigError(f"var_epsilon must lie in [0, 1), got {var_epsilon}")


def _reward_model(reward, appendix_form: bool) -> tuple[RewardModel, float]:
    """Return a [0, 1] model for the advantage algebra and the sup-norm scale."""
    if isinstance(reward, RewardModel):
        return reward, 1.0
    if not appendix_form:
        raise RewardValidationError("bounds need a normalized RewardModel; see normalize_reward")
    raw = np.asarray(reward, dtype=np.float64)
    if raw.ndim != 2 or np.any(raw < 0):
        raise RewardValidationError("raw reward must be a nonnegative 2-d table")
    scale = float(raw.max())
    if scale <= 0:
        raise RewardValidationError("reward table is identically zero")
    return RewardModel(raw / scale), scale


def theorem1_report(
    pi: Policy,
    pi_k: Policy,
    alpha: Policy,
    reward,
    var_epsilon: float,
    appendix_form: bool = False,
) -> BoundReport:
    """Per-prompt off-policy improvement bound.

    With ``appendix_form=True`` the reward may be an unnormalized nonnegative
    table: statistics are taken on the raw reward and both TV terms carry the
    sup-norm factor. This form still needs ``sqrt(var + var_epsilon) <= 1``.
    """
    _check_epsilon(var_epsilon)
    unit, scale = _reward_model(reward, appendix_form)
    if not (pi.shape == pi_k.shape == alpha.shape == unit.shape):
        raise ValueError("policies and reward must share one shape")
    stats = [exact_stats(alpha, unit, x, 0.0) for x in range(alpha.prompt_count)]
    mean = np.array([st.mean for st in stats]) * scale
    std = np.array([st.std for st in stats]) * scale
    smoothed = np.sqrt(std**2 + var_epsilon)
    if np.any(smoothed == 0):
        x = int(np.flatnonzero(smoothed == 0)[0])
        raise DomainError(f"zero reward variance at prompt {x} with var_epsilon = 0")
    if np.any(smoothed > 1.0 + 1e-15):
        raise RewardValidationError("smoothed std exceeds 1; rescale the reward")
    raw = unit.table * scale
    adv = AdvantageField(
        (raw - mean[:, None]) / smoothed[:, None],
        tuple(RewardStats(float(m), float(sd), var_epsilon) for m, sd in zip(mean, std)),
        "exact",
    )
    surrogate = np.array([surrogate_plain(pi, alpha, adv, x) for x in range(pi.prompt_count)])
    j_pi = success_rates(pi, unit) * scale
    j_pi_k = success_rates(pi_k, unit) * scale
    factor = (1.0 - smoothed) / smoothed
    tv_pa = tv_rows(pi.probs, alpha.probs)
    tv_ka = tv_rows(pi_k.probs, alpha.probs)
    lhs = j_pi - j_pi_k
    rhs = surrogate - 2.0 * factor * scale * tv_pa - 2.0 * scale * tv_ka
    return BoundReport(j_pi, j_pi_k, surrogate, factor, tv_pa, tv_ka, lhs, rhs, lhs - rhs, scale)


def corollary_report(pi: Policy, pi_k: Policy, reward, var_epsilon: float, appendix_form: bool = False) -> BoundReport:
    """On-policy case of the bound: the sampler is the current policy."""
    return theorem1_report(pi, pi_k, pi_k, reward, var_epsilon, appendix_form)


def m_constant(factor: np.ndarray, prompt_weights: np.ndarray) -> float:
    """Root-mean-square of the per-prompt variance factor under the prompt distribution."""
    return float(math.sqrt(prompt_weights @ (np.asarray(factor) ** 2)))


def integrated_report(
    pi: Policy,
    pi_k: Policy,
    alpha: Policy,
    reward,
    var_epsilon: float,
    prompt_weights=None,
    appendix_form: bool = False,
) -> BoundReport:
    """Bound integrated over prompts, with Cauchy-Schwarz on the variance-factor term."""
    rep = theorem1_report(pi, pi_k, alpha, reward, var_epsilon, appendix_form)
    n = pi.prompt_count
    w = np.full(n, 1.0 / n) if prompt_weights is None else np.asarray(prompt_weights, dtype=np.float64)
    if w.shape != (n,) or abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
        raise ConfigError("prompt_weights must be a probability vector over prompts")
    m = m_constant(rep.factor, w)
    lhs = float(w @ rep.lhs)
    rhs = float(
        w @ rep.surrogate
        - 2.0 * m * rep.reward_scale * math.sqrt(float(w @ rep.tv_pi_alpha**2))
        - 2.0 * rep.reward_scale * (w @ rep.tv_pik_alpha)
    )
    try:
        kl_budget = float(sum(w[x] * kl_divergence(pi.probs[x], alpha.probs[x]) for x in range(n)))
    except DomainError:
        kl_budget = math.inf
    return dataclasses.replace(
        rep,
        prompt_weights=w,
        integrated_lhs=lhs,
        integrated_rhs=rhs,
        m_constant=m,
        kl_budget=kl_budget,
        vicinity=float(rep.tv_pik_alpha.max()),
    )


def bernoulli_factor(p: float, var_epsilon: float) -> float:
    """Variance factor for a Bernoulli(p) verifiable reward."""
    if var_epsilon < 0:
        raise ConfigError("var_epsilon must be >= 0")
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    # fold onto [0, 1/2]; 1 - p is exact there, which makes the factor exactly symmetric
    if p > 0.5:
        p = 1.0 - p
    s = math.sqrt(p * (1.0 - p) + var_epsilon)
    if s == 0.0:
        raise DomainError("factor is infinite: zero variance (p in {0, 1}) with var_epsilon = 0")
    return (1.0 - s) / s


def variance_factor_curve(
    var_epsilons: Iterable[float] = (0.0, 1e-6, 1e-4, 1e-2), step: float = 0.005
) -> dict[float, tuple[np.ndarray, np.ndarray]]:
    """Factor against p on a grid, per epsilon. Infinite endpoints (epsilon = 0) are dropped."""
    count = int(round(1.0 / step))
    grid = np.array([i / count for i in range(count + 1)])
    curves = {}
    for eps in var_epsilons:
        ps, vals = [], []
        for p in grid:
            try:
                vals.append(bernoulli_factor(float(p), eps))
            except DomainError:
                continue
            ps.append(float(p))
        curves[float(eps)] = (np.array(ps), np.array(vals))
    return curves


@dataclass(frozen=True, eq=False)
class BoundInstance:
    """A replayable (pi, pi_k, alpha, reward, var_epsilon) instance."""

    pi_logits: np.ndarray
    pik_logits: np.ndarray
    alpha_logits: np.ndarray
    reward_table: np.ndarray
    var_epsilon: float

    def policies(self) -> tuple[Policy, Policy, Policy]:
        return Policy(self.pi_logits), Policy(self.pik_logits), Policy(self.alpha_logits)

    def report(self) -> BoundReport:
        pi, pi_k, alpha = self.policies()
        return theorem1_report(pi, pi_k, alpha, RewardModel(self.reward_table), self.var_epsilon)

    def to_dict(self) -> dict:
        return {
            "pi_logits": np.asarray(self.pi_logits).tolist(),
            "pik_logits": np.asarray(self.pik_logits).tolist(),
            "alpha_logits": np.asarray(self.alpha_logits).tolist(),
            "reward_table": np.asarray(self.reward_table).tolist(),
            "var_epsilon": self.var_epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInstance":
        return cls(
            np.array(d["pi_logits"], dtype=np.float64),
            np.array(d["pik_logits"], dtype=np.float64),
            np.array(d["alpha_logits"], dtype=np.float64),
            np.array(d["reward_table"], dtype=np.float64),
            float(d["var_epsilon"]),
        )

    def restrict(self, prompt: int) -> "BoundInstance":
        sl = slice(prompt, prompt + 1)
        return BoundInstance(
            self.pi_logits[sl], self.pik_logits[sl], self.alpha_logits[sl], self.reward_table[sl], self.var_epsilon
        )


def random_instances(
    count: int,
    prompts: int = 4,
    responses: int = 6,
    var_epsilon: float = 1e-4,
    seed: int = 0,
    binary: bool = True,
) -> Iterator[BoundInstance]:
    """Random triples with varied logit scales, including near-identical policies."""
    for i in range(count):
        gen = RngStream(seed, (7, i)).generator()
        scale = math.exp(gen.uniform(math.log(0.05), math.log(6.0)))
        alpha = gen.normal(size=(prompts, responses)) * scale
        mode = gen.integers(3)
        if mode == 0:
            pi_k = gen.normal(size=alpha.shape) * scale
            pi = gen.normal(size=alpha.shape) * scale
        else:
            # policies in a neighbourhood of alpha, where the bound is tightest
            step = 10 ** gen.uniform(-3, 0.5)
            pi_k = alpha + step * gen.normal(size=alpha.shape)
            pi = (alpha if mode == 1 else pi_k) + step * gen.normal(size=alpha.shape)
        if binary:
            table = (gen.random((prompts, responses)) < gen.uniform(0.05, 0.95)).astype(np.float64)
        else:
            table = gen.random((prompts, responses))
        yield BoundInstance(pi, pi_k, alpha, table, var_epsilon)


@dataclass(frozen=True, eq=False)
class Counterexample:
    instance: BoundInstance
    shrunk: BoundInstance
    min_slack: float
    shrunk_slack: float

    def to_dict(self) -> dict:
        return {
            "schema": COUNTEREXAMPLE_SCHEMA,
            "version": COUNTEREXAMPLE_VERSION,
            "min_slack": self.min_slack,
            "shrunk_slack": self.shrunk_slack,
            "instance": self.instance.to_dict(),
            "shrunk": self.shrunk.to_dict(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def load_counterexample(path) -> Counterexample:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != COUNTEREXAMPLE_SCHEMA or d.get("version") != COUNTEREXAMPLE_VERSION:
        raise ValueError(f"unsupported counterexample file: schema={d.get('schema')} version={d.get('version')}")
    return Counterexample(
        BoundInstance.from_dict(d["instance"]),
        BoundInstance.from_dict(d["shrunk"]),
        float(d["min_slack"]),
        float(d["shrunk_slack"]),
    )


def _default_bound(inst: BoundInstance) -> BoundReport:
    return inst.report()


def shrink_instance(
    inst: BoundInstance, tolerance: float, bound_fn: Callable[[BoundInstance], BoundReport] = _default_bound
) -> BoundInstance:
    """Greedy coordinate shrinking that keeps ``min slack < -tolerance``."""

    def violates(candidate: BoundInstance) -> bool:
        try:
            return bound_fn(candidate).min_slack < -tolerance
        except (DomainError, RewardValidationError, ConfigError):
            return False

    worst = int(np.argmin(bound_fn(inst).slack))
    current = inst.restrict(worst) if inst.pi_logits.shape[0] > 1 else inst
    if not violates(current):
        current = inst
    names = ("pi_logits", "pik_logits", "alpha_logits", "reward_table")
    changed = True
    while changed:
        changed = False
        for name in names:
            arr = getattr(current, name)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                # each accepted move strictly simplifies a coordinate, so the loop terminates
                if name == "reward_table":
                    targets = (0.0, float(np.round(old)))
                else:
                    targets = (0.0, float(np.round(old)), float(np.round(2 * old) / 2))
                for target in targets:
                    if target == old or (target != 0.0 and abs(target) >= abs(old)):
                        continue
                    trial = arr.copy()
                    trial[idx] = target
                    candidate = dataclasses.replace(current, **{name: trial})
                    if violates(candidate):
                        current, arr, changed = candidate, trial, True
                        break
    return current


def counterexample_search(
    instances: Iterable[BoundInstance],
    tolerance: float = SLACK_TOLERANCE,
    bound_fn: Callable[[BoundInstance], BoundReport] = _default_bound,
    shrink: bool = True,
) -> list[Counterexample]:
    """Evaluate the bound on every instance and collect those with slack below ``-tolerance``."""
    if tolerance < 0:
        raise ConfigError("tolerance must be >= 0")
    found = []
    for inst in instances:
        slack = bound_fn(inst).min_slack
        if slack < -tolerance:
            small = shrink_instance(inst, tolerance, bound_fn) if shrink else inst
            found.append(Counterexample(inst, small, slack, bound_fn(small).min_slack))
    return found

"""Importance-sampled, clipped, KL-regularized and masked GRPO objectives.

Exact-mode objectives integrate over the finite response space; the sampled
objective averages over drawn groups the way a training loop does. All
objectives are maximized and return analytic gradients with respect to the
logits of the policy being optimized.

At a clip kink the gradient follows the unclipped branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .advantage import (
    DEFAULT_VAR_EPSILON,
    AdvantageField,
    GroupSampleBatch,
    exact_advantage,
    is_zero_variance,
    zero_variance_prompts,
)
from .policy_core import ConfigError, DomainError, Policy, kl_divergence
from .reward_env import RewardModel

RatioApproximation = Literal["exact_pi_k_ratio", "unit_ratio"]
DEFAULT_CLIP_EPSILON = 0.2


@dataclass(frozen=True)
class ClipParams:
    clip_epsilon: float = DEFAULT_CLIP_EPSILON
    ratio_approximation: RatioApproximation = "unit_ratio"

    def __post_init__(self):
        if not 0.0 <= self.clip_epsilon <= 1.0:
            raise ConfigError(f"clip_epsilon must lie in [0, 1], got {self.clip_epsilon}")
        if self.ratio_approximation not in ("exact_pi_k_ratio", "unit_ratio"):
            raise ConfigError(f"unknown ratio_approximation {self.ratio_approximation!r}")


@dataclass(frozen=True, eq=False)
class ObjectiveValue:
    """Objective value with its logit gradient and per-prompt decomposition.

    ``value == weights @ per_prompt``. For exact objectives the entries are
    prompts and the weights are the prompt distribution; for sampled
    objectives they are the groups of the batch with uniform weights.
    """

    value: float
    gradient: np.ndarray
    per_prompt: np.ndarray
    weights: np.ndarray


def clip_fn(r, r_ref, a, eps):
    """``min(r * a, clip(r, max(r_ref - eps, 0), r_ref + eps) * a)``, elementwise."""
    r, r_ref, a = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (r, r_ref, a)))
    clipped = np.clip(r, np.maximum(r_ref - eps, 0.0), r_ref + eps)
    out = np.minimum(r * a, clipped * a)
    return float(out) if out.ndim == 0 else out


def clip_fn_grad(r, r_ref, a, eps) -> np.ndarray:
    """Derivative of ``clip_fn`` in ``r``; ties take the unclipped branch."""
    r, r_ref, a = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (r, r_ref, a)))
    clipped = np.clip(r, np.maximum(r_ref - eps, 0.0), r_ref + eps)
    # when the clipped branch wins strictly, clip is saturated and flat in r
    return np.where(r * a <= clipped * a, a, 0.0)


def _softmax_chain(probs_row: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs_row * (grad_probs - probs_row @ grad_probs)


def _check_support(pi_row: np.ndarray, alpha_row: np.ndarray, prompt: int) -> np.ndarray:
    support = alpha_row > 0
    if np.any(pi_row[~support] > 0):
        y = int(np.flatnonzero(~support & (pi_row > 0))[0])
        raise DomainError(f"pi({y}|{prompt}) > 0 but sampling policy assigns it zero mass")
    return support


def _check_exact(adv: AdvantageField, shape) -> None:
    if adv.mode != "exact" or adv.values.shape != tuple(shape):
        raise ValueError("an exact-mode AdvantageField matching the policy shape is required")


def surrogate_plain(pi: Policy, alpha: Policy, adv: AdvantageField, prompt: int) -> float:
    """Importance-sampled expected advantage ``E_alpha[(pi / alpha) * A]``."""
    _check_exact(adv, pi.shape)
    pi_row, alpha_row = pi.probs[prompt], alpha.probs[prompt]
    s = _check_support(pi_row, alpha_row, prompt)
    ratio = pi_row[s] / alpha_row[s]
    return float(alpha_row[s] @ (ratio * adv.values[prompt, s]))


def _clipped_row(pi_row, pik_row, alpha_row, adv_row, params: ClipParams, prompt: int):
    s = _check_support(pi_row, alpha_row, prompt)
    ratio = pi_row[s] / alpha_row[s]
    if params.ratio_approximation == "unit_ratio":
        ref_ratio = np.ones_like(ratio)
    else:
        ref_ratio = pik_row[s] / alpha_row[s]
    a = adv_row[s]
    value = float(alpha_row[s] @ clip_fn(ratio, ref_ratio, a, params.clip_epsilon))
    grad_probs = np.zeros_like(pi_row)
    # d/dpi_y of alpha_y * f(pi_y / alpha_y) = f'(ratio_y)
    grad_probs[s] = clip_fn_grad(ratio, ref_ratio, a, params.clip_epsilon)
    return value, _softmax_chain(pi_row, grad_probs)


def surrogate_clipped(
    pi: Policy, pi_k: Policy, alpha: Policy, adv: AdvantageField, params: ClipParams, prompt: int
) -> float:
    """Clipped off-policy objective at one prompt; reduces to the PPO-style clip when alpha = pi_k."""
    _check_exact(adv, pi.shape)
    value, _ = _clipped_row(
        pi.probs[prompt], pi_k.probs[prompt], alpha.probs[prompt], adv.values[prompt], params, prompt
    )
    return value


def _kl_row(pi_row: np.ndarray, ref_row: np.ndarray) -> tuple[float, np.ndarray]:
    kl = kl_divergence(pi_row, ref_row)
    s = pi_row > 0
    log_ratio = np.zeros_like(pi_row)
    log_ratio[s] = np.log(pi_row[s]) - np.log(ref_row[s])
    return kl, pi_row * (log_ratio - kl)


def _weights(prompt_weights, n: int) -> np.ndarray:
    if prompt_weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(prompt_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"prompt_weights must have shape ({n},)")
    return w


def _exact_objective(pi, pi_k, alpha, ref, adv, params, beta, weights, mask) -> ObjectiveValue:
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    n = pi.prompt_count
    per_prompt = np.zeros(n)
    grad = np.zeros(pi.shape)
    for x in range(n):
        if not mask[x]:
            continue
        value, g = _clipped_row(pi.probs[x], pi_k.probs[x], alpha.probs[x], adv.values[x], params, x)
        if beta:
            kl, g_kl = _kl_row(pi.probs[x], ref.probs[x])
            value -= beta * kl
            g = g - beta * g_kl
        per_prompt[x] = value
        grad[x] = weights[x] * g
    return ObjectiveValue(float(weights @ per_prompt), grad, per_prompt, weights)


def loss_kl_regularized(
    pi: Policy,
    pi_k: Policy,
    alpha: Policy,
    ref: Policy,
    adv: AdvantageField,
    params: ClipParams,
    beta: float,
    prompt_weights=None,
) -> ObjectiveValue:
    """``E_x[clipped surrogate] - beta * E_x[KL(pi || ref)]`` with exact per-prompt KL."""
    _check_exact(adv, pi.shape)
    w = _weights(prompt_weights, pi.prompt_count)
    return _exact_objective(pi, pi_k, alpha, ref, adv, params, beta, w, np.ones(pi.prompt_count, bool))


def loss_masked(
    pi: Policy,
    pi_k: Policy,
    ref: Policy,
    reward: RewardModel,
    params: ClipParams,
    beta: float,
    var_epsilon: float = DEFAULT_VAR_EPSILON,
    prompt_weights=None,
) -> ObjectiveValue:
    """On-policy objective with prompts of zero reward variance under ``pi_k`` removed.

    Both the surrogate and the KL penalty of a masked prompt are dropped, so
    its logit row receives exactly zero gradient. Weights are not renormalized.
    """
    w = _weights(prompt_weights, pi.prompt_count)
    mask = ~zero_variance_prompts(pi_k, reward)
    adv = exact_advantage(pi_k, reward, var_epsilon, zero_variance="zero")
    return _exact_objective(pi, pi_k, pi_k, ref, adv, params, beta, w, mask)


def sampled_objective(
    pi: Policy,
    pi_k: Policy,
    alpha: Policy,
    ref: Policy,
    batches: Sequence[GroupSampleBatch],
    advantages: Sequence[AdvantageField],
    params: ClipParams,
    beta: float,
    mask_zero_variance: bool = False,
    binary: bool | None = None,
) -> ObjectiveValue:
    """Group-averaged clipped objective on drawn samples, minus beta times exact KL.

    Each batch entry contributes ``mean_i f(pi(y_i)/alpha(y_i), ref_ratio_i, A_i)``
    and entries are averaged uniformly. ``alpha`` is the policy that drew the
    samples.
    """
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    if len(batches) != len(advantages):
        raise ValueError("one AdvantageField per batch entry is required")
    count = len(batches)
    per_prompt = np.zeros(count)
    grad = np.zeros(pi.shape)
    n_resp = pi.response_count
    for b, (batch, adv) in enumerate(zip(batches, advantages)):
        if mask_zero_variance and is_zero_variance(batch, binary):
            continue
        x, ys = batch.prompt, batch.responses
        pi_row = pi.probs[x]
        alpha_y = alpha.probs[x, ys]
        if np.any(alpha_y <= 0):
            raise DomainError(f"sampled response at prompt {x} has zero mass under the sampler")
        ratio = pi_row[ys] / alpha_y
        if params.ratio_approximation == "unit_ratio":
            ref_ratio = np.ones_like(ratio)
        else:
            ref_ratio = pi_k.probs[x, ys] / alpha_y
        a = adv.values
        g = len(ys)
        value = float(np.mean(clip_fn(ratio, ref_ratio, a, params.clip_epsilon)))
        # d ratio / d logits = ratio * (onehot(y) - pi_row)
        coef = clip_fn_grad(ratio, ref_ratio, a, params.clip_epsilon) * ratio / g
        row_grad = np.bincount(ys, weights=coef, minlength=n_resp) - pi_row * coef.sum()
        if beta:
            kl, g_kl = _kl_row(pi_row, ref.probs[x])
            value -= beta * kl
            row_grad = row_grad - beta * g_kl
        per_prompt[b] = value
        grad[x] += row_grad / count
    weights = np.full(count, 1.0 / count) if count else np.zeros(0)
    return ObjectiveValue(float(weights @ per_prompt) if count else 0.0, grad, per_prompt, weights)

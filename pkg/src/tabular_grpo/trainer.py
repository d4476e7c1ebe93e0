"""Iterative GRPO with verifiable rewards on tabular policies.

The loop runs ``stages`` x ``iterations_per_stage`` iterations. Iteration k of
a stage refreshes the served (sampling) policy when ``k % v == 0``, draws a
fresh group for every batch prompt from the served policy, whitens the group
rewards, and takes ``i`` ascent steps on the clipped KL-regularized objective
with the samples held fixed. The reference policy is swapped for the current
one at the end of each stage.

Table of regimes (``v`` = server_update_period, ``i`` = sgd_iters_per_batch):

    v=1, i=1   on-policy
    v=1, i>1   sample reuse (off-policy through stale ratios)
    v>1, i=1   stale server policy, fresh samples every iteration
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .advantage import GroupSampleBatch, group_advantage, is_zero_variance
from .bounds import integrated_report
from .policy_core import ConfigError, Policy, RngStream, kl_rows, sample_from_probs, sample_group, tv_rows
from .reward_env import Environment, expected_reward, success_rates
from .surrogate import ClipParams, ObjectiveValue, sampled_objective

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
CHECKPOINT_SCHEMA = "tabular_grpo.train_state"
CHECKPOINT_VERSION = 1

# stream-id tags keep the batch, group and evaluation streams disjoint
_BATCH_STREAM = 1
_GROUP_STREAM = 2
_EVAL_STREAM = 3


@dataclass(frozen=True)
class TrainerConfig:
    stages: int = 1
    iterations_per_stage: int = 100
    server_update_period: int = 1
    sgd_iters_per_batch: int = 1
    group_size: int = 16
    batch_prompts: int = 8
    batch_mode: Literal["iid", "sweep"] = "iid"
    learning_rate: float = 0.05
    optimizer: Literal["sgd", "adam"] = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_epsilon: float = 0.2
    var_epsilon: float = 1e-4
    beta: float = 0.1
    mask_zero_variance: bool = False
    ratio_approximation: Literal["exact_pi_k_ratio", "unit_ratio"] = "unit_ratio"
    std_divisor: Literal["population", "sample"] = "population"
    seed: int = 0
    temperature: float = 1.0
    bound_probe_period: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        for name in ("stages", "iterations_per_stage", "server_update_period", "sgd_iters_per_batch", "batch_prompts"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.server_update_period > 1 and self.sgd_iters_per_batch > 1:
            raise ConfigError(
                "server_update_period > 1 together with sgd_iters_per_batch > 1 is not one of the "
                "supported regimes (v=1,i=1), (v=1,i>1), (v>1,i=1)"
            )
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("learning_rate must be finite and >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_mode not in ("iid", "sweep"):
            raise ConfigError(f"unknown batch_mode {self.batch_mode!r}")
        if self.std_divisor not in ("population", "sample"):
            raise ConfigError(f"unknown std_divisor {self.std_divisor!r}")
        if not 0 < self.var_epsilon < 1:
            raise ConfigError("var_epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.bound_probe_period < 0:
            raise ConfigError("bound_probe_period must be >= 0")
        ClipParams(self.clip_epsilon, self.ratio_approximation)

    @property
    def regime(self) -> str:
        v, i = self.server_update_period, self.sgd_iters_per_batch
        if v == 1 and i == 1:
            return "on_policy"
        return "sample_reuse" if v == 1 else "stale_server"

    @property
    def clip_params(self) -> ClipParams:
        return ClipParams(self.clip_epsilon, self.ratio_approximation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    """Everything needed to resume training bit-for-bit.

    ``stage`` and ``iteration`` count completed stages and completed
    iterations within the current stage.
    """

    theta: np.ndarray
    theta_old: np.ndarray
    ref: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    optimizer_steps: int = 0
    stage: int = 0
    iteration: int = 0
    global_iteration: int = 0
    sample_draws: int = 0

    @classmethod
    def initial(cls, policy: Policy) -> "TrainState":
        theta = np.array(policy.logits, dtype=np.float64)
        zeros = np.zeros_like(theta)
        return cls(theta.copy(), theta.copy(), theta.copy(), zeros.copy(), zeros.copy())

    def copy(self) -> "TrainState":
        return dataclasses.replace(
            self,
            **{k: getattr(self, k).copy() for k in ("theta", "theta_old", "ref", "adam_m", "adam_v")},
        )

    def to_dict(self) -> dict:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "version": CHECKPOINT_VERSION,
            **{k: getattr(self, k).tolist() for k in ("theta", "theta_old", "ref", "adam_m", "adam_v")},
            **{k: getattr(self, k) for k in ("optimizer_steps", "stage", "iteration", "global_iteration", "sample_draws")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        if d.get("schema") != CHECKPOINT_SCHEMA or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint: schema={d.get('schema')} version={d.get('version')}")
        arrays = {k: np.array(d[k], dtype=np.float64) for k in ("theta", "theta_old", "ref", "adam_m", "adam_v")}
        ints = {k: int(d[k]) for k in ("optimizer_steps", "stage", "iteration", "global_iteration", "sample_draws")}
        return cls(**arrays, **ints)


def save_checkpoint(state: TrainState, path, config: TrainerConfig | None = None) -> Path:
    path = Path(path)
    payload = state.to_dict()
    if config is not None:
        payload["trainer_config"] = config.to_dict()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    return TrainState.from_dict(json.loads(Path(path).read_text()))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: TrainState, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.checkpoint_path = checkpoint_path


@dataclass
class IterationContext:
    """Snapshot handed to ``train``'s callback after every iteration."""

    state: TrainState
    theta_before: np.ndarray
    theta_old: np.ndarray
    ref: np.ndarray
    batches: list[GroupSampleBatch]
    advantages: list
    objectives: list[ObjectiveValue]
    record: dict


@dataclass
class TrainResult:
    policy: Policy
    trace: list[dict]
    state: TrainState
    completed: bool = True


def staleness_probe(state: TrainState, prompt_weights=None) -> dict:
    """Exact TV(theta_old, theta) and KL(theta || theta_old), averaged over prompts."""
    served, current = Policy(state.theta_old), Policy(state.theta)
    n = served.prompt_count
    w = np.full(n, 1.0 / n) if prompt_weights is None else np.asarray(prompt_weights)
    tv = tv_rows(served.probs, current.probs)
    kl = kl_rows(current.probs, served.probs)
    return {"staleness_tv": float(w @ tv), "staleness_kl": float(w @ kl), "staleness_tv_max": float(tv.max())}


def _draw_batch(config: TrainerConfig, env: Environment, step: int) -> np.ndarray:
    n = env.prompt_count
    if config.batch_mode == "sweep":
        start = step * config.batch_prompts
        return np.arange(start, start + config.batch_prompts) % n
    gen = RngStream(config.seed, (_BATCH_STREAM, step)).generator()
    return gen.choice(n, size=config.batch_prompts, replace=True, p=env.prompts.prompt_weights)


class _Optimizer:
    def __init__(self, config: TrainerConfig):
        self.config = config

    def step(self, state: TrainState, grad: np.ndarray) -> np.ndarray:
        c = self.config
        if c.optimizer == "sgd":
            return state.theta + c.learning_rate * grad
        state.optimizer_steps += 1
        t = state.optimizer_steps
        state.adam_m = c.adam_beta1 * state.adam_m + (1 - c.adam_beta1) * grad
        state.adam_v = c.adam_beta2 * state.adam_v + (1 - c.adam_beta2) * grad * grad
        m_hat = state.adam_m / (1 - c.adam_beta1**t)
        v_hat = state.adam_v / (1 - c.adam_beta2**t)
        return state.theta + c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def train(
    config: TrainerConfig,
    env: Environment,
    initial: Policy,
    resume: TrainState | None = None,
    sink: Callable[[dict], None] | None = None,
    callback: Callable[[IterationContext], None] | None = None,
    stop_after: int | None = None,
    checkpoint_path=None,
) -> TrainResult:
    """Run the iterative GRPO loop.

    ``stop_after`` halts once that many global iterations are complete (for
    checkpoint/resume). If the policy or mean reward turns non-finite the run
    aborts with :class:`TrainingDiverged` carrying the last good state, also
    written to ``checkpoint_path`` when given.
    """
    if initial.shape != env.reward.shape:
        raise ConfigError(f"initial policy shape {initial.shape} does not match env {env.reward.shape}")
    state = resume.copy() if resume is not None else TrainState.initial(initial)
    opt = _Optimizer(config)
    params = config.clip_params
    weights = env.prompts.prompt_weights
    reward = env.reward
    trace: list[dict] = []
    start = time.perf_counter()

    while state.stage < config.stages:
        while state.iteration < config.iterations_per_stage:
            if stop_after is not None and state.global_iteration >= stop_after:
                return TrainResult(Policy(state.theta), trace, state, completed=False)
            last_good = state.copy()
            k = state.iteration + 1
            step = state.global_iteration
            prompts = _draw_batch(config, env, step)
            if k % config.server_update_period == 0:
                state.theta_old = state.theta.copy()
            stale = staleness_probe(state, weights)

            served = Policy(state.theta_old)
            batches, advantages = [], []
            for j, x in enumerate(prompts):
                ys = sample_group(
                    served, int(x), config.group_size, RngStream(config.seed, (_GROUP_STREAM, step, j)), config.temperature
                )
                batch = GroupSampleBatch.from_reward(reward, int(x), ys)
                batches.append(batch)
                advantages.append(group_advantage(batch, config.var_epsilon, config.std_divisor))
            state.sample_draws += 1

            theta_before = state.theta.copy()
            pi_k = Policy(theta_before)
            ref = Policy(state.ref)
            objectives = []
            for _ in range(config.sgd_iters_per_batch):
                obj = sampled_objective(
                    Policy(state.theta), pi_k, served, ref, batches, advantages, params, config.beta,
                    config.mask_zero_variance, reward.is_binary,
                )
                objectives.append(obj)
                new_theta = opt.step(state, obj.gradient)
                if not np.all(np.isfinite(new_theta)):
                    _abort(last_good, checkpoint_path, config, f"non-finite logits at step {step}")
                state.theta = new_theta

            current = Policy(state.theta)
            mean_reward = expected_reward(current, env)
            if not math.isfinite(mean_reward):
                _abort(last_good, checkpoint_path, config, f"non-finite mean reward at step {step}")

            masked = [config.mask_zero_variance and is_zero_variance(b, reward.is_binary) for b in batches]
            record = {
                "schema_version": METRICS_SCHEMA_VERSION,
                "stage": state.stage + 1,
                "iteration": k,
                "step": step + 1,
                "mean_reward": mean_reward,
                "batch_reward": float(np.mean([b.rewards.mean() for b in batches])),
                "objective": objectives[0].value,
                "mean_abs_advantage": float(np.mean([np.abs(a.values).mean() for a in advantages])),
                **{k_: v for k_, v in stale.items() if k_ != "staleness_tv_max"},
                "masked_fraction": float(np.mean(masked)),
                "sample_draws": state.sample_draws,
                "server_refreshed": bool(k % config.server_update_period == 0),
                "bound_slack": None,
            }
            if config.bound_probe_period and (step + 1) % config.bound_probe_period == 0:
                rep = integrated_report(current, pi_k, served, reward, config.var_epsilon, weights)
                record["bound_slack"] = rep.integrated_slack
            if config.record_wall_time:
                record["wall_time"] = time.perf_counter() - start

            state.iteration += 1
            state.global_iteration += 1
            if callback is not None:
                # the callback may add fields to the record before it is emitted
                callback(IterationContext(state, theta_before, served.logits, state.ref, batches, advantages, objectives, record))
            trace.append(record)
            if sink is not None:
                sink(record)
        state.ref = state.theta.copy()
        state.stage += 1
        state.iteration = 0
        log.debug("stage %d done, mean reward %.4f", state.stage, expected_reward(Policy(state.theta), env))

    return TrainResult(Policy(state.theta), trace, state)


def _abort(last_good: TrainState, checkpoint_path, config: TrainerConfig, message: str):
    path = None
    if checkpoint_path is not None:
        path = save_checkpoint(last_good, checkpoint_path, config)
    raise TrainingDiverged(message, last_good, path)


def evaluate_pass_at_1(policy: Policy, env: Environment, samples_per_prompt: int, rng: RngStream) -> dict:
    """Sampled success frequency per prompt next to the exact success rate.

    For non-binary rewards the sampled statistic is the mean reward and
    ``binary`` is False in the output.
    """
    if samples_per_prompt < 1:
        raise ConfigError("samples_per_prompt must be >= 1")
    if policy.shape != env.reward.shape:
        raise ConfigError("policy and environment shapes differ")
    binary = env.reward.is_binary
    per_prompt = np.empty(env.prompt_count)
    for x in range(env.prompt_count):
        ys = sample_from_probs(policy.probs[x], samples_per_prompt, rng.child(_EVAL_STREAM, x))
        per_prompt[x] = env.reward.lookup(x, ys).mean()
    exact = success_rates(policy, env.reward)
    w = env.prompts.prompt_weights
    return {
        "per_prompt": per_prompt,
        "mean": float(w @ per_prompt),
        "exact_per_prompt": exact,
        "exact_mean": float(w @ exact),
        "binary": binary,
        "samples_per_prompt": samples_per_prompt,
    }

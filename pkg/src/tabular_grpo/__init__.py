"""Group relative policy optimization on tabular softmax policies."""

from .advantage import AdvantageField, GroupSampleBatch, RewardStats, exact_advantage, group_advantage
from .bounds import BoundReport, corollary_report, integrated_report, theorem1_report
from .policy_core import ConfigError, DomainError, Policy, PromptSpace, ResponseSpace, RngStream
from .reward_env import Environment, RewardModel, make_bernoulli_env
from .surrogate import ClipParams, loss_kl_regularized, loss_masked, sampled_objective
from .trainer import TrainerConfig, TrainState, train

__all__ = [
    "AdvantageField",
    "BoundReport",
    "ClipParams",
    "ConfigError",
    "DomainError",
    "Environment",
    "GroupSampleBatch",
    "Policy",
    "PromptSpace",
    "ResponseSpace",
    "RewardModel",
    "RewardStats",
    "RngStream",
    "TrainState",
    "TrainerConfig",
    "corollary_report",
    "exact_advantage",
    "group_advantage",
    "integrated_report",
    "loss_kl_regularized",
    "loss_masked",
    "make_bernoulli_env",
    "sampled_objective",
    "theorem1_report",
    "train",
]

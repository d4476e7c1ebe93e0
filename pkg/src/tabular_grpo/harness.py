"""Experiment configuration, run orchestration and run comparison.

Config files are INI-style ``key = value`` documents with four sections::

    [run]          label, output_dir
    [environment]  kind = bernoulli | sequence, plus the environment's fields
    [trainer]      any TrainerConfig field
    [evaluation]   pass_at_1_samples, eval_period, eval_seed

Values are JSON literals (``0.05``, ``true``, ``[0.2, 0.5]``, ``"adam"``);
bare words are read as strings. Every file a run writes carries a schema
version; see ``FORMATS.md``.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import difflib
import io
import json
import os
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .policy_core import ConfigError, Policy, RngStream
from .reward_env import Environment, SequenceTask, expected_reward, make_bernoulli_env
from .trainer import (
    METRICS_SCHEMA_VERSION,
    IterationContext,
    TrainerConfig,
    TrainingDiverged,
    evaluate_pass_at_1,
    load_checkpoint,
    save_checkpoint,
    train,
)

OUTPUT_DIR_ENV = "TABULAR_GRPO_OUTPUT_DIR"
CONFIG_ECHO = "config.resolved.ini"
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.csv"
CHECKPOINT_FILE = "checkpoint.json"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_AMBIGUOUS = {"epsilon": ("clip_epsilon", "var_epsilon"), "eps": ("clip_epsilon", "var_epsilon", "adam_eps")}


class ConfigValidationError(ConfigError):
    pass


@dataclass(frozen=True)
class EnvironmentSpec:
    kind: str = "bernoulli"
    responses_per_prompt: int = 8
    success_probs: list | None = None
    prompt_count: int = 16
    success_range: list = field(default_factory=lambda: [0.2, 0.5])
    env_seed: int = 0
    prompt_weights: list | None = None
    alphabet_size: int = 4
    sequence_length: int = 3
    targets: list = field(default_factory=lambda: [3, 4, 5])

    def __post_init__(self):
        if self.kind not in ("bernoulli", "sequence"):
            raise ConfigValidationError(f"environment.kind must be 'bernoulli' or 'sequence', got {self.kind!r}")
        lo, hi = self.success_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigValidationError("environment.success_range must satisfy 0 <= lo <= hi <= 1")

    def build(self) -> tuple[Environment, Policy]:
        if self.kind == "sequence":
            task = SequenceTask(self.alphabet_size, self.sequence_length, tuple(self.targets))
            env = task.compile(self.prompt_weights)
            return env, Policy.uniform(env.prompt_count, env.response_count)
        if self.success_probs is not None:
            probs = np.asarray(self.success_probs, dtype=np.float64)
        else:
            gen = RngStream(self.env_seed, (0,)).generator()
            probs = gen.uniform(self.success_range[0], self.success_range[1], self.prompt_count)
        return make_bernoulli_env(probs, self.responses_per_prompt, RngStream(self.env_seed, (1,)), self.prompt_weights)


@dataclass(frozen=True)
class EvaluationSpec:
    pass_at_1_samples: int = 50
    eval_period: int = 0
    eval_seed: int = 1234

    def __post_init__(self):
        if self.pass_at_1_samples < 1:
            raise ConfigValidationError("evaluation.pass_at_1_samples must be >= 1")
        if self.eval_period < 0:
            raise ConfigValidationError("evaluation.eval_period must be >= 0")


@dataclass(frozen=True)
class RunSpec:
    label: str = "run"
    output_dir: str = "runs/run"


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSpec
    environment: EnvironmentSpec
    trainer: TrainerConfig
    evaluation: EvaluationSpec

    def with_output_dir(self, output_dir: str) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, output_dir=str(output_dir)))


_SECTIONS = {
    "run": RunSpec,
    "environment": EnvironmentSpec,
    "trainer": TrainerConfig,
    "evaluation": EvaluationSpec,
}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _format_value(value: Any) -> str:
    return json.dumps(value)


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return n
    return None


def _where(text: str, section: str, key: str | None = None) -> str:
    line = _line_of(text, section, key)
    loc = f"[{section}]" + (f" {key}" if key else "")
    return f"line {line}: {loc}" if line else loc


def _unknown_key_message(section: str, key: str, allowed: list[str]) -> str:
    if key in _AMBIGUOUS:
        options = " or ".join(f"'{k}'" for k in _AMBIGUOUS[key])
        return f"unknown key '{key}' in [{section}] is ambiguous; did you mean {options}?"
    close = difflib.get_close_matches(key, allowed, n=3)
    hint = f"; did you mean {', '.join(repr(c) for c in close)}?" if close else ""
    return f"unknown key '{key}' in [{section}]{hint}"


def _apply_overrides(parser: configparser.ConfigParser, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
        else:
            owners = [s for s, cls in _SECTIONS.items() if _has_field(cls, key)]
            if len(owners) != 1:
                raise ConfigValidationError(f"--set key {key!r} must be qualified as section.key")
            section, name = owners[0], key
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())


def _has_field(cls, key: str) -> bool:
    return key in {f.name for f in dataclasses.fields(cls)}


def parse_config(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigValidationError(f"cannot parse config: {exc}") from exc
    _apply_overrides(parser, overrides or [])
    for section in parser.sections():
        if section not in _SECTIONS:
            close = difflib.get_close_matches(section, list(_SECTIONS), n=1)
            hint = f"; did you mean [{close[0]}]?" if close else ""
            raise ConfigValidationError(f"{_where(text, section)}: unknown section{hint}")
    built = {}
    for section, cls in _SECTIONS.items():
        allowed = [f.name for f in dataclasses.fields(cls) if f.init]
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in allowed:
                    raise ConfigValidationError(
                        f"{_where(text, section, key)}: {_unknown_key_message(section, key, allowed)}"
                    )
                kwargs[key] = _parse_value(raw)
        try:
            built[section] = cls(**kwargs)
        except (ConfigError, TypeError, ValueError) as exc:
            bad = next((k for k in kwargs if k in str(exc)), None)
            raise ConfigValidationError(f"{_where(text, section, bad)}: {exc}") from exc
    config = ExperimentConfig(**built)
    env_override = os.environ.get(OUTPUT_DIR_ENV)
    if env_override:
        config = config.with_output_dir(env_override)
    return config


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def dump_config(config: ExperimentConfig) -> str:
    """Render every field, defaults included, so the echo replays the run exactly."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in _SECTIONS:
        obj = getattr(config, section)
        parser.add_section(section)
        for f in dataclasses.fields(obj):
            if f.init:
                parser.set(section, f.name, _format_value(getattr(obj, f.name)))
    buf = io.StringIO()
    buf.write(f"# tabular_grpo resolved config, schema {METRICS_SCHEMA_VERSION}\n")
    parser.write(buf)
    return buf.getvalue()


def _summary_rows(config: ExperimentConfig, trace: list[dict], initial_reward: float, evaluation: dict) -> list[dict]:
    rewards = [r["mean_reward"] for r in trace]
    t = config.trainer
    return [
        {
            "label": config.run.label,
            "regime": t.regime,
            "v": t.server_update_period,
            "i": t.sgd_iters_per_batch,
            "stages": t.stages,
            "iterations": len(trace),
            "initial_mean_reward": initial_reward,
            "final_mean_reward": rewards[-1] if rewards else initial_reward,
            "min_mean_reward": min(rewards) if rewards else initial_reward,
            "max_mean_reward": max(rewards) if rewards else initial_reward,
            "median_mean_reward": statistics.median(rewards) if rewards else initial_reward,
            "mean_mean_reward": statistics.fmean(rewards) if rewards else initial_reward,
            "pass_at_1": evaluation["mean"],
            "exact_success_rate": evaluation["exact_mean"],
        }
    ]


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def execute(config: ExperimentConfig) -> int:
    """Run one experiment and write its artifacts. Returns a process exit status."""
    out = Path(config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    env, initial = config.environment.build()
    (out / CONFIG_ECHO).write_text(dump_config(config))
    ev = config.evaluation

    def with_eval(ctx: IterationContext) -> None:
        if ev.eval_period and ctx.record["step"] % ev.eval_period == 0:
            res = evaluate_pass_at_1(
                Policy(ctx.state.theta), env, ev.pass_at_1_samples, RngStream(ev.eval_seed, (ctx.record["step"],))
            )
            ctx.record["pass_at_1"] = res["mean"]

    with (out / METRICS_FILE).open("w") as fh:

        def sink(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

        try:
            result = train(
                config.trainer, env, initial, sink=sink, callback=with_eval, checkpoint_path=out / CHECKPOINT_FILE
            )
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}; last good state in {exc.checkpoint_path}")
            return EXIT_DIVERGED
    save_checkpoint(result.state, out / CHECKPOINT_FILE, config.trainer)
    final_eval = evaluate_pass_at_1(result.policy, env, ev.pass_at_1_samples, RngStream(ev.eval_seed, (0,)))
    _write_csv(out / SUMMARY_FILE, _summary_rows(config, result.trace, expected_reward(initial, env), final_eval))
    return EXIT_OK


def run(config_path, overrides: list[str] | None = None) -> int:
    try:
        config = load_config(config_path, overrides)
        config.environment.build()
    except ConfigError as exc:
        print(f"config error: {exc}")
        return EXIT_CONFIG
    return execute(config)


def read_metrics(path) -> list[dict]:
    """Load a metrics file, rejecting records from other schema versions."""
    records = []
    with Path(path).open() as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema_version") != METRICS_SCHEMA_VERSION:
                raise ValueError(f"{path}:{n}: unsupported metrics schema version {rec.get('schema_version')!r}")
            records.append(rec)
    return records


def _metrics_path(run_dir) -> Path:
    p = Path(run_dir)
    return p / METRICS_FILE if p.is_dir() else p


def _run_label(run_dir) -> str:
    echo = Path(run_dir) / CONFIG_ECHO
    if echo.exists():
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(echo.read_text())
        if parser.has_option("run", "label"):
            return str(_parse_value(parser.get("run", "label")))
    return Path(run_dir).name


def compare(run_dirs: list, metric: str = "mean_reward") -> list[dict]:
    """Min / max / median / mean of ``metric`` per run."""
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    runs = [(_run_label(d), read_metrics(_metrics_path(d))) for d in run_dirs]
    available = None
    for _, recs in runs:
        keys = {k for r in recs for k, v in r.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}
        available = keys if available is None else available & keys
    if metric not in (available or set()):
        raise ConfigError(f"metric {metric!r} is not shared by all runs; available: {', '.join(sorted(available or []))}")
    rows = []
    for label, recs in runs:
        vals = [r[metric] for r in recs if r.get(metric) is not None]
        rows.append(
            {
                "run": label,
                "min": min(vals),
                "max": max(vals),
                "median": statistics.median(vals),
                "mean": statistics.fmean(vals),
            }
        )
    return rows


def format_table(rows: list[dict], metric: str) -> str:
    header = [f"run/{metric}", "Min", "Max", "Median", "Mean"]
    body = [[r["run"]] + [f"{r[k]:.4f}" for k in ("min", "max", "median", "mean")] for r in rows]
    widths = [max(len(str(row[c])) for row in [header] + body) for c in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [str(row[0]).ljust(widths[0])] + [str(v).rjust(w) for v, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def evaluate_checkpoint(checkpoint, samples: int, config_path=None, seed: int = 0) -> dict:
    checkpoint = Path(checkpoint)
    config_path = Path(config_path) if config_path else checkpoint.parent / CONFIG_ECHO
    config = load_config(config_path)
    env, _ = config.environment.build()
    state = load_checkpoint(checkpoint)
    res = evaluate_pass_at_1(Policy(state.theta), env, samples, RngStream(seed, (0,)))
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in res.items()}

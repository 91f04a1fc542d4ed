"""
Experiment Config
=================
JSON experiment files parsed into an ExperimentConfig with exhaustive validation:
unknown keys, wrong types and out-of-range values raise ConfigError naming the key.

Machine-level defaults come from the project-root .env:
    DEVI_OUTPUT_DIR   default output directory (used when the JSON has no output_dir)
    DEVI_PARALLEL     default worker count for seed fan-out
    DEVI_GLYPH_DIR    optional PGM glyph directory; procedural glyphs otherwise
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from dotenv import load_dotenv

from devi_model import DEFAULT_TEMPERATURE, PlannerConfig
from diffkit import ENCODER_DESCRIPTORS
from graph_world import DEFAULT_NOISE_RATE, DEFAULT_TREE_DEPTH, SPLITS, Prototype, parse_prototype
from train_loop import TrainSchedule
from transfer_eval import EvaluationProtocol

# Load environment variables from project root
load_dotenv(os.path.join(os.path.dirname(__file__), '..', '.env'))

MODELS = ("devi", "dqn")
DEFAULT_OUTPUT_DIR = "runs"


class ConfigError(ValueError):
    """Invalid experiment configuration; `key` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"Config key '{key}': {message}")
        self.key = key


def env_output_dir() -> str:
    return os.getenv("DEVI_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR


def env_parallel() -> int:
    raw = os.getenv("DEVI_PARALLEL")
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError("DEVI_PARALLEL", f"expected an integer, got '{raw}'") from None
    if value < 1:
        raise ConfigError("DEVI_PARALLEL", f"must be >= 1, got {value}")
    return value


def env_glyph_dir() -> Optional[str]:
    return os.getenv("DEVI_GLYPH_DIR") or None


@dataclass
class ExperimentConfig:
    model: str = "devi"
    train_prototypes: list = field(default_factory=lambda: ["Ring"])
    transfer_prototypes: list = field(default_factory=lambda: ["Ring", "HardRing", "Tree"])
    transfer_split: str = "test"
    encoder: str = "small_mlp"
    burn_in: int = 1000
    minibatch_size: int = 100
    total_minibatches: int = 2000
    switch_every: int = 1
    store_size: int = 50
    sweeps: int = 10
    gamma: float = 0.9
    temperature: float = DEFAULT_TEMPERATURE
    learning_rate: float = 1e-3
    replay_capacity: int = 100_000
    target_sync_period: int = 100
    double_dqn: bool = False
    block_target_gradients: bool = True
    eval_every: int = 50
    eval_episodes: int = 100
    transfer_attempts: int = 5
    samples_per_pair: int = 5
    noise_rate: float = DEFAULT_NOISE_RATE
    tree_depth: int = DEFAULT_TREE_DEPTH
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    output_dir: str = field(default_factory=env_output_dir)
    log_every: int = 100
    relearn: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(
            burn_in=self.burn_in, minibatch_size=self.minibatch_size,
            total_minibatches=self.total_minibatches, switch_every=self.switch_every,
            store_size=self.store_size, sweeps=self.sweeps, gamma=self.gamma, seed=seed,
            encoder=self.encoder, learning_rate=self.learning_rate,
            replay_capacity=self.replay_capacity, target_sync_period=self.target_sync_period,
            eval_every=self.eval_every, eval_episodes=self.eval_episodes,
            temperature=self.temperature, block_target_gradients=self.block_target_gradients,
            double_dqn=self.double_dqn, log_every=self.log_every,
        )

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(gamma=self.gamma, sweeps=self.sweeps, store_size=self.store_size,
                             temperature=self.temperature,
                             block_target_gradients=self.block_target_gradients)

    def protocol(self) -> EvaluationProtocol:
        return EvaluationProtocol(episodes=self.eval_episodes, samples_per_pair=self.samples_per_pair,
                                  gamma=self.gamma, planner=self.planner_config())


# ── Validation ──

def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v):
    return (isinstance(v, (int, float))) and not isinstance(v, bool)


def _check_prototypes(key, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, "expected a non-empty list of prototype names")
    for name in value:
        try:
            parse_prototype(name)
        except ValueError:
            raise ConfigError(key, f"unknown prototype '{name}'. "
                                   f"Expected one of {[p.value for p in Prototype]}") from None


def _check_choice(choices):
    def check(key, value):
        if value not in choices:
            raise ConfigError(key, f"'{value}' is not one of {list(choices)}")
    return check


def _check_int(minimum):
    def check(key, value):
        if not _is_int(value):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        if value < minimum:
            raise ConfigError(key, f"must be >= {minimum}, got {value}")
    return check


def _check_float(low, high, low_open=False):
    def check(key, value):
        if not _is_number(value):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if value > high or value < low or (low_open and value == low):
            bracket = "(" if low_open else "["
            raise ConfigError(key, f"must be in {bracket}{low}, {high}], got {value}")
    return check


def _check_bool(key, value):
    if not isinstance(value, bool):
        raise ConfigError(key, f"expected true/false, got {value!r}")


def _check_seeds(key, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, "expected a non-empty list of seeds")
    for seed in value:
        if not _is_int(seed) or seed < 0:
            raise ConfigError(key, f"seeds must be non-negative integers, got {seed!r}")
    if len(set(value)) != len(value):
        raise ConfigError(key, "seeds must be unique")


def _check_path(key, value):
    if not isinstance(value, str) or not value:
        raise ConfigError(key, f"expected a non-empty path string, got {value!r}")


_VALIDATORS = {
    "model": _check_choice(MODELS),
    "train_prototypes": _check_prototypes,
    "transfer_prototypes": _check_prototypes,
    "transfer_split": _check_choice(SPLITS),
    "encoder": _check_choice(ENCODER_DESCRIPTORS),
    "burn_in": _check_int(1),
    "minibatch_size": _check_int(1),
    "total_minibatches": _check_int(0),
    "switch_every": _check_int(1),
    "store_size": _check_int(1),
    "sweeps": _check_int(1),
    "gamma": _check_float(0.0, 1.0, low_open=True),
    "temperature": _check_float(0.0, float("inf"), low_open=True),
    "learning_rate": _check_float(0.0, float("inf"), low_open=True),
    "replay_capacity": _check_int(1),
    "target_sync_period": _check_int(1),
    "double_dqn": _check_bool,
    "block_target_gradients": _check_bool,
    "eval_every": _check_int(0),
    "eval_episodes": _check_int(1),
    "transfer_attempts": _check_int(1),
    "samples_per_pair": _check_int(1),
    "noise_rate": _check_float(0.0, 0.5),
    "tree_depth": _check_int(1),
    "seeds": _check_seeds,
    "output_dir": _check_path,
    "log_every": _check_int(1),
    "relearn": _check_bool,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, f"unknown key. Valid keys: {sorted(known)}")
    for key, value in data.items():
        _VALIDATORS[key](key, value)
    config = ExperimentConfig(**data)
    if config.burn_in < config.minibatch_size:
        raise ConfigError("burn_in", f"must be >= minibatch_size ({config.minibatch_size}), "
                                     f"got {config.burn_in}")
    if config.model == "dqn" and config.replay_capacity < config.minibatch_size:
        raise ConfigError("replay_capacity", f"must be >= minibatch_size ({config.minibatch_size})")
    return config


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Parse and validate a JSON experiment file; None gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError("--config", f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"invalid JSON in {path}: {e}") from None
    return config_from_dict(data)


def ensure_output_dir(path: str) -> str:
    """Create `path` if needed and check that it is writable."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError("output_dir", f"cannot create {path}: {e}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError("output_dir", f"{path} is not writable")
    return path

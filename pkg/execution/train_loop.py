"""
Train Loop
==========
Training drivers for both agents plus the metrics sink they log into.

  train_devi  interleaved multi-task training: every `switch_every` minibatches a
              fresh task is sampled, its small buffer burned in with a uniform
              random policy, then each step subsamples a store, draws a minibatch
              and takes one ADAM step on the multi-horizon loss.
  train_dqn   single fixed task: the replay buffer is filled to capacity before
              learning, then minibatch TD updates with periodic target syncs.

Every random draw comes from a per-purpose stream derived from the schedule seed,
so collection is identical across agents for matched seeds and a run's metrics are
a pure function of (seed, schedule, task stream).
"""

import csv
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from devi_model import DEFAULT_TEMPERATURE, PlannerConfig, multi_horizon_loss, subsample_store
from diffkit import AdamState, BoundEncoder, EncoderParams, Tape, adam_step, build_encoder
from dqn_baseline import (
    DEFAULT_TARGET_SYNC_PERIOD, BoundDqn, DqnParams, TargetNetwork, dqn_td_loss, init_dqn,
    sync_target,
)
from graph_world import DEFAULT_TREE_DEPTH, GlyphLibrary, GraphWorldEnv, TaskSpec, make_task, parse_prototype
from replay_buffer import DEFAULT_CAPACITY, ReplayBuffer, collect, uniform_random_policy
from transfer_eval import EvaluationProtocol, evaluate_devi, evaluate_dqn

STREAMS = ("init", "collect", "sample", "eval", "tasks")
METRICS_COLUMNS = ["run_id", "phase", "step", "task_prototype", "task_seed", "loss",
                   "return_mean", "return_std", "oracle_norm", "env_steps"]


def seed_streams(seed: int) -> dict:
    """Independent generators per purpose; the same seed gives the same streams."""
    return {name: np.random.default_rng(np.random.SeedSequence([int(seed), i]))
            for i, name in enumerate(STREAMS)}


@dataclass
class TrainSchedule:
    burn_in: int = 1000
    minibatch_size: int = 100
    total_minibatches: int = 2000
    switch_every: int = 1
    store_size: int = 50
    sweeps: int = 10
    gamma: float = 0.9
    seed: int = 0
    encoder: str = "small_mlp"
    learning_rate: float = 1e-3
    replay_capacity: int = DEFAULT_CAPACITY
    target_sync_period: int = DEFAULT_TARGET_SYNC_PERIOD
    eval_every: int = 50
    eval_episodes: int = 10
    temperature: float = DEFAULT_TEMPERATURE
    block_target_gradients: bool = True
    double_dqn: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be >= 1, got {self.minibatch_size}")
        if self.burn_in < self.minibatch_size:
            raise ValueError(f"burn_in ({self.burn_in}) must be >= minibatch_size ({self.minibatch_size})")
        if self.total_minibatches < 0:
            raise ValueError(f"total_minibatches must be >= 0, got {self.total_minibatches}")
        if self.switch_every < 1:
            raise ValueError(f"switch_every must be >= 1, got {self.switch_every}")
        if self.target_sync_period < 1:
            raise ValueError(f"target_sync_period must be >= 1, got {self.target_sync_period}")

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(gamma=self.gamma, sweeps=self.sweeps, store_size=self.store_size,
                             temperature=self.temperature,
                             block_target_gradients=self.block_target_gradients)

    def evaluation_protocol(self) -> EvaluationProtocol:
        return EvaluationProtocol(episodes=self.eval_episodes, gamma=self.gamma,
                                  planner=self.planner_config())


# ── Metrics ──

@dataclass
class MetricsRow:
    run_id: str
    phase: str
    step: int
    task_prototype: str
    task_seed: int
    loss: Optional[float] = None
    return_mean: Optional[float] = None
    return_std: Optional[float] = None
    oracle_norm: Optional[float] = None
    env_steps: int = 0

    def as_csv_row(self) -> list:
        def fmt(x):
            if x is None:
                return ""
            return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)
        return [fmt(getattr(self, name)) for name in METRICS_COLUMNS]


class MetricsSink:
    """Thread-safe row collector; the only object shared between worker threads."""

    def __init__(self):
        self._rows: list = []
        self._lock = threading.Lock()

    def append(self, row: MetricsRow) -> None:
        with self._lock:
            self._rows.append(row)

    def rows(self, run_id: Optional[str] = None) -> list:
        with self._lock:
            rows = list(self._rows)
        return [r for r in rows if run_id is None or r.run_id == run_id]

    def __len__(self):
        with self._lock:
            return len(self._rows)


def write_metrics_csv(path: str, rows: list, extra_columns: Optional[list] = None,
                      extras: Optional[list] = None) -> None:
    """Rows in the order given; `extras[i]` holds values for `extra_columns` of rows[i]."""
    extra_columns = extra_columns or []
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS + extra_columns)
        for i, row in enumerate(rows):
            values = row.as_csv_row()
            if extra_columns:
                values += [str(v) for v in extras[i]]
            writer.writerow(values)


def write_horizon_csv(path: str, run_id: str, horizon_errors: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["run_id", "step", "horizon", "squared_error"])
        for step, errors in enumerate(horizon_errors, start=1):
            for horizon, value in enumerate(errors, start=1):
                writer.writerow([run_id, step, horizon, repr(float(value))])


@dataclass
class TrainResult:
    params: object
    rows: list = field(default_factory=list)
    horizon_errors: list = field(default_factory=list)
    env_steps: int = 0
    gradient_samples: int = 0
    minibatches: int = 0
    target_syncs: int = 0
    reached_at: Optional[int] = None


# ── Task stream ──

class TaskSampler:
    """Seeded stream of tasks drawn uniformly over the given prototypes."""

    def __init__(self, prototypes, seed: int, split: str = "train",
                 library: Optional[GlyphLibrary] = None, tree_depth: int = DEFAULT_TREE_DEPTH):
        self.prototypes = [parse_prototype(p) for p in prototypes]
        if not self.prototypes:
            raise ValueError("TaskSampler needs at least one prototype")
        self.split = split
        self.library = library
        self.tree_depth = tree_depth
        self._rng = seed_streams(seed)["tasks"]

    def __call__(self) -> TaskSpec:
        proto = self.prototypes[int(self._rng.integers(len(self.prototypes)))]
        task_seed = int(self._rng.integers(2 ** 31 - 1))
        return make_task(proto, task_seed, self.split, self.library, self.tree_depth)


# ── DEVI ──

def train_devi(task_sampler: TaskSampler, schedule: TrainSchedule,
               params: Optional[EncoderParams] = None, sink: Optional[MetricsSink] = None,
               run_id: str = "devi", verbose: bool = True) -> TrainResult:
    streams = seed_streams(schedule.seed)
    params = params.copy() if params is not None else build_encoder(schedule.encoder, rng=streams["init"])
    config = schedule.planner_config()
    protocol = schedule.evaluation_protocol()
    adam = AdamState()
    result = TrainResult(params=params)
    env: Optional[GraphWorldEnv] = None
    buffer: Optional[ReplayBuffer] = None
    task: Optional[TaskSpec] = None

    for step in range(1, schedule.total_minibatches + 1):
        if env is None or (step - 1) % schedule.switch_every == 0:
            task = task_sampler()
            env = GraphWorldEnv(task, task_sampler.library)
            buffer = ReplayBuffer(schedule.replay_capacity)
            policy = uniform_random_policy(task.n_actions)
            collect(env, policy, schedule.burn_in, buffer, streams["collect"])
            result.env_steps += schedule.burn_in
        else:
            collect(env, policy, 1, buffer, streams["collect"])
            result.env_steps += 1

        store = subsample_store(buffer, schedule.store_size, streams["sample"], n_actions=task.n_actions)
        batch = buffer.sample(schedule.minibatch_size, streams["sample"])
        tape = Tape()
        loss, diagnostics = multi_horizon_loss(batch, BoundEncoder(params, tape), store, config)
        grads = tape.backward(loss) if loss.tracked else {}
        arrays, adam, _ = adam_step(params.arrays, grads, adam, lr=schedule.learning_rate)
        params = EncoderParams(params.descriptor, arrays)
        result.gradient_samples += len(batch)
        result.minibatches = step
        result.horizon_errors.append(diagnostics["horizon_errors"])

        row = MetricsRow(run_id, "train", step, task.prototype.value, task.seed,
                         loss=diagnostics["loss"], env_steps=result.env_steps)
        if schedule.eval_every and step % schedule.eval_every == 0:
            stats = evaluate_devi(params, task, protocol, streams["eval"], task_sampler.library)
            row.return_mean, row.return_std, row.oracle_norm = stats.mean, stats.std, stats.oracle_norm
        result.rows.append(row)
        if sink is not None:
            sink.append(row)

        if verbose and step % schedule.log_every == 0:
            window = [r.loss for r in result.rows[-schedule.log_every:]]
            print(f"[DEVI] {run_id} step {step}/{schedule.total_minibatches}: "
                  f"loss {np.mean(window):.5f} (last {len(window)}), env steps {result.env_steps}")

    result.params = params
    return result


# ── DQN ──

def train_dqn(task: TaskSpec, schedule: TrainSchedule, params: Optional[DqnParams] = None,
              sink: Optional[MetricsSink] = None, run_id: str = "dqn", verbose: bool = True,
              library: Optional[GlyphLibrary] = None, stop_at: Optional[float] = None,
              phase: str = "train") -> TrainResult:
    """Fill the buffer to capacity, then `total_minibatches` TD updates.

    With `stop_at`, training ends at the first evaluation whose oracle-normalized
    return reaches it; `reached_at` records that minibatch.
    """
    streams = seed_streams(schedule.seed)
    if params is None:
        params = init_dqn(schedule.encoder, task.n_actions, rng=streams["init"])
    else:
        params = params.copy()
    protocol = schedule.evaluation_protocol()
    env = GraphWorldEnv(task, library)
    buffer = ReplayBuffer(schedule.replay_capacity)
    collect(env, uniform_random_policy(task.n_actions), schedule.replay_capacity, buffer, streams["collect"])
    result = TrainResult(params=params, env_steps=schedule.replay_capacity)
    if verbose:
        print(f"[DQN] {run_id}: replay pre-filled with {len(buffer)} tuples "
              f"on {task.prototype.value} seed {task.seed}")

    target = TargetNetwork(params.copy())
    adam = AdamState()
    for step in range(1, schedule.total_minibatches + 1):
        batch = buffer.sample(schedule.minibatch_size, streams["sample"])
        tape = Tape()
        loss = dqn_td_loss(batch, BoundDqn(params, tape), target.params, schedule.gamma,
                           double_dqn=schedule.double_dqn)
        grads = tape.backward(loss)
        arrays, adam, _ = adam_step(params.arrays(), grads, adam, lr=schedule.learning_rate)
        params = DqnParams.from_arrays(params.encoder.descriptor, arrays)
        result.gradient_samples += len(batch)
        result.minibatches = step

        target.tick()
        if step % schedule.target_sync_period == 0:
            target = sync_target(params, target)

        row = MetricsRow(run_id, phase, step, task.prototype.value, task.seed,
                         loss=loss.item(), env_steps=result.env_steps)
        if schedule.eval_every and step % schedule.eval_every == 0:
            stats = evaluate_dqn(params, task, protocol, streams["eval"], library)
            row.return_mean, row.return_std, row.oracle_norm = stats.mean, stats.std, stats.oracle_norm
        result.rows.append(row)
        if sink is not None:
            sink.append(row)

        if verbose and step % schedule.log_every == 0:
            print(f"[DQN] {run_id} step {step}/{schedule.total_minibatches}: loss {row.loss:.5f}, "
                  f"target syncs {target.sync_count}")
        if stop_at is not None and row.oracle_norm is not None and row.oracle_norm >= stop_at:
            result.reached_at = step
            break

    result.params = params
    result.target_syncs = target.sync_count
    return result


def relearn_cost(task: TaskSpec, schedule: TrainSchedule, params: Optional[DqnParams] = None,
                 threshold: float = 0.9, library: Optional[GlyphLibrary] = None,
                 run_id: str = "relearn", verbose: bool = False) -> Optional[int]:
    """Minibatches until DQN (fresh when params is None) reaches `threshold`
    oracle-normalized return on `task`; None if it never does within the schedule."""
    result = train_dqn(task, schedule, params=params, run_id=run_id, verbose=verbose,
                       library=library, stop_at=threshold, phase="relearn")
    return result.reached_at

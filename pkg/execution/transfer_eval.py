"""
Transfer Evaluation
===================
Frozen-weight evaluation of DEVI encoders and DQN networks on a task:

  1. DEVI only: populate an evaluation store with a fixed number of tuples per
     (state, action) from uniform random rollouts.
  2. Run the greedy policy for N episodes from uniform random start states.
  3. Report discounted return mean/std and the oracle-normalized score
     sum(return - pessimal) / sum(optimal - pessimal) over the same start states.

No parameter is ever updated here; transfer_eval checks the parameter digest
before and after and fails loudly if it moved.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from devi_model import (
    EVALUATION_SAMPLES_PER_PAIR, DeviPlanner, EpisodicStore, PlannerConfig,
    build_evaluation_store,
)
from diffkit import EncoderParams, params_digest
from dqn_baseline import DqnParams, greedy_action
from graph_world import GlyphLibrary, GraphWorldEnv, TaskSpec, to_pixels
from oracle import finite_horizon_bounds
from replay_buffer import ReplayBuffer, collect, uniform_random_policy

DEFAULT_EVAL_EPISODES = 100
DEFAULT_POPULATION_BUDGET = 50_000


@dataclass
class EvaluationProtocol:
    episodes: int = DEFAULT_EVAL_EPISODES
    samples_per_pair: int = EVALUATION_SAMPLES_PER_PAIR
    population_budget: int = DEFAULT_POPULATION_BUDGET
    gamma: float = 0.9
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if self.samples_per_pair < 1:
            raise ValueError(f"samples_per_pair must be >= 1, got {self.samples_per_pair}")


@dataclass
class ReturnStats:
    returns: np.ndarray
    start_states: np.ndarray
    mean: float
    std: float
    oracle_norm: float
    env_steps: int = 0

    @property
    def episodes(self) -> int:
        return len(self.returns)


@dataclass
class TransferResult:
    kind: str
    task: TaskSpec
    stats: ReturnStats
    digest_before: str
    digest_after: str
    gradient_updates: int = 0
    store_size: int = 0
    store: Optional[EpisodicStore] = None
    population_steps: int = 0


# ── Oracle normalization ──

@lru_cache(maxsize=256)
def _bounds(task: TaskSpec, gamma: float, horizon: int) -> tuple:
    return finite_horizon_bounds(task, gamma, horizon)


def oracle_normalized(returns, start_states, task: TaskSpec, gamma: float,
                      horizon: Optional[int] = None) -> float:
    """sum(return - pessimal) / sum(optimal - pessimal) over the given start states.

    Equals 1.0 when every start state has optimal == pessimal.
    """
    horizon = task.time_limit if horizon is None else horizon
    best, worst = _bounds(task, float(gamma), int(horizon))
    starts = np.asarray(start_states, dtype=np.int64)
    span = float(np.sum(best[starts] - worst[starts]))
    if span <= 0.0:
        return 1.0
    return float(np.sum(np.asarray(returns) - worst[starts])) / span


# ── Rollouts ──

def greedy_rollouts(task: TaskSpec, act: Callable[[np.ndarray], int], episodes: int,
                    rng: np.random.Generator, gamma: float,
                    library: Optional[GlyphLibrary] = None) -> ReturnStats:
    """Run `act(pixels) -> action` from uniform random non-terminal starts."""
    env = GraphWorldEnv(task, library)
    returns = np.empty(episodes)
    starts = np.empty(episodes, dtype=np.int64)
    steps = 0
    for episode in range(episodes):
        obs = env.reset(rng)
        starts[episode] = env.state
        total, discount = 0.0, 1.0
        while not env.done:
            obs, reward, _, _ = env.step(act(to_pixels(obs)), rng)
            total += discount * reward
            discount *= gamma
            steps += 1
        returns[episode] = total
    return ReturnStats(
        returns=returns,
        start_states=starts,
        mean=float(np.mean(returns)),
        std=float(np.std(returns)),
        oracle_norm=oracle_normalized(returns, starts, task, gamma),
        env_steps=steps,
    )


def random_policy_stats(task: TaskSpec, episodes: int, rng: np.random.Generator, gamma: float,
                        library: Optional[GlyphLibrary] = None) -> ReturnStats:
    return greedy_rollouts(task, lambda pixels: int(rng.integers(task.n_actions)),
                           episodes, rng, gamma, library)


# ── Evaluation store ──

def populate_evaluation_store(task: TaskSpec, rng: np.random.Generator,
                              library: Optional[GlyphLibrary] = None,
                              samples_per_pair: int = EVALUATION_SAMPLES_PER_PAIR,
                              budget: int = DEFAULT_POPULATION_BUDGET) -> tuple:
    """Random rollouts until every non-terminal (state, action) has `samples_per_pair`
    tuples. Returns (store, env_steps). RuntimeError if the budget runs out first."""
    env = GraphWorldEnv(task, library)
    buffer = ReplayBuffer(capacity=budget)
    policy = uniform_random_policy(task.n_actions)
    counts = np.zeros((task.n_states, task.n_actions), dtype=np.int64)
    needed = np.zeros_like(counts)
    needed[task.non_terminal_states] = samples_per_pair
    chunk = max(task.n_states * task.n_actions, 1)
    steps = 0
    while np.any(counts < needed):
        if steps >= budget:
            missing = [(int(s), int(a)) for s, a in zip(*np.nonzero(counts < needed))]
            raise RuntimeError(f"Evaluation store incomplete after {budget} steps on "
                               f"{task.prototype.value} seed {task.seed}: missing {missing[:10]}")
        n = min(chunk, budget - steps)
        start = len(buffer)
        collect(env, policy, n, buffer, rng)
        for i in range(start, len(buffer)):
            t = buffer[i]
            counts[t.state, t.action] += 1
        steps += n
    store = build_evaluation_store(buffer, task.non_terminal_states, rng,
                                   n_actions=task.n_actions, samples_per_pair=samples_per_pair)
    return store, steps


# ── Model evaluation ──

def evaluate_devi(params: EncoderParams, task: TaskSpec, protocol: EvaluationProtocol,
                  rng: np.random.Generator, library: Optional[GlyphLibrary] = None,
                  store: Optional[EpisodicStore] = None) -> ReturnStats:
    population_steps = 0
    if store is None:
        store, population_steps = populate_evaluation_store(
            task, rng, library, protocol.samples_per_pair, protocol.population_budget)
    planner = DeviPlanner(params, store, protocol.planner)
    stats = greedy_rollouts(task, planner.act, protocol.episodes, rng, protocol.gamma, library)
    stats.env_steps += population_steps
    return stats


def evaluate_dqn(params: DqnParams, task: TaskSpec, protocol: EvaluationProtocol,
                 rng: np.random.Generator, library: Optional[GlyphLibrary] = None) -> ReturnStats:
    return greedy_rollouts(task, lambda pixels: greedy_action(params, pixels),
                           protocol.episodes, rng, protocol.gamma, library)


def _digest(params) -> str:
    if isinstance(params, DqnParams):
        return params_digest(params.arrays())
    if isinstance(params, EncoderParams):
        return params_digest(params.arrays)
    raise ValueError(f"transfer_eval: unsupported parameter type {type(params).__name__}")


def transfer_eval(params, test_task: TaskSpec, protocol: EvaluationProtocol,
                  rng: np.random.Generator, library: Optional[GlyphLibrary] = None,
                  verbose: bool = True, store: Optional[EpisodicStore] = None) -> TransferResult:
    """Evaluate frozen DEVI (EncoderParams) or DQN (DqnParams) weights on `test_task`.

    DEVI populates its store from a generator seeded by one draw of `rng`, so
    passing back a saved `result.store` with an identically seeded `rng`
    reproduces the same greedy rollouts.
    """
    before = _digest(params)
    store_size = 0
    population_steps = 0
    if isinstance(params, DqnParams):
        kind = "dqn"
        store = None
        stats = evaluate_dqn(params, test_task, protocol, rng, library)
    else:
        kind = "devi"
        population_rng = np.random.default_rng(int(rng.integers(2 ** 63 - 1)))
        if store is None:
            store, population_steps = populate_evaluation_store(
                test_task, population_rng, library, protocol.samples_per_pair,
                protocol.population_budget)
        store_size = store.total_resultants
        stats = evaluate_devi(params, test_task, protocol, rng, library, store=store)
        stats.env_steps += population_steps
    after = _digest(params)
    if after != before:
        raise RuntimeError(f"Parameters changed during frozen evaluation ({before[:12]} -> {after[:12]})")

    if verbose:
        print(f"[Transfer] {kind} on {test_task.prototype.value} seed {test_task.seed} "
              f"({test_task.split}): return {stats.mean:.3f} ± {stats.std:.3f}, "
              f"oracle-normalized {stats.oracle_norm:.3f}")
    return TransferResult(kind, test_task, stats, before, after, gradient_updates=0,
                          store_size=store_size, store=store, population_steps=population_steps)

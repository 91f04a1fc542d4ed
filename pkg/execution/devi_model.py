"""
DEVI Model
==========
Differentiable episodic value iteration: a per-action store of real transitions,
a softmax-cosine kernel over encoded observations, K value-iteration sweeps on the
store's resultant states, and the multi-horizon TD loss that trains the encoder.

Pipeline for one training step:
    store  = subsample_store(replay, per_action_count, rng)
    tape   = Tape()
    enc    = BoundEncoder(params, tape)
    loss, diag = multi_horizon_loss(batch, enc, store, config)
    grads  = tape.backward(loss)

Evaluation (frozen weights) goes through DeviPlanner, which encodes the store and
runs the sweeps once, then only encodes queries.
"""

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from diffkit import (
    BoundEncoder, EncoderParams, Tensor, add, concat_columns,
    cosine_similarity_matrix, matmul, mean, mul, reduce_max_with_argmax, reshape,
    scale, select_columns, slice_rows, softmax_rows, stop_gradient, sub,
)
from graph_world import to_pixels
from replay_buffer import ReplayBuffer

DEFAULT_SWEEPS = 10
DEFAULT_STORE_SIZE = 50
# Cosines of ReLU latents sit in [0, 1]; at 1.0 the kernel rows are close to uniform.
DEFAULT_TEMPERATURE = 0.05
EVALUATION_SAMPLES_PER_PAIR = 5


@dataclass(frozen=True)
class PlannerConfig:
    gamma: float = 0.9
    sweeps: int = DEFAULT_SWEEPS
    store_size: int = DEFAULT_STORE_SIZE
    temperature: float = DEFAULT_TEMPERATURE
    block_target_gradients: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.sweeps < 1:
            raise ValueError(f"sweeps must be >= 1, got {self.sweeps}")
        if self.store_size < 1:
            raise ValueError(f"store_size must be >= 1, got {self.store_size}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


# ── Episodic store ──

@dataclass
class EpisodicStore:
    """Index-aligned per-action arrays; observations are float64 pixels (n_a, 28, 28)."""
    origins: list
    rewards: list
    resultants: list
    dones: list
    # Hidden state ids, kept for diagnostics only; never seen by the model.
    origin_states: Optional[list] = None
    resultant_states: Optional[list] = None

    def __post_init__(self):
        n_actions = len(self.origins)
        if n_actions == 0:
            raise ValueError("EpisodicStore needs at least one action partition")
        if not len(self.rewards) == len(self.resultants) == len(self.dones) == n_actions:
            raise ValueError("EpisodicStore: per-action lists differ in length")
        self.origins = [np.asarray(o, dtype=np.float64) for o in self.origins]
        self.resultants = [np.asarray(r, dtype=np.float64) for r in self.resultants]
        self.rewards = [np.asarray(r, dtype=np.float64).reshape(-1) for r in self.rewards]
        self.dones = [np.asarray(d, dtype=np.float64).reshape(-1) for d in self.dones]
        for a in range(n_actions):
            n = len(self.origins[a])
            if n == 0:
                raise ValueError(f"EpisodicStore: empty action partition for action {a}")
            if not len(self.rewards[a]) == len(self.resultants[a]) == len(self.dones[a]) == n:
                raise ValueError(f"EpisodicStore: misaligned arrays for action {a}")

    @property
    def n_actions(self) -> int:
        return len(self.origins)

    @property
    def sizes(self) -> list:
        return [len(o) for o in self.origins]

    @property
    def total_resultants(self) -> int:
        return sum(self.sizes)

    def offsets(self) -> list:
        """(start, stop) of each action's resultants inside the concatenated V."""
        bounds = np.cumsum([0] + self.sizes)
        return [(int(bounds[a]), int(bounds[a + 1])) for a in range(self.n_actions)]

    def permuted(self, rng: np.random.Generator) -> "EpisodicStore":
        """Same tuples, reordered independently inside every action partition."""
        orders = [rng.permutation(n) for n in self.sizes]

        def reorder(arrays):
            return None if arrays is None else [np.asarray(x)[o] for x, o in zip(arrays, orders)]

        return EpisodicStore(reorder(self.origins), reorder(self.rewards),
                             reorder(self.resultants), reorder(self.dones),
                             reorder(self.origin_states), reorder(self.resultant_states))

    @classmethod
    def from_transitions(cls, per_action: list) -> "EpisodicStore":
        """Build from one list of Transitions per action."""
        return cls(
            origins=[to_pixels(np.stack([t.observation for t in ts])) for ts in per_action],
            rewards=[np.array([t.reward for t in ts]) for ts in per_action],
            resultants=[to_pixels(np.stack([t.next_observation for t in ts])) for ts in per_action],
            dones=[np.array([float(t.terminal) for t in ts]) for ts in per_action],
            origin_states=[np.array([t.state for t in ts], dtype=np.int64) for ts in per_action],
            resultant_states=[np.array([t.next_state for t in ts], dtype=np.int64) for ts in per_action],
        )

    def to_tensors(self, prefix: str = "store.") -> dict:
        """Named float64 arrays for the checkpoint container. State ids ride along when known."""
        out = {}
        for a in range(self.n_actions):
            out[f"{prefix}a{a}.origins"] = self.origins[a]
            out[f"{prefix}a{a}.rewards"] = self.rewards[a]
            out[f"{prefix}a{a}.resultants"] = self.resultants[a]
            out[f"{prefix}a{a}.dones"] = self.dones[a]
            if self.origin_states is not None and self.resultant_states is not None:
                out[f"{prefix}a{a}.origin_states"] = np.asarray(self.origin_states[a], dtype=np.float64)
                out[f"{prefix}a{a}.resultant_states"] = np.asarray(self.resultant_states[a], dtype=np.float64)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "store.") -> "EpisodicStore":
        n_actions = 0
        while f"{prefix}a{n_actions}.origins" in tensors:
            n_actions += 1
        if n_actions == 0:
            raise ValueError(f"No store tensors with prefix '{prefix}'")

        def states(name):
            keys = [f"{prefix}a{a}.{name}" for a in range(n_actions)]
            if not all(k in tensors for k in keys):
                return None
            return [np.asarray(tensors[k]).astype(np.int64) for k in keys]

        return cls(
            origins=[tensors[f"{prefix}a{a}.origins"] for a in range(n_actions)],
            rewards=[tensors[f"{prefix}a{a}.rewards"] for a in range(n_actions)],
            resultants=[tensors[f"{prefix}a{a}.resultants"] for a in range(n_actions)],
            dones=[tensors[f"{prefix}a{a}.dones"] for a in range(n_actions)],
            origin_states=states("origin_states"),
            resultant_states=states("resultant_states"),
        )


def subsample_store(replay: ReplayBuffer, per_action_count: int, rng: np.random.Generator,
                    n_actions: int = 2, per_state_count: Optional[int] = None,
                    states: Optional[list] = None) -> EpisodicStore:
    """Draw an EpisodicStore from a replay buffer without replacement.

    Default mode takes `per_action_count` tuples uniformly per action. With
    `per_state_count`, takes exactly that many tuples per (state, action) for every
    state in `states` (default: every origin state present) and ignores
    `per_action_count`.
    """
    if per_state_count is None:
        if per_action_count < 1:
            raise ValueError(f"per_action_count must be >= 1, got {per_action_count}")
        chosen = []
        for a in range(n_actions):
            idx = replay.indices_for_action(a)
            if len(idx) < per_action_count:
                raise ValueError(f"Insufficient tuples for action {a}: "
                                 f"{len(idx)} < {per_action_count}")
            picks = rng.choice(len(idx), size=per_action_count, replace=False)
            chosen.append([replay[idx[int(i)]] for i in picks])
        return EpisodicStore.from_transitions(chosen)

    by_pair = defaultdict(list)
    for i, t in enumerate(replay):
        by_pair[(t.state, t.action)].append(i)
    if states is None:
        states = sorted({s for s, _ in by_pair})
    chosen = [[] for _ in range(n_actions)]
    for s in states:
        for a in range(n_actions):
            idx = by_pair.get((s, a), [])
            if len(idx) < per_state_count:
                raise ValueError(f"Insufficient tuples for (state {s}, action {a}): "
                                 f"{len(idx)} < {per_state_count}")
            picks = rng.choice(len(idx), size=per_state_count, replace=False)
            chosen[a].extend(replay[idx[int(i)]] for i in picks)
    return EpisodicStore.from_transitions(chosen)


def build_evaluation_store(replay: ReplayBuffer, states: list, rng: np.random.Generator,
                           n_actions: int = 2,
                           samples_per_pair: int = EVALUATION_SAMPLES_PER_PAIR) -> EpisodicStore:
    return subsample_store(replay, 0, rng, n_actions=n_actions,
                           per_state_count=samples_per_pair, states=states)


# ── Kernel & planner ──

def similarity_weights(query_latents, stored_latents, temperature: float = 1.0) -> Tensor:
    """Row-stochastic softmax over cos(q_i, s_j) / temperature."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    cos = cosine_similarity_matrix(query_latents, stored_latents)
    if cos.shape[1] == 0:
        raise ValueError("similarity_weights: no stored latents")
    return softmax_rows(scale(cos, 1.0 / temperature))


@dataclass
class EmpiricalModel:
    """Encoded store plus the per-action kernels Theta_a = kappa(Z', Z_a)."""
    origin_latents: list
    resultant_latents: Tensor
    kernels: list
    rewards: list
    continues: list
    offsets: list
    gamma: float
    temperature: float

    @property
    def n_actions(self) -> int:
        return len(self.kernels)


def build_empirical_model(store: EpisodicStore, encoder: BoundEncoder,
                          config: PlannerConfig) -> EmpiricalModel:
    """Encode origins and resultants with the same encoder in a single pass."""
    sizes = store.sizes
    stacked = np.concatenate(store.origins + store.resultants, axis=0)
    latents = encoder(stacked)
    n_origins = sum(sizes)
    bounds = np.cumsum([0] + sizes)
    origin_latents = [slice_rows(latents, int(bounds[a]), int(bounds[a + 1]))
                      for a in range(store.n_actions)]
    resultant_latents = slice_rows(latents, n_origins, latents.shape[0])
    kernels = [similarity_weights(resultant_latents, z_a, config.temperature)
               for z_a in origin_latents]
    return EmpiricalModel(
        origin_latents=origin_latents,
        resultant_latents=resultant_latents,
        kernels=kernels,
        rewards=store.rewards,
        continues=[1.0 - d for d in store.dones],
        offsets=store.offsets(),
        gamma=config.gamma,
        temperature=config.temperature,
    )


def _action_targets(model: EmpiricalModel, V) -> list:
    """R_a + gamma * (1 - done_a) * V_a, one (n_a, 1) column per action."""
    targets = []
    for a, (start, stop) in enumerate(model.offsets):
        V_a = slice_rows(V, start, stop)
        target = add(Tensor(model.rewards[a]), mul(Tensor(model.gamma * model.continues[a]), V_a))
        targets.append(reshape(target, (stop - start, 1)))
    return targets


def _check_values(model: EmpiricalModel, V) -> Tensor:
    V = V if isinstance(V, Tensor) else Tensor(V)
    expected = model.offsets[-1][1]
    if V.shape != (expected,):
        raise ValueError(f"Value vector length {V.shape} does not match {expected} resultant states")
    return V


def value_iteration_sweep(V, model: EmpiricalModel) -> Tensor:
    """V'(x) = max_a sum_s kappa(x, s) [R_a(s) + gamma (1 - done_a(s)) V(s'_a)]."""
    V = _check_values(model, V)
    columns = [matmul(theta, target) for theta, target in zip(model.kernels, _action_targets(model, V))]
    values, _ = reduce_max_with_argmax(concat_columns(columns))
    return values


def value_history(model: EmpiricalModel, sweeps: int) -> list:
    """[V_0, ..., V_sweeps] starting from V_0 = 0."""
    history = [Tensor(np.zeros(model.offsets[-1][1]))]
    for _ in range(sweeps):
        history.append(value_iteration_sweep(history[-1], model))
    return history


def query_backup(query_latents, model: EmpiricalModel, V) -> Tensor:
    """(m, |A|) action values of the queries backed up through V."""
    V = _check_values(model, V)
    columns = []
    for z_a, target in zip(model.origin_latents, _action_targets(model, V)):
        weights = similarity_weights(query_latents, z_a, model.temperature)
        columns.append(matmul(weights, target))
    return concat_columns(columns)


def _as_batch(observations) -> tuple:
    obs = np.asarray(observations, dtype=np.float64)
    single = obs.ndim == 2
    return (obs[None] if single else obs), single


def q_values(observations, encoder: BoundEncoder, store: EpisodicStore, config: PlannerConfig,
             horizon: Optional[int] = None) -> Tensor:
    """Q(s, a) at `horizon` (default config.sweeps): horizon-1 sweeps, then one query backup.

    Returns a differentiable (m, |A|) tensor, or (|A|,) for a single observation.
    """
    horizon = config.sweeps if horizon is None else horizon
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    obs, single = _as_batch(observations)
    model = build_empirical_model(store, encoder, config)
    V = value_history(model, horizon - 1)[-1]
    q = query_backup(encoder(obs), model, V)
    return reshape(q, (store.n_actions,)) if single else q


def multi_horizon_loss(batch, encoder: BoundEncoder, store: EpisodicStore,
                       config: PlannerConfig) -> tuple:
    """Mean over horizons 1..K and over the batch of (y - Q(s, a, i))^2.

    y = r at horizon 1 or for terminal tuples, else r + gamma * max_a' Q(s', a', i - 1).
    Returns (loss tensor, diagnostics) with per-horizon mean squared errors.
    """
    if len(batch) == 0:
        raise ValueError("multi_horizon_loss: empty batch")
    K = config.sweeps
    model = build_empirical_model(store, encoder, config)
    history = value_history(model, K - 1)

    m = len(batch)
    latents = encoder(np.concatenate([batch.observations, batch.next_observations], axis=0))
    z = slice_rows(latents, 0, m)
    z_next = slice_rows(latents, m, 2 * m)
    rewards = Tensor(batch.rewards)
    discount = Tensor(config.gamma * (1.0 - batch.terminals))

    total = None
    horizon_errors = []
    for i in range(1, K + 1):
        prediction = select_columns(query_backup(z, model, history[i - 1]), batch.actions)
        if i == 1:
            target = rewards
        else:
            best_next, _ = reduce_max_with_argmax(query_backup(z_next, model, history[i - 2]))
            if config.block_target_gradients:
                best_next = stop_gradient(best_next)
            target = add(rewards, mul(discount, best_next))
        err = sub(prediction, target)
        horizon_loss = mean(mul(err, err))
        horizon_errors.append(horizon_loss.item())
        total = horizon_loss if total is None else add(total, horizon_loss)

    loss = scale(total, 1.0 / K)
    return loss, {"loss": loss.item(), "horizon_errors": horizon_errors}


class DeviPlanner:
    """Frozen-weight planner: the store is encoded and swept once per instance."""

    def __init__(self, params: EncoderParams, store: EpisodicStore, config: PlannerConfig,
                 horizon: Optional[int] = None):
        self.config = config
        self.horizon = config.sweeps if horizon is None else horizon
        self.encoder = BoundEncoder(params)
        self.model = build_empirical_model(store, self.encoder, config)
        self.values = value_history(self.model, self.horizon - 1)[-1]
        self.n_actions = store.n_actions

    def q(self, observations) -> np.ndarray:
        obs, single = _as_batch(observations)
        q = query_backup(self.encoder(obs), self.model, self.values).numpy()
        return q[0] if single else q

    def act(self, observations) -> int:
        return int(np.argmax(self.q(observations)))

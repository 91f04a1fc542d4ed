"""
Replay Buffer
=============
Bounded FIFO store of (s, a, r, s', terminal) transitions shared by the DEVI
episodic store and DQN minibatch sampling, plus the behavior policies and the
collection loop that fills a buffer from an environment.

Observations are kept as uint8 images (0..255) and converted to float64 pixels
in [0, 1] only when a Batch is built.
"""

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from graph_world import to_pixels

DEFAULT_CAPACITY = 100_000


class Transition(NamedTuple):
    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    terminal: bool
    # Hidden state indices; bookkeeping only (stratified stores, oracles).
    state: int = -1
    next_state: int = -1


@dataclass
class Batch:
    observations: np.ndarray       # (B, 28, 28) float64
    actions: np.ndarray            # (B,) int64
    rewards: np.ndarray            # (B,) float64
    next_observations: np.ndarray  # (B, 28, 28) float64
    terminals: np.ndarray          # (B,) float64, 1.0 for terminal
    states: np.ndarray             # (B,) int64
    next_states: np.ndarray        # (B,) int64

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        if not transitions:
            raise ValueError("Cannot build a batch from zero transitions")
        return cls(
            observations=to_pixels(np.stack([t.observation for t in transitions])),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_observations=to_pixels(np.stack([t.next_observation for t in transitions])),
            terminals=np.array([t.terminal for t in transitions], dtype=np.float64),
            states=np.array([t.state for t in transitions], dtype=np.int64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.int64),
        )


class ReplayBuffer:
    """FIFO with a hard capacity; the oldest transition is evicted first.

    Backed by a ring of slots so random access stays O(1); indices run from the
    oldest (0) to the newest (len - 1).
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError(f"Replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._slots: list = []
        self._head = 0  # slot holding the oldest transition once full

    def __len__(self):
        return len(self._slots)

    def __getitem__(self, index: int) -> Transition:
        if not -len(self._slots) <= index < len(self._slots):
            raise IndexError(index)
        return self._slots[(self._head + index) % len(self._slots)]

    def __iter__(self):
        for i in range(len(self._slots)):
            yield self[i]

    @property
    def full(self) -> bool:
        return len(self._slots) == self.capacity

    def append(self, transition: Transition) -> None:
        if len(self._slots) < self.capacity:
            self._slots.append(transition)
        else:
            self._slots[self._head] = transition
            self._head = (self._head + 1) % self.capacity

    def clear(self) -> None:
        self._slots = []
        self._head = 0

    def indices_for_action(self, action: int) -> list:
        return [i for i, t in enumerate(self) if t.action == action]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch, without replacement when the buffer is large enough."""
        if not self._slots:
            raise ValueError("Cannot sample from an empty replay buffer")
        replace = len(self._slots) < batch_size
        idx = rng.choice(len(self._slots), size=batch_size, replace=replace)
        return Batch.from_transitions([self[int(i)] for i in idx])


# ── Behavior policies ──

Policy = Callable[[np.ndarray, np.random.Generator], int]


def uniform_random_policy(n_actions: int) -> Policy:
    def act(observation, rng):
        return int(rng.integers(n_actions))
    return act


def collect(env, policy: Policy, steps: int, buffer: ReplayBuffer,
            rng: np.random.Generator) -> ReplayBuffer:
    """Append exactly `steps` transitions; episodes reset on terminal or time limit.

    A partially played episode carries over between calls on the same env.
    """
    if steps < 1:
        raise ValueError(f"collect needs steps >= 1, got {steps}")
    for _ in range(steps):
        if env.done:
            env.reset(rng)
        observation, state = env.observation, env.state
        action = policy(observation, rng)
        next_observation, reward, terminal, _ = env.step(action, rng)
        buffer.append(Transition(observation, int(action), float(reward), next_observation,
                                 bool(terminal), state, env.state))
    return buffer

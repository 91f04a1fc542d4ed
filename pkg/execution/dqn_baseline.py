"""
DQN Baseline
============
Parametric Q-network used as the model-free comparison: the DEVI encoder stack
followed by a linear head of width |A|, trained on the one-step TD loss against a
slowly synced target network.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from diffkit import (
    BoundEncoder, EncoderParams, Tape, Tensor, bind_params, build_encoder, dense,
    mean, mul, select_columns, sub,
)

ENCODER_PREFIX = "encoder."
HEAD_PREFIX = "head."
DEFAULT_TARGET_SYNC_PERIOD = 100


@dataclass
class DqnParams:
    encoder: EncoderParams
    head: dict  # "weight" (d, |A|), "bias" (|A|,)

    def __post_init__(self):
        weight, bias = self.head["weight"], self.head["bias"]
        if weight.shape != (self.encoder.latent_dim, bias.shape[0]):
            raise ValueError(f"DQN head shape {weight.shape} does not match latent dim "
                             f"{self.encoder.latent_dim} and {bias.shape[0]} actions")

    @property
    def n_actions(self) -> int:
        return int(self.head["bias"].shape[0])

    def arrays(self) -> dict:
        """Flat name -> array view used by ADAM and checkpoints."""
        out = {ENCODER_PREFIX + k: v for k, v in self.encoder.arrays.items()}
        out.update({HEAD_PREFIX + k: v for k, v in self.head.items()})
        return out

    @classmethod
    def from_arrays(cls, descriptor: str, arrays: dict) -> "DqnParams":
        encoder = {k[len(ENCODER_PREFIX):]: np.array(v) for k, v in arrays.items()
                   if k.startswith(ENCODER_PREFIX)}
        head = {k[len(HEAD_PREFIX):]: np.array(v) for k, v in arrays.items()
                if k.startswith(HEAD_PREFIX)}
        if set(head) != {"weight", "bias"}:
            raise ValueError(f"DQN arrays missing head parameters, got {sorted(head)}")
        return cls(EncoderParams(descriptor, encoder), head)

    def copy(self) -> "DqnParams":
        return DqnParams(self.encoder.copy(), {k: np.array(v) for k, v in self.head.items()})


def init_dqn(descriptor: str, n_actions: int = 2, rng: Optional[np.random.Generator] = None,
             seed: int = 0) -> DqnParams:
    rng = rng if rng is not None else np.random.default_rng(seed)
    encoder = build_encoder(descriptor, rng=rng)
    d = encoder.latent_dim
    bound = np.sqrt(6.0 / d)
    head = {"weight": rng.uniform(-bound, bound, size=(d, n_actions)), "bias": np.zeros(n_actions)}
    return DqnParams(encoder, head)


class BoundDqn:
    """DqnParams bound to a tape (training) or evaluated as constants."""

    def __init__(self, params: DqnParams, tape: Optional[Tape] = None):
        self.params = params
        self.encoder = BoundEncoder(params.encoder, tape, prefix=ENCODER_PREFIX)
        self.head = bind_params(params.head, tape, prefix=HEAD_PREFIX)

    def __call__(self, observations) -> Tensor:
        return dense(self.encoder(observations), self.head["weight"], self.head["bias"])


def dqn_q(observations, params: DqnParams) -> np.ndarray:
    """Q values for one observation (28, 28) -> (|A|,) or a batch (m, 28, 28) -> (m, |A|)."""
    obs = np.asarray(observations, dtype=np.float64)
    single = obs.ndim == 2
    q = BoundDqn(params)(obs[None] if single else obs).numpy()
    return q[0] if single else q


def greedy_action(params: DqnParams, observation) -> int:
    return int(np.argmax(dqn_q(observation, params)))


def dqn_td_loss(batch, online: BoundDqn, target_params: DqnParams, gamma: float,
                double_dqn: bool = False) -> Tensor:
    """mean (Q(s,a) - (r + gamma (1 - terminal) max_a' Q_target(s', a')))^2.

    Targets are constants; gradients reach only the online network. With
    `double_dqn`, a' is chosen by the online network and valued by the target.
    """
    if len(batch) == 0:
        raise ValueError("dqn_td_loss: empty batch")
    prediction = select_columns(online(batch.observations), batch.actions)
    target_q = dqn_q(batch.next_observations, target_params)
    if double_dqn:
        chosen = np.argmax(dqn_q(batch.next_observations, online.params), axis=1)
        bootstrap = target_q[np.arange(len(batch)), chosen]
    else:
        bootstrap = target_q.max(axis=1)
    target = batch.rewards + gamma * (1.0 - batch.terminals) * bootstrap
    err = sub(prediction, Tensor(target))
    return mean(mul(err, err))


@dataclass
class TargetNetwork:
    params: DqnParams
    staleness: int = 0
    sync_count: int = 0

    def tick(self) -> None:
        self.staleness += 1


def sync_target(params: DqnParams, target: TargetNetwork) -> TargetNetwork:
    """Deep copy of the online parameters; staleness resets."""
    online, frozen = params.arrays(), target.params.arrays()
    if online.keys() != frozen.keys() or any(online[k].shape != frozen[k].shape for k in online):
        raise ValueError("sync_target: online and target parameter shapes differ")
    return TargetNetwork(params.copy(), staleness=0, sync_count=target.sync_count + 1)

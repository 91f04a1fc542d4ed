import os
import sys

import numpy as np
import pytest

# Insert the execution directory to the path so modules import by bare name
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../execution')))

from devi_model import EpisodicStore  # noqa: E402
from graph_world import TaskSpec, make_task, procedural_library  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.getenv("DEVI_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow: set DEVI_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def library():
    """Small procedural library: enough test classes for a depth-5 tree (63 states)."""
    return procedural_library(seed=7, n_classes=240, n_test=80)


@pytest.fixture(scope="session")
def quiet_library(library):
    return library.with_noise(0.0)


@pytest.fixture
def ring_task(library):
    return make_task("Ring", 1, "train", library)


def one_hot_image(state: int) -> np.ndarray:
    img = np.zeros(28 * 28)
    img[state] = 1.0
    return img.reshape(28, 28)


def tabular_store(task: TaskSpec) -> EpisodicStore:
    """One tuple per non-terminal (state, action) with one-hot observations."""
    origins, rewards, resultants, dones = [], [], [], []
    for a in range(task.n_actions):
        states = task.non_terminal_states
        nxt = [task.transitions[s][a] for s in states]
        origins.append(np.stack([one_hot_image(s) for s in states]))
        rewards.append(np.array([task.rewards[s][a] for s in states]))
        resultants.append(np.stack([one_hot_image(t) for t in nxt]))
        dones.append(np.array([float(t in task.terminal_states) for t in nxt]))
    return EpisodicStore(origins, rewards, resultants, dones,
                         origin_states=[np.array(task.non_terminal_states)] * task.n_actions,
                         resultant_states=[np.array([task.transitions[s][a] for s in task.non_terminal_states])
                                           for a in range(task.n_actions)])

"""
Oracle
======
Ground-truth references every acceptance test compares against:
  - exact synchronous value iteration on a TaskSpec (optimal or pessimal)
  - brute-force finite-horizon Q by enumerating action sequences
  - central finite differences for checking tape gradients
"""

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from graph_world import TaskSpec

MAX_BRUTE_FORCE_HORIZON = 12
DEFAULT_TOLERANCE = 1e-10


@dataclass
class TabularSolution:
    """V_history[k] / Q_history[k] are the k-step values (index 0 is all zeros)."""
    V: np.ndarray
    Q: np.ndarray
    V_history: list = field(default_factory=list)
    Q_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def bellman_backup(task: TaskSpec, V: np.ndarray, gamma: float, minimize: bool = False):
    """One synchronous backup. Returns (V', Q'). Terminal states keep value 0."""
    nxt = task.transition_table()
    continues = (~task.terminal_mask()[nxt]).astype(np.float64)
    Q = task.reward_table() + gamma * (continues * V[nxt])
    V_new = Q.min(axis=1) if minimize else Q.max(axis=1)
    return V_new, Q


def exact_value_iteration(task: TaskSpec, gamma: float, horizon: Optional[int] = None,
                          tolerance: float = DEFAULT_TOLERANCE, max_iterations: int = 100_000,
                          minimize: bool = False) -> TabularSolution:
    """Synchronous backups from V_0 = 0.

    With `horizon`, runs exactly that many backups (finite-horizon values).
    Otherwise stops once ||V_{k+1} - V_k||_inf <= tolerance. `minimize=True`
    replaces max with min (the worst achievable return).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    V = np.zeros(task.n_states)
    V_history = [V]
    Q_history = [np.zeros((task.n_states, task.n_actions))]
    limit = horizon if horizon is not None else max_iterations
    converged = False
    for _ in range(limit):
        V_new, Q = bellman_backup(task, V, gamma, minimize)
        V_history.append(V_new)
        Q_history.append(Q)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if horizon is None and delta <= tolerance:
            converged = True
            break
    if horizon is None and not converged:
        print(f"[Oracle] Value iteration did not converge in {max_iterations} sweeps")
    return TabularSolution(V=V, Q=Q_history[-1], V_history=V_history, Q_history=Q_history,
                           iterations=len(V_history) - 1, converged=converged or horizon is not None)


def finite_horizon_bounds(task: TaskSpec, gamma: float, horizon: int) -> tuple:
    """(optimal, pessimal) discounted returns over `horizon` steps, per start state."""
    best = exact_value_iteration(task, gamma, horizon=horizon).V
    worst = exact_value_iteration(task, gamma, horizon=horizon, minimize=True).V
    return best, worst


def brute_force_q(task: TaskSpec, gamma: float, horizon: int, state: int, action: int,
                  with_count: bool = False):
    """Max discounted return over every action sequence of length `horizon` that starts
    with (state, action). With with_count=True also returns the number of enumerated
    sequences (|A|^(horizon-1) when no terminal is hit)."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if horizon > MAX_BRUTE_FORCE_HORIZON:
        raise ValueError(f"horizon {horizon} too large for enumeration (max {MAX_BRUTE_FORCE_HORIZON})")
    count = 0

    def q(s, a, h):
        if s in task.terminal_states:
            return leaf(0.0)
        nxt = task.transitions[s][a]
        r = task.rewards[s][a]
        continues = 0.0 if nxt in task.terminal_states else 1.0
        return r + gamma * (continues * best(nxt, h - 1))

    def best(s, h):
        if h == 0 or s in task.terminal_states:
            return leaf(0.0)
        return max(q(s, a, h) for a in range(task.n_actions))

    def leaf(value):
        nonlocal count
        count += 1
        return value

    value = q(state, action, horizon)
    return (value, count) if with_count else value


def dump_solution_csv(solution: TabularSolution, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["state", "action", "q_star", "v_star"])
        for s in range(solution.Q.shape[0]):
            for a in range(solution.Q.shape[1]):
                writer.writerow([s, a, repr(float(solution.Q[s, a])), repr(float(solution.V[s]))])


# ── Finite differences ──

def sample_coordinates(params: dict, n: int, rng: np.random.Generator) -> list:
    """Uniformly sample up to n distinct (name, flat_index) coordinates."""
    names = list(params)
    sizes = np.array([np.size(params[k]) for k in names])
    total = int(sizes.sum())
    picks = np.sort(rng.choice(total, size=min(n, total), replace=False))
    bounds = np.cumsum(sizes)
    coords = []
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        offset = int(flat - (bounds[i - 1] if i else 0))
        coords.append((names[i], offset))
    return coords


def finite_difference_grad(loss_fn: Callable[[dict], float], params: dict, coordinates: list,
                           step: float = 1e-5) -> np.ndarray:
    """Central differences (f(θ + h e) - f(θ - h e)) / 2h at each (name, flat_index)."""
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    estimates = np.empty(len(coordinates))
    for i, (name, index) in enumerate(coordinates):
        shifted = dict(params)
        base = np.array(params[name], dtype=np.float64)
        values = []
        for sign in (1.0, -1.0):
            shifted_array = base.copy()
            shifted_array.flat[index] += sign * step
            shifted[name] = shifted_array
            value = float(loss_fn(shifted))
            if not np.isfinite(value):
                raise RuntimeError(f"Non-finite loss at {name}[{index}]")
            values.append(value)
        estimates[i] = (values[0] - values[1]) / (2.0 * step)
    return estimates


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_check(loss_fn: Callable[[dict], float], analytic: dict, params: dict,
                   rng: np.random.Generator, n_coordinates: int = 200, step: float = 1e-5,
                   tolerance: float = 1e-4, required_fraction: float = 0.99) -> dict:
    """Compare tape gradients against central differences on sampled coordinates."""
    coords = sample_coordinates(params, n_coordinates, rng)
    numeric = finite_difference_grad(loss_fn, params, coords, step)
    exact = np.array([np.asarray(analytic[name]).flat[idx] for name, idx in coords])
    errors = relative_error(exact, numeric)
    worst = int(np.argmax(errors))
    fraction = float(np.mean(errors <= tolerance))
    return {
        "passed": fraction >= required_fraction,
        "pass_fraction": fraction,
        "n_coordinates": len(coords),
        "tolerance": tolerance,
        "worst": {
            "name": coords[worst][0],
            "index": coords[worst][1],
            "analytic": float(exact[worst]),
            "numeric": float(numeric[worst]),
            "relative_error": float(errors[worst]),
        },
    }

"""
Glyph Graph World
=================
Small deterministic MDPs whose hidden states are shown to the agent only as
28x28 glyph images. Three task prototypes:
  Ring      10-state cycle, one rewarding terminal goal (+1)
  HardRing  15-state cycle, one terminal pit (-1) and one non-terminal bonus (+0.1)
  Tree      full binary tree, every leaf terminal, one good leaf (+1), the rest -1

Each task draws its reward placement, action semantics and state->glyph-class
mapping from (prototype, seed, split). Glyph classes come from a GlyphLibrary:
procedurally generated stroke glyphs by default, or a directory of PGM images.
"""

import json
import os
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np

IMAGE_SIDE = 28
DEFAULT_NOISE_RATE = 0.05
SPLITS = ("train", "test")

RING_STATES = 10
HARD_RING_STATES = 15
DEFAULT_TREE_DEPTH = 5

RING_GOAL_REWARD = 1.0
HARD_RING_PIT_REWARD = -1.0
HARD_RING_BONUS_REWARD = 0.1
TREE_GOOD_LEAF_REWARD = 1.0
TREE_BAD_LEAF_REWARD = -1.0


class Prototype(str, Enum):
    RING = "Ring"
    HARD_RING = "HardRing"
    TREE = "Tree"


def parse_prototype(name) -> Prototype:
    """Accept 'Ring', 'ring', 'hard_ring', 'HardRing', ... ."""
    if isinstance(name, Prototype):
        return name
    key = str(name).replace("_", "").replace("-", "").replace(" ", "").lower()
    for proto in Prototype:
        if proto.value.lower() == key:
            return proto
    raise ValueError(f"Unknown prototype '{name}'. Expected one of {[p.value for p in Prototype]}")


# ═══════════════════════════════════════════════════════════════════
#  GLYPH LIBRARY
# ═══════════════════════════════════════════════════════════════════

@dataclass
class GlyphLibrary:
    """Glyph classes as uint8 28x28 images (0..255)."""
    prototypes: dict
    train_classes: frozenset
    test_classes: frozenset
    noise_rate: float = DEFAULT_NOISE_RATE
    samples: dict = field(default_factory=dict)
    source: str = "procedural"

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise ValueError("Glyph library train and test classes overlap")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must be in [0, 1], got {self.noise_rate}")

    def split_classes(self, split: str) -> list:
        if split not in SPLITS:
            raise ValueError(f"Unknown glyph split '{split}'. Expected one of {SPLITS}")
        return sorted(self.train_classes if split == "train" else self.test_classes)

    def with_noise(self, noise_rate: float) -> "GlyphLibrary":
        return GlyphLibrary(self.prototypes, self.train_classes, self.test_classes,
                            noise_rate, self.samples, self.source)


def _draw_glyph(rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((IMAGE_SIDE, IMAGE_SIDE), dtype=np.uint8)
    for _ in range(rng.integers(2, 5)):
        points = rng.integers(4, IMAGE_SIDE - 5, size=(rng.integers(2, 4), 2))
        for p0, p1 in zip(points[:-1], points[1:]):
            t = np.linspace(0.0, 1.0, 40)[:, None]
            line = np.rint(p0 + t * (p1 - p0)).astype(int)
            for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
                img[line[:, 0] + dr, line[:, 1] + dc] = 255
    return img


def procedural_library(seed: int = 0, n_classes: int = 1600, n_test: int = 400,
                       noise_rate: float = DEFAULT_NOISE_RATE) -> GlyphLibrary:
    """Seeded stroke glyphs; classes are shuffled, then the last n_test form the test split."""
    if not 0 < n_test < n_classes:
        raise ValueError(f"Need 0 < n_test < n_classes, got n_test={n_test}, n_classes={n_classes}")
    rng = np.random.default_rng(seed)
    prototypes, seen = {}, set()
    while len(prototypes) < n_classes:
        glyph = _draw_glyph(rng)
        key = glyph.tobytes()
        if key in seen:
            continue
        seen.add(key)
        prototypes[len(prototypes)] = glyph
    order = rng.permutation(n_classes)
    train = frozenset(int(c) for c in order[:n_classes - n_test])
    test = frozenset(int(c) for c in order[n_classes - n_test:])
    return GlyphLibrary(prototypes, train, test, noise_rate, source=f"procedural:seed={seed}")


@lru_cache(maxsize=4)
def default_library(noise_rate: float = DEFAULT_NOISE_RATE) -> GlyphLibrary:
    return procedural_library(noise_rate=noise_rate)


# ── PGM ingestion ──

def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the payload

    if tokens[0] != b"P5":
        raise ValueError(f"{path}: malformed PGM header (magic {tokens[0]!r}, expected b'P5')")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header {tokens!r}") from None
    if (width, height) != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"{path}: wrong dimensions {width}x{height}, expected {IMAGE_SIDE}x{IMAGE_SIDE}")
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = blob[pos:pos + width * height]
    if len(payload) != width * height:
        raise ValueError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)
    return np.rint(pixels * (255.0 / maxval)).astype(np.uint8)


def load_pgm_directory(path: str, noise_rate: float = DEFAULT_NOISE_RATE,
                       test_fraction: float = 0.25) -> GlyphLibrary:
    """One subdirectory per class, each holding binary PGM (P5) 28x28 images.

    Classes are indexed in lexicographic directory order; the last
    floor(test_fraction * n_classes) classes form the test split.
    """
    if not os.path.isdir(path):
        raise ValueError(f"Glyph directory not found: {path}")
    class_dirs = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    if not class_dirs:
        raise ValueError(f"{path}: no class subdirectories")

    prototypes, samples = {}, {}
    for class_id, name in enumerate(class_dirs):
        class_path = os.path.join(path, name)
        files = sorted(f for f in os.listdir(class_path) if f.lower().endswith(".pgm"))
        if not files:
            raise ValueError(f"{class_path}: empty class directory")
        images = [_read_pgm(os.path.join(class_path, f)) for f in files]
        prototypes[class_id] = images[0]
        samples[class_id] = images

    n_test = int(len(class_dirs) * test_fraction)
    split_at = len(class_dirs) - n_test
    print(f"[GraphWorld] Loaded {len(class_dirs)} glyph classes from {path} "
          f"({split_at} train / {n_test} test)")
    return GlyphLibrary(prototypes, frozenset(range(split_at)),
                        frozenset(range(split_at, len(class_dirs))),
                        noise_rate, samples, source=f"pgm:{os.path.abspath(path)}")


# ═══════════════════════════════════════════════════════════════════
#  TASKS
# ═══════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TaskSpec:
    """A ground-truth deterministic MDP plus its state -> glyph class mapping.

    transitions[s][a] / rewards[s][a] are indexed by the task's (permuted) actions.
    Terminal states self-loop with zero reward.

    Rewards are paid on entering a state, so on the rings they sit on two edges:
    the Ring goal pays +1 from both of its neighbours (two rewarding tuples in
    the table, one per direction), and the HardRing pit and bonus do the same
    with -1 and +0.1. The bonus is not terminal and pays again on every re-entry.
    """
    prototype: Prototype
    n_states: int
    transitions: tuple
    rewards: tuple
    terminal_states: frozenset
    class_assignment: tuple
    action_permutation: tuple
    seed: int
    split: str = "train"
    root_state: int = 0

    @property
    def n_actions(self) -> int:
        return len(self.action_permutation)

    @property
    def time_limit(self) -> int:
        return 4 * self.n_states

    @property
    def non_terminal_states(self) -> list:
        return [s for s in range(self.n_states) if s not in self.terminal_states]

    def transition_table(self) -> np.ndarray:
        return np.array(self.transitions, dtype=np.int64)

    def reward_table(self) -> np.ndarray:
        return np.array(self.rewards, dtype=np.float64)

    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    def to_json(self) -> str:
        return json.dumps({
            "prototype": self.prototype.value,
            "n_states": self.n_states,
            "transitions": [list(r) for r in self.transitions],
            "rewards": [list(r) for r in self.rewards],
            "terminal_states": sorted(self.terminal_states),
            "class_assignment": list(self.class_assignment),
            "action_permutation": list(self.action_permutation),
            "seed": self.seed,
            "split": self.split,
            "root_state": self.root_state,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        d = json.loads(text)
        return cls(
            prototype=parse_prototype(d["prototype"]),
            n_states=d["n_states"],
            transitions=tuple(tuple(int(x) for x in r) for r in d["transitions"]),
            rewards=tuple(tuple(float(x) for x in r) for r in d["rewards"]),
            terminal_states=frozenset(d["terminal_states"]),
            class_assignment=tuple(d["class_assignment"]),
            action_permutation=tuple(d["action_permutation"]),
            seed=d["seed"],
            split=d["split"],
            root_state=d["root_state"],
        )


def _ring_tables(n, perm, rewards_on_entry, terminals):
    transitions, rewards = [], []
    for s in range(n):
        if s in terminals:
            transitions.append((s,) * len(perm))
            rewards.append((0.0,) * len(perm))
            continue
        base = ((s + 1) % n, (s - 1) % n)  # clockwise, counterclockwise
        succ = tuple(base[d] for d in perm)
        transitions.append(succ)
        rewards.append(tuple(rewards_on_entry.get(t, 0.0) for t in succ))
    return tuple(transitions), tuple(rewards)


def _tree_tables(depth, perm, good_leaf):
    n = 2 ** (depth + 1) - 1
    first_leaf = 2 ** depth - 1
    transitions, rewards = [], []
    for s in range(n):
        if s >= first_leaf:
            transitions.append((s,) * len(perm))
            rewards.append((0.0,) * len(perm))
            continue
        base = (2 * s + 1, 2 * s + 2)  # left, right
        succ = tuple(base[d] for d in perm)
        transitions.append(succ)
        rewards.append(tuple(
            (TREE_GOOD_LEAF_REWARD if t == good_leaf else TREE_BAD_LEAF_REWARD) if t >= first_leaf else 0.0
            for t in succ))
    return n, tuple(transitions), tuple(rewards), frozenset(range(first_leaf, n))


def _cycle_distance(a, b, n):
    d = abs(a - b) % n
    return min(d, n - d)


def make_task(prototype, seed: int, glyph_split: str = "train",
              library: Optional[GlyphLibrary] = None,
              tree_depth: int = DEFAULT_TREE_DEPTH) -> TaskSpec:
    """Draw one task of the given prototype. Pure in (prototype, seed, split, library, depth)."""
    proto = parse_prototype(prototype)
    if glyph_split not in SPLITS:
        raise ValueError(f"Unknown glyph split '{glyph_split}'. Expected one of {SPLITS}")
    if seed < 0:
        raise ValueError(f"Task seed must be non-negative, got {seed}")
    library = library or default_library()
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), list(Prototype).index(proto), SPLITS.index(glyph_split)]))
    perm = tuple(int(a) for a in rng.permutation(2))

    if proto is Prototype.RING:
        n = RING_STATES
        goal = int(rng.integers(n))
        terminals = frozenset({goal})
        transitions, rewards = _ring_tables(n, perm, {goal: RING_GOAL_REWARD}, terminals)
    elif proto is Prototype.HARD_RING:
        n = HARD_RING_STATES
        pit = int(rng.integers(n))
        candidates = [s for s in range(n) if _cycle_distance(s, pit, n) >= 2]
        bonus = int(candidates[rng.integers(len(candidates))])
        terminals = frozenset({pit})
        transitions, rewards = _ring_tables(
            n, perm, {pit: HARD_RING_PIT_REWARD, bonus: HARD_RING_BONUS_REWARD}, terminals)
    else:
        if tree_depth < 1:
            raise ValueError(f"tree_depth must be >= 1, got {tree_depth}")
        first_leaf = 2 ** tree_depth - 1
        good_leaf = int(rng.integers(first_leaf, 2 * first_leaf + 1))
        n, transitions, rewards, terminals = _tree_tables(tree_depth, perm, good_leaf)

    pool = library.split_classes(glyph_split)
    if len(pool) < n:
        raise ValueError(f"Insufficient glyph classes in '{glyph_split}' split: "
                         f"need {n}, library has {len(pool)}")
    classes = tuple(int(pool[i]) for i in rng.choice(len(pool), size=n, replace=False))

    return TaskSpec(proto, n, transitions, rewards, terminals, classes, perm,
                    int(seed), glyph_split)


def reachable_states(task: TaskSpec, start: Optional[int] = None) -> set:
    """Breadth-first search over the transition graph (terminal states are not expanded)."""
    start = task.root_state if start is None else start
    seen, queue = {start}, deque([start])
    while queue:
        s = queue.popleft()
        if s in task.terminal_states:
            continue
        for t in task.transitions[s]:
            if t not in seen:
                seen.add(t)
                queue.append(t)
    return seen


# ═══════════════════════════════════════════════════════════════════
#  OBSERVATIONS & DYNAMICS
# ═══════════════════════════════════════════════════════════════════

def observe_raw(task: TaskSpec, state_index: int, rng: np.random.Generator,
                library: Optional[GlyphLibrary] = None) -> np.ndarray:
    """uint8 28x28 sample of the state's glyph class, each pixel flipped w.p. noise_rate."""
    if not 0 <= state_index < task.n_states:
        raise ValueError(f"State {state_index} out of range for a {task.n_states}-state task")
    library = library or default_library()
    class_id = task.class_assignment[state_index]
    pool = library.samples.get(class_id)
    if pool:
        img = pool[int(rng.integers(len(pool)))]
    else:
        img = library.prototypes[class_id]
    flips = rng.random(img.shape) < library.noise_rate
    return np.where(flips, 255 - img, img).astype(np.uint8)


def to_pixels(raw: np.ndarray) -> np.ndarray:
    """uint8 image(s) -> float64 in [0, 1]."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def observe(task: TaskSpec, state_index: int, rng: np.random.Generator,
            library: Optional[GlyphLibrary] = None) -> np.ndarray:
    return to_pixels(observe_raw(task, state_index, rng, library))


def step(task: TaskSpec, state_index: int, action_index: int) -> tuple:
    """Deterministic transition: (next_state, reward, terminal)."""
    if not 0 <= state_index < task.n_states:
        raise ValueError(f"State {state_index} out of range for a {task.n_states}-state task")
    if not 0 <= action_index < task.n_actions:
        raise ValueError(f"Action {action_index} out of range ({task.n_actions} actions)")
    if state_index in task.terminal_states:
        raise ValueError(f"Cannot step from terminal state {state_index}")
    nxt = task.transitions[state_index][action_index]
    return nxt, task.rewards[state_index][action_index], nxt in task.terminal_states


class GraphWorldEnv:
    """Episodic wrapper: uniform random non-terminal start, time limit 4 x n_states.

    `state` is the hidden state index of the latest observation; it is bookkeeping
    for oracles and store stratification, never an input to a model.
    """

    def __init__(self, task: TaskSpec, library: Optional[GlyphLibrary] = None,
                 time_limit: Optional[int] = None):
        self.task = task
        self.library = library or default_library()
        self.time_limit = time_limit or task.time_limit
        self.state: Optional[int] = None
        self.observation: Optional[np.ndarray] = None
        self.done = True
        self.t = 0

    @property
    def n_actions(self) -> int:
        return self.task.n_actions

    def reset(self, rng: np.random.Generator, start_state: Optional[int] = None) -> np.ndarray:
        starts = self.task.non_terminal_states
        self.state = int(starts[rng.integers(len(starts))]) if start_state is None else start_state
        self.done = False
        self.t = 0
        self.observation = observe_raw(self.task, self.state, rng, self.library)
        return self.observation

    def step(self, action: int, rng: np.random.Generator) -> tuple:
        """Returns (observation, reward, terminal, truncated); the episode ends on either flag."""
        if self.done:
            raise ValueError("Environment must be reset before stepping")
        nxt, reward, terminal = step(self.task, self.state, action)
        self.t += 1
        obs = observe_raw(self.task, nxt, rng, self.library)
        truncated = not terminal and self.t >= self.time_limit
        self.state = nxt
        self.observation = obs
        self.done = terminal or truncated
        return obs, reward, terminal, truncated

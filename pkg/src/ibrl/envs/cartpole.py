"""Cart-pole with adjustable push force and pole half-length.

Physics follows the classic benchmark equations, integrated with semi-implicit
Euler.  All functions work on scalars or numpy arrays, so the same code steps one
environment or a whole batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
TOTAL_MASS = CART_MASS + POLE_MASS
TAU = 0.02
THETA_LIMIT = 12 * 2 * np.pi / 360
X_LIMIT = 2.4
MAX_STEPS = 200
INIT_BOUND = 0.05

TRAIN_FORCE_RANGE = (7.0, 13.0)
TRAIN_LENGTH_RANGE = (0.45, 0.55)
TRAIN_FORCES = (7.0, 9.0, 11.0, 13.0)
TRAIN_LENGTHS = (0.45, 0.50, 0.55)
TEST_FORCES = (1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0)
TEST_LENGTHS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7)
EXTREME_FORCES = (80.0, 160.0)
EXTREME_LENGTHS = (1.7, 3.4, 6.8)
# 20 held-out configurations (a sub-lattice of the test grid, none inside the
# training box) used for success counts along an annealing run
UNSEEN_FORCES = (1.0, 5.0, 20.0, 40.0)
UNSEEN_LENGTHS = (0.1, 0.3, 0.9, 1.3, 1.7)


@dataclass(frozen=True)
class CartPoleContext:
    force: float
    length: float

    def __post_init__(self):
        if not (self.force > 0 and self.length > 0):
            raise ValueError(f"force and length must be positive, got {self.force}, {self.length}")

    @property
    def polemass_length(self) -> float:
        return POLE_MASS * self.length

    def in_train_box(self) -> bool:
        return (TRAIN_FORCE_RANGE[0] <= self.force <= TRAIN_FORCE_RANGE[1]
                and TRAIN_LENGTH_RANGE[0] <= self.length <= TRAIN_LENGTH_RANGE[1])


def make_context(force: float, length: float) -> CartPoleContext:
    return CartPoleContext(float(force), float(length))


def context_grid(kind: str) -> list[CartPoleContext]:
    """Contexts ordered force-major (rows = forces, columns = lengths)."""
    axes = grid_axes(kind)
    return [make_context(f, l) for f, l in itertools.product(*axes)]


def grid_axes(kind: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    table = {
        "train": (TRAIN_FORCES, TRAIN_LENGTHS),
        "test": (TEST_FORCES, TEST_LENGTHS),
        "extreme": (EXTREME_FORCES, EXTREME_LENGTHS),
        "unseen": (UNSEEN_FORCES, UNSEEN_LENGTHS),
    }
    if kind not in table:
        raise ValueError(f"unknown grid kind {kind!r}; expected one of {sorted(table)}")
    return table[kind]


def dynamics(state, force, length):
    """One semi-implicit Euler step.  ``state`` is (..., 4) = x, x_dot, theta, theta_dot;
    ``force`` is the signed push."""
    x, x_dot, theta, theta_dot = (state[..., i] for i in range(4))
    cos, sin = np.cos(theta), np.sin(theta)
    pml = POLE_MASS * length
    temp = (force + pml * theta_dot**2 * sin) / TOTAL_MASS
    theta_acc = (GRAVITY * sin - cos * temp) / (length * (4.0 / 3.0 - POLE_MASS * cos**2 / TOTAL_MASS))
    x_acc = temp - pml * theta_acc * cos / TOTAL_MASS
    x_dot = x_dot + TAU * x_acc
    x = x + TAU * x_dot
    theta_dot = theta_dot + TAU * theta_acc
    theta = theta + TAU * theta_dot
    return np.stack([x, x_dot, theta, theta_dot], axis=-1)


def failed(state) -> np.ndarray:
    return (np.abs(state[..., 0]) > X_LIMIT) | (np.abs(state[..., 2]) > THETA_LIMIT)


class CartPoleEnv:
    """Single environment.  With ``context=None`` a fresh context is drawn
    uniformly from the training box at every reset."""

    obs_shape = (4,)
    n_actions = 2

    def __init__(self, context: CartPoleContext | None = None, rng: np.random.Generator | None = None):
        self.fixed_context = context
        self.context = context
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = np.zeros(4)
        self.steps = 0
        self.done = True

    def reset(self) -> np.ndarray:
        if self.fixed_context is None:
            self.context = make_context(self.rng.uniform(*TRAIN_FORCE_RANGE), self.rng.uniform(*TRAIN_LENGTH_RANGE))
        self.state = self.rng.uniform(-INIT_BOUND, INIT_BOUND, size=4)
        self.steps = 0
        self.done = False
        return self.state.copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise RuntimeError("step called on a finished episode; call reset first")
        if action not in (0, 1):
            raise ValueError(f"action must be 0 (left) or 1 (right), got {action}")
        push = self.context.force if action == 1 else -self.context.force
        self.state = dynamics(self.state, push, self.context.length)
        self.steps += 1
        self.done = bool(failed(self.state)) or self.steps >= MAX_STEPS
        return self.state.copy(), 1.0, self.done

    def get_state(self) -> dict:
        return {"state": [float(v) for v in self.state], "steps": self.steps, "done": self.done,
                "context": [self.context.force, self.context.length] if self.context else None,
                "rng": self.rng.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.state = np.array(state["state"], dtype=np.float64)
        self.steps = int(state["steps"])
        self.done = bool(state["done"])
        self.context = make_context(*state["context"]) if state["context"] else None
        self.rng.bit_generator.state = state["rng"]

    def current_observation(self) -> np.ndarray:
        return self.state.copy()


class BatchCartPole:
    """``n`` lock-stepped episodes sharing one fixed context; finished episodes
    are frozen and stop accumulating reward."""

    def __init__(self, context: CartPoleContext, n: int, rng: np.random.Generator):
        self.context = context
        self.n = n
        self.rng = rng

    def run(self, policy_fn) -> np.ndarray:
        """Roll all episodes to completion; ``policy_fn(obs (k,4)) -> actions (k,)``.
        Returns undiscounted returns per episode."""
        state = self.rng.uniform(-INIT_BOUND, INIT_BOUND, size=(self.n, 4))
        alive = np.ones(self.n, dtype=bool)
        returns = np.zeros(self.n)
        for _ in range(MAX_STEPS):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            actions = np.asarray(policy_fn(state[idx]))
            push = np.where(actions == 1, self.context.force, -self.context.force)
            state[idx] = dynamics(state[idx], push, self.context.length)
            returns[idx] += 1.0
            alive[idx] = ~failed(state[idx])
        return returns

"""Random-maze GridWorld: 12x12 board, 4-directional moves, reward 1 at the goal."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

SIZE = 12
MAX_STEPS = 100
N_ACTIONS = 4
# up, down, left, right as (row, col) deltas
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
MIN_START_GOAL_DISTANCE = 6
EXTRA_OPENING_FRACTION = 0.1


@dataclass
class MazeLayout:
    walls: np.ndarray  # (12, 12) bool
    start: tuple[int, int]
    goal: tuple[int, int]
    seed: int = -1

    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(map(int, rc)) for rc in np.argwhere(~self.walls)]

    def same_walls(self, other: "MazeLayout") -> bool:
        return bool(np.array_equal(self.walls, other.walls))

    def to_text(self) -> str:
        rows = []
        for r in range(SIZE):
            chars = []
            for c in range(SIZE):
                if (r, c) == self.goal:
                    chars.append("G")
                elif (r, c) == self.start:
                    chars.append("S")
                else:
                    chars.append("#" if self.walls[r, c] else ".")
            rows.append("".join(chars))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, seed: int = -1) -> "MazeLayout":
        rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
        if len(rows) != SIZE or any(len(r) != SIZE for r in rows):
            raise ValueError(f"maze text must be {SIZE} rows of {SIZE} characters")
        walls = np.zeros((SIZE, SIZE), dtype=bool)
        start = goal = None
        for r, line in enumerate(rows):
            for c, ch in enumerate(line):
                if ch == "#":
                    walls[r, c] = True
                elif ch == "G":
                    goal = (r, c)
                elif ch == "S":
                    start = (r, c)
                elif ch != ".":
                    raise ValueError(f"unexpected character {ch!r} at row {r}, column {c}")
        if start is None or goal is None:
            raise ValueError("maze text needs exactly one S and one G")
        layout = cls(walls, start, goal, seed)
        validate_layout(layout)
        return layout


def reachable(walls: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Flood fill over free cells from ``start``."""
    seen = np.zeros_like(walls, dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < SIZE and 0 <= nc < SIZE and not walls[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                queue.append((nr, nc))
    return seen


def shortest_path_length(layout: MazeLayout) -> int:
    dist = {layout.start: 0}
    queue = deque([layout.start])
    while queue:
        cell = queue.popleft()
        if cell == layout.goal:
            return dist[cell]
        for dr, dc in MOVES:
            nxt = (cell[0] + dr, cell[1] + dc)
            if not layout.walls[nxt] and nxt not in dist:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return -1


def validate_layout(layout: MazeLayout) -> None:
    w = layout.walls
    if w.shape != (SIZE, SIZE):
        raise ValueError(f"walls must be {SIZE}x{SIZE}")
    if not (w[0].all() and w[-1].all() and w[:, 0].all() and w[:, -1].all()):
        raise ValueError("border cells must be walls")
    if layout.start == layout.goal:
        raise ValueError("start and goal coincide")
    if w[layout.start] or w[layout.goal]:
        raise ValueError("start and goal must be free cells")
    if not reachable(w, layout.start)[layout.goal]:
        raise ValueError("goal is not reachable from start")


def _carve(rng: np.random.Generator) -> np.ndarray:
    walls = np.ones((SIZE, SIZE), dtype=bool)
    n = (SIZE - 2) // 2  # 5x5 lattice of rooms at odd coordinates
    visited = np.zeros((n, n), dtype=bool)
    start = (int(rng.integers(n)), int(rng.integers(n)))
    visited[start] = True
    walls[2 * start[0] + 1, 2 * start[1] + 1] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = [(dr, dc) for dr, dc in MOVES
                   if 0 <= r + dr < n and 0 <= c + dc < n and not visited[r + dr, c + dc]]
        if not options:
            stack.pop()
            continue
        dr, dc = options[int(rng.integers(len(options)))]
        nr, nc = r + dr, c + dc
        visited[nr, nc] = True
        walls[2 * r + 1 + dr, 2 * c + 1 + dc] = False
        walls[2 * nr + 1, 2 * nc + 1] = False
        stack.append((nr, nc))
    # knock out a share of the interior walls to create loops
    interior = np.argwhere(walls[1:-1, 1:-1]) + 1
    k = int(round(EXTRA_OPENING_FRACTION * len(interior)))
    for idx in rng.choice(len(interior), size=k, replace=False):
        walls[tuple(interior[idx])] = False
    return walls


def generate_maze(seed: int) -> MazeLayout:
    """Randomized depth-first maze with extra openings; start and goal are free
    cells at Manhattan distance >= 6.  Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    while True:
        walls = _carve(rng)
        free = np.argwhere(~walls)
        start = tuple(int(v) for v in free[rng.integers(len(free))])
        far = [tuple(int(v) for v in rc) for rc in free
               if abs(rc[0] - start[0]) + abs(rc[1] - start[1]) >= MIN_START_GOAL_DISTANCE]
        if not far:
            continue
        goal = far[int(rng.integers(len(far)))]
        layout = MazeLayout(walls, start, goal, seed)
        if reachable(walls, start)[goal]:
            return layout


def sample_transfer_split(rng: np.random.Generator) -> tuple[list[MazeLayout], MazeLayout]:
    """Four mazes with pairwise distinct walls: three for training, one held out."""
    layouts: list[MazeLayout] = []
    while len(layouts) < 4:
        cand = generate_maze(int(rng.integers(2**31 - 1)))
        if not any(cand.same_walls(l) for l in layouts):
            layouts.append(cand)
    return layouts[:3], layouts[3]


def observation(layout: MazeLayout, agent: tuple[int, int]) -> np.ndarray:
    obs = np.zeros((SIZE, SIZE, 3))
    obs[..., 0] = layout.walls
    obs[layout.goal + (1,)] = 1.0
    obs[agent + (2,)] = 1.0
    return obs


@dataclass
class GridEnv:
    """One maze episode at a time.  ``layouts`` is the pool sampled at reset."""

    layouts: list[MazeLayout]
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    layout: MazeLayout | None = None
    layout_index: int = 0
    agent: tuple[int, int] = (0, 0)
    steps: int = 0
    done: bool = True

    obs_shape = (SIZE, SIZE, 3)
    n_actions = N_ACTIONS

    def reset(self, layout: MazeLayout | None = None) -> np.ndarray:
        if layout is None:
            self.layout_index = int(self.rng.integers(len(self.layouts))) if len(self.layouts) > 1 else 0
            layout = self.layouts[self.layout_index]
        self.layout = layout
        self.agent = layout.start
        self.steps = 0
        self.done = False
        return observation(layout, self.agent)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise RuntimeError("step called on a finished episode; call reset first")
        action = int(action)
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")
        dr, dc = MOVES[action]
        target = (self.agent[0] + dr, self.agent[1] + dc)
        if not self.layout.walls[target]:
            self.agent = target
        self.steps += 1
        reward = 0.0
        if self.agent == self.layout.goal:
            reward, self.done = 1.0, True
        elif self.steps >= MAX_STEPS:
            self.done = True
        return observation(self.layout, self.agent), reward, self.done

    def get_state(self) -> dict:
        return {"layout_index": self.layout_index, "agent": list(self.agent), "steps": self.steps,
                "done": self.done, "rng": self.rng.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.layout_index = int(state["layout_index"])
        self.layout = self.layouts[self.layout_index]
        self.agent = tuple(state["agent"])
        self.steps = int(state["steps"])
        self.done = bool(state["done"])
        self.rng.bit_generator.state = state["rng"]

    def current_observation(self) -> np.ndarray:
        return observation(self.layout, self.agent)


def value_iteration(layout: MazeLayout, gamma: float = 0.99, tol: float = 1e-12) -> dict[tuple[int, int], float]:
    """Optimal state values of the maze MDP (goal absorbing, reward 1 on entry)."""
    free = layout.free_cells()
    v = {cell: 0.0 for cell in free}
    while True:
        delta = 0.0
        for cell in free:
            if cell == layout.goal:
                continue
            best = 0.0
            for dr, dc in MOVES:
                nxt = (cell[0] + dr, cell[1] + dc)
                if layout.walls[nxt]:
                    nxt = cell
                q = 1.0 if nxt == layout.goal else gamma * v[nxt]
                best = max(best, q)
            delta = max(delta, abs(best - v[cell]))
            v[cell] = best
        if delta < tol:
            return v

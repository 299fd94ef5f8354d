"""Generalization grids, success counts, maze transfer curves and embedding dumps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nnkit as nn
from .envs import cartpole as cp
from .envs import grid as gw
from .policy import PolicyBundle, encode, value

log = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 150.0
EVAL_EPISODES = 20


def _policy_fn(bundle: PolicyBundle, rng: np.random.Generator, action_mode: str, code_mode: str):
    def fn(obs):
        code = encode(bundle, obs)
        if code_mode == "stochastic" and code.sigma is not None:
            z = code.mu + code.sigma * rng.standard_normal(code.mu.shape)
        else:
            z = code.mu
        logits = nn.predict(bundle.actor, z)
        if action_mode == "greedy":
            return np.argmax(logits, axis=-1)
        p = np.exp(logits - logits.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random(len(p))[:, None]
        return np.minimum((u > np.cumsum(p, axis=-1)).sum(axis=-1), p.shape[-1] - 1)

    return fn


def evaluate_context(bundle: PolicyBundle, context: cp.CartPoleContext, n_episodes: int = EVAL_EPISODES,
                     rng: np.random.Generator | None = None, action_mode: str = "greedy",
                     code_mode: str = "mean") -> float:
    """Mean undiscounted return over ``n_episodes`` full CartPole episodes."""
    rng = rng if rng is not None else np.random.default_rng(0)
    returns = cp.BatchCartPole(context, n_episodes, rng).run(_policy_fn(bundle, rng, action_mode, code_mode))
    return float(returns.mean())


def evaluate_scripted(policy_fn, context: cp.CartPoleContext, n_episodes: int = EVAL_EPISODES,
                      rng: np.random.Generator | None = None) -> float:
    rng = rng if rng is not None else np.random.default_rng(0)
    return float(cp.BatchCartPole(context, n_episodes, rng).run(policy_fn).mean())


@dataclass
class EvalGrid:
    kind: str
    forces: tuple[float, ...]
    lengths: tuple[float, ...]
    cells: np.ndarray  # (len(forces), len(lengths)) mean returns
    train_mask: np.ndarray = field(init=False)
    unseen_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        self.train_mask = np.array([[cp.make_context(f, l).in_train_box() for l in self.lengths]
                                    for f in self.forces])
        uf, ul = cp.UNSEEN_FORCES, cp.UNSEEN_LENGTHS
        if self.kind in ("test", "unseen"):
            self.unseen_mask = np.array([[f in uf and l in ul for l in self.lengths] for f in self.forces])
        else:
            self.unseen_mask = ~self.train_mask

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["force", "length", "mean_return", "train_box", "unseen"])
        for i, f in enumerate(self.forces):
            for j, l in enumerate(self.lengths):
                w.writerow([f, l, repr(float(self.cells[i, j])), int(self.train_mask[i, j]),
                            int(self.unseen_mask[i, j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, kind: str, text: str) -> "EvalGrid":
        rows = list(csv.DictReader(io.StringIO(text)))
        forces = tuple(sorted({float(r["force"]) for r in rows}))
        lengths = tuple(sorted({float(r["length"]) for r in rows}))
        cells = np.zeros((len(forces), len(lengths)))
        for r in rows:
            cells[forces.index(float(r["force"])), lengths.index(float(r["length"]))] = float(r["mean_return"])
        return cls(kind, forces, lengths, cells)

    def to_svg(self, cell_px: int = 48) -> str:
        return render_heatmap_svg(self, cell_px)


def eval_grid(bundle: PolicyBundle, kind: str, n_episodes: int = EVAL_EPISODES, seed: int = 0,
              action_mode: str = "greedy", code_mode: str = "mean") -> EvalGrid:
    """Evaluate every context of a grid.  Each cell gets its own rng stream keyed
    by (seed, cell index), so cells can be computed in any order."""
    forces, lengths = cp.grid_axes(kind)
    cells = np.zeros((len(forces), len(lengths)))
    for k, ctx in enumerate(cp.context_grid(kind)):
        rng = np.random.default_rng([seed, k])
        cells[divmod(k, len(lengths))] = evaluate_context(bundle, ctx, n_episodes, rng, action_mode, code_mode)
    return EvalGrid(kind, forces, lengths, cells)


def success_count(grid: EvalGrid, threshold: float = SUCCESS_THRESHOLD, unseen_only: bool = True) -> int:
    """Number of cells with mean return above ``threshold``; by default only the
    held-out configurations (never the training box) are counted."""
    mask = grid.unseen_mask & ~grid.train_mask if unseen_only else np.ones_like(grid.train_mask)
    return int(np.sum((grid.cells > threshold) & mask))


def _ramp(v: float) -> str:
    # 0 -> dark red, 100 -> amber, 200 -> green
    t = min(max(v / 200.0, 0.0), 1.0)
    stops = [(0.0, (127, 0, 0)), (0.5, (240, 180, 40)), (1.0, (30, 150, 60))]
    for (t0, c0), (t1, c1) in zip(stops, stops[1:]):
        if t <= t1:
            u = (t - t0) / (t1 - t0)
            return "#%02x%02x%02x" % tuple(int(round(a + u * (b - a))) for a, b in zip(c0, c1))
    return "#1e963c"


def render_heatmap_svg(grid: EvalGrid, cell_px: int = 48) -> str:
    """Standalone SVG: lengths on x, forces on y (largest at the top), cells
    coloured on a fixed 0..200 ramp, training cells outlined."""
    nf, nl = grid.cells.shape
    left, top = 60, 20
    width, height = left + nl * cell_px + 20, top + nf * cell_px + 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">']
    for i in range(nf):
        row = nf - 1 - i
        y = top + row * cell_px
        parts.append(f'<text x="{left - 6}" y="{y + cell_px / 2 + 4}" text-anchor="end">{grid.forces[i]:g}</text>')
        for j in range(nl):
            x = left + j * cell_px
            v = grid.cells[i, j]
            parts.append(f'<rect x="{x}" y="{y}" width="{cell_px}" height="{cell_px}" fill="{_ramp(v)}"/>')
            parts.append(f'<text x="{x + cell_px / 2}" y="{y + cell_px / 2 + 4}" text-anchor="middle" '
                         f'fill="white">{v:.0f}</text>')
            if grid.train_mask[i, j]:
                parts.append(f'<rect x="{x + 1}" y="{y + 1}" width="{cell_px - 2}" height="{cell_px - 2}" '
                             f'fill="none" stroke="black" stroke-width="3"/>')
    for j in range(nl):
        x = left + j * cell_px + cell_px / 2
        parts.append(f'<text x="{x}" y="{top + nf * cell_px + 16}" text-anchor="middle">{grid.lengths[j]:g}</text>')
    parts.append(f'<text x="{left + nl * cell_px / 2}" y="{height - 8}" text-anchor="middle">pole length</text>')
    parts.append(f'<text x="12" y="{top + nf * cell_px / 2}" transform="rotate(-90 12 {top + nf * cell_px / 2})" '
                 f'text-anchor="middle">push force</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -------------------------------------------------------------------- mazes


def evaluate_maze(bundle: PolicyBundle, layout: gw.MazeLayout, n_episodes: int = 1,
                  rng: np.random.Generator | None = None, action_mode: str = "greedy",
                  code_mode: str = "mean") -> float:
    """Mean return (= success rate) on one maze."""
    rng = rng if rng is not None else np.random.default_rng(0)
    fn = _policy_fn(bundle, rng, action_mode, code_mode)
    total = 0.0
    for _ in range(n_episodes):
        env = gw.GridEnv([layout], rng)
        obs = env.reset(layout)
        done = False
        while not done:
            obs, r, done = env.step(int(fn(obs[None])[0]))
        total += r
    return total / n_episodes


@dataclass
class TransferCurve:
    variant: str
    beta: float
    steps: list[int]
    returns: list[float]

    def steps_to_threshold(self, threshold: float = 0.9) -> int | None:
        for s, r in zip(self.steps, self.returns):
            if r >= threshold:
                return s
        return None


def transfer_curves_csv(curves: Sequence[TransferCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "beta", "env_steps", "mean_return"])
    for c in curves:
        for s, r in zip(c.steps, c.returns):
            w.writerow([c.variant, repr(c.beta), s, repr(float(r))])
    return buf.getvalue()


@dataclass
class EmbeddingRow:
    state_id: int
    cell: tuple[int, int]
    mu: np.ndarray
    value: float
    greedy_action: int


def export_embeddings(bundle: PolicyBundle, layout: gw.MazeLayout) -> list[EmbeddingRow]:
    """Mean code, critic value and greedy action for the agent on every free cell."""
    if bundle.env != "grid":
        raise ValueError(f"embedding export needs a grid policy, got a {bundle.env} policy")
    cells = layout.free_cells()
    obs = np.stack([gw.observation(layout, c) for c in cells])
    code = encode(bundle, obs)
    vals = value(bundle, code.mu)
    greedy = np.argmax(nn.predict(bundle.actor, code.mu), axis=-1)
    return [EmbeddingRow(i, c, code.mu[i], float(vals[i]), int(greedy[i])) for i, c in enumerate(cells)]


def embeddings_csv(rows: Sequence[EmbeddingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = len(rows[0].mu) if rows else 0
    w.writerow(["state_id", "row", "col", "value", "greedy_action"] + [f"mu_{k}" for k in range(dim)])
    for r in rows:
        w.writerow([r.state_id, r.cell[0], r.cell[1], repr(r.value), r.greedy_action] + [repr(float(v)) for v in r.mu])
    return buf.getvalue()


def critic_value_correlation(bundle: PolicyBundle, layout: gw.MazeLayout, gamma: float = 0.99) -> float:
    """Spearman rank correlation between learned critic values and exact optimal
    values over all free non-goal cells."""
    from scipy.stats import spearmanr

    rows = [r for r in export_embeddings(bundle, layout) if r.cell != layout.goal]
    exact = gw.value_iteration(layout, gamma)
    rho = spearmanr([r.value for r in rows], [exact[r.cell] for r in rows]).statistic
    return float(rho)

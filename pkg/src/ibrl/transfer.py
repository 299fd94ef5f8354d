"""Maze transfer experiment: pretrain on three mazes, then keep training on a
fourth held-out maze and record how fast each variant adapts."""

from __future__ import annotations

import dataclasses
import logging
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import agents
from .agents import TrainConfig
from .envs import grid as gw
from .evaluation import TransferCurve
from .policy import PolicyBundle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    beta: float

    @property
    def deterministic(self) -> bool:
        return self.beta == 0.0

    @classmethod
    def parse(cls, text: str) -> "Variant":
        name, _, beta = text.partition(":")
        return cls(name.strip(), float(beta))


DEFAULT_VARIANTS = (Variant("baseline", 0.0), Variant("ablation", 1e-4), Variant("ib", 0.05))


@dataclass
class TransferResult:
    split_seed: int
    train_seeds: list[int]
    held_out_seed: int
    curves: list[TransferCurve]
    # final policy per variant name, after retraining on the held-out maze
    bundles: dict[str, PolicyBundle] = dataclasses.field(default_factory=dict)
    held_out: gw.MazeLayout | None = None


def run_variant(config: TrainConfig, variant: Variant, train_mazes: Sequence[gw.MazeLayout],
                held_out: gw.MazeLayout, pretrain_steps: int, retrain_steps: int,
                window: int = 100) -> tuple[TransferCurve, PolicyBundle]:
    """Pretrain at the variant's beta, then continue on ``held_out`` with the same
    optimizer state.  The curve holds the rolling mean return of the last
    ``window`` held-out episodes after every update."""
    cfg = dataclasses.replace(config, deterministic=variant.deterministic, total_steps=pretrain_steps)
    state = agents.init_state(cfg, agents.make_envs(cfg, train_mazes))
    agents.train(cfg, state.runner.envs, variant.beta, state=state)

    # fresh env rng streams for the second phase, keyed off the same seed
    retrain_cfg = dataclasses.replace(cfg, seed=cfg.seed + 10_000, total_steps=retrain_steps)
    state.runner = agents.Runner(agents.make_envs(retrain_cfg, [held_out]), state.runner.rng)
    state.env_steps = 0
    state.recent = deque(maxlen=window)
    steps, returns = [], []
    while state.env_steps < retrain_steps:
        row = agents.train_iteration(state, retrain_cfg, variant.beta)
        steps.append(row["env_steps"])
        returns.append(row["rolling_return"] if len(state.recent) >= window else float("nan"))
    return TransferCurve(variant.name, variant.beta, steps, returns), state.bundle


def run_split(config: TrainConfig, split_seed: int, variants: Sequence[Variant] = DEFAULT_VARIANTS,
              pretrain_steps: int = 400_000, retrain_steps: int = 400_000, window: int = 100) -> TransferResult:
    train_mazes, held_out = gw.sample_transfer_split(np.random.default_rng(split_seed))
    curves, bundles = [], {}
    for v in variants:
        cfg = dataclasses.replace(config, seed=split_seed)
        curve, bundle = run_variant(cfg, v, train_mazes, held_out, pretrain_steps, retrain_steps, window)
        log.info("split %d %s: steps to threshold %s", split_seed, v.name, curve.steps_to_threshold())
        curves.append(curve)
        bundles[v.name] = bundle
    return TransferResult(split_seed, [m.seed for m in train_mazes], held_out.seed, curves, bundles, held_out)


def speedup_summary(results: Sequence[TransferResult], threshold: float = 0.9,
                    budget: int | None = None) -> dict[str, float]:
    """Median steps-to-threshold per variant.  A curve that never reaches the
    threshold counts as ``budget`` (the retrain length) so the median stays defined."""
    out: dict[str, list[float]] = {}
    for res in results:
        for c in res.curves:
            s = c.steps_to_threshold(threshold)
            if s is None:
                s = budget if budget is not None else (c.steps[-1] if c.steps else 0)
            out.setdefault(c.variant, []).append(float(s))
    return {k: float(np.median(v)) for k, v in out.items()}

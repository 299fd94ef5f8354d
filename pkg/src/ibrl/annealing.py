"""Beta annealing: train once while ramping the KL weight up from zero and keep a
checkpoint family along the way."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import agents
from .agents import TrainConfig, TrainState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnealSchedule:
    """Iteration-indexed schedule: ``warmup`` iterations at beta = 0 with the
    encoder used deterministically, then a ramp from ``beta_start`` to
    ``beta_end`` that ends at ``total``."""

    total: int
    warmup: int
    beta_start: float = 1e-7
    beta_end: float = 1e-3
    shape: str = "geometric"
    n_checkpoints: int = 10

    def __post_init__(self):
        if self.shape not in ("geometric", "linear"):
            raise ValueError(f"ramp shape must be 'geometric' or 'linear', got {self.shape!r}")
        if not 0 <= self.warmup < self.total:
            raise ValueError("warmup must be in [0, total)")
        if not 0 < self.beta_start <= self.beta_end:
            raise ValueError("need 0 < beta_start <= beta_end")
        if self.n_checkpoints <= 0 or (self.total - self.warmup) % self.n_checkpoints:
            raise ValueError(f"{self.n_checkpoints} checkpoints must evenly divide the "
                             f"{self.total - self.warmup}-iteration ramp")

    @classmethod
    def from_total(cls, total: int, warmup_fraction: float = 0.2, **kw) -> "AnnealSchedule":
        n = kw.get("n_checkpoints", 10)
        warmup = int(round(total * warmup_fraction))
        ramp = (total - warmup) // n * n  # make the ramp divisible
        if ramp == 0:
            raise ValueError(f"{total} iterations leave no room for {n} ramp checkpoints")
        return cls(total=total, warmup=total - ramp, **kw)

    @property
    def interval(self) -> int:
        return (self.total - self.warmup) // self.n_checkpoints

    def checkpoint_iterations(self) -> list[int]:
        """Ends of the evenly spaced ramp intervals; the last one is ``total``."""
        return [self.warmup + k * self.interval for k in range(1, self.n_checkpoints + 1)]


def beta_at(schedule: AnnealSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total:
        raise ValueError(f"step {step} outside [0, {schedule.total}]")
    if step < schedule.warmup:
        return 0.0
    frac = (step - schedule.warmup) / (schedule.total - schedule.warmup)
    if schedule.shape == "linear":
        return schedule.beta_start + frac * (schedule.beta_end - schedule.beta_start)
    return float(math.exp(math.log(schedule.beta_start)
                          + frac * (math.log(schedule.beta_end) - math.log(schedule.beta_start))))


@dataclass
class FamilyEntry:
    iteration: int
    beta: float
    params: dict[str, np.ndarray]
    summary: dict = field(default_factory=dict)
    evaluation: object | None = None  # EvalGrid or comparable, attached later


@dataclass
class PolicyFamily:
    entries: list[FamilyEntry] = field(default_factory=list)

    def add(self, entry: FamilyEntry) -> None:
        if self.entries:
            if entry.iteration <= self.entries[-1].iteration:
                raise ValueError("family iterations must strictly increase")
            if entry.beta < self.entries[-1].beta:
                raise ValueError("family betas must not decrease")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def snapshot_params(bundle) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in bundle.named_parameters()}


def load_params(bundle, params: dict[str, np.ndarray]) -> None:
    for name, p in bundle.named_parameters():
        if params[name].shape != p.shape:
            raise ValueError(f"{name}: shape {params[name].shape} does not match {p.shape}")
        p.data = params[name].copy()


def bundle_from_entry(template, entry: FamilyEntry):
    bundle = copy.deepcopy(template)
    load_params(bundle, entry.params)
    return bundle


def anneal_run(config: TrainConfig, schedule: AnnealSchedule, envs: Sequence,
               evaluate: Callable[[object], dict] | None = None,
               state: TrainState | None = None, family: PolicyFamily | None = None,
               on_checkpoint: Callable[[FamilyEntry, TrainState], None] | None = None,
               on_update: Callable[[TrainState, dict], None] | None = None) -> tuple[PolicyFamily, list[dict]]:
    """Train for ``schedule.total`` iterations with beta from ``beta_at``.

    After each checkpoint iteration the parameters are snapshotted together with
    quick training statistics and, if given, ``evaluate(bundle)``.  Passing a
    restored ``state`` and ``family`` resumes a run.
    """
    per_iter = config.n_steps * config.n_envs
    config = dataclasses.replace(config, total_steps=schedule.total * per_iter)
    if config.deterministic:
        raise ValueError("annealing needs a stochastic encoder (deterministic=False)")
    family = family if family is not None else PolicyFamily()
    marks = set(schedule.checkpoint_iterations())
    window: list[dict] = []

    def hook(st: TrainState, row: dict):
        window.append(row)
        if on_update is not None:
            on_update(st, row)
        it = st.updates
        if it in marks:
            recent = window[-max(1, schedule.interval):]
            summary = {
                "env_steps": st.env_steps,
                "rolling_return": row["rolling_return"],
                "mean_kl": float(np.mean([r["mean_kl"] for r in recent])),
            }
            if evaluate is not None:
                summary.update(evaluate(st.bundle))
            params = snapshot_params(st.bundle)
            for name, arr in params.items():
                if not np.isfinite(arr).all():
                    raise FloatingPointError(f"non-finite parameters in {name} at beta={row['beta']:.3g}")
            entry = FamilyEntry(it, beta_at(schedule, it), params, summary)
            family.add(entry)
            log.info("checkpoint iteration %d beta %.3g return %.1f kl %.2f", it, entry.beta,
                     summary["rolling_return"], summary["mean_kl"])
            if on_checkpoint is not None:
                on_checkpoint(entry, st)

    # the update that completes iteration i + 1 runs at beta_at(i + 1); codes are
    # sampled as soon as beta is positive
    _, metrics = agents.train(
        config, envs,
        beta_schedule=lambda i: beta_at(schedule, min(i + 1, schedule.total)),
        state=state, on_update=hook,
    )
    return family, metrics


def select_checkpoint(family: PolicyFamily, criterion: str = "best-unseen-success") -> FamilyEntry:
    """Best entry under ``criterion``; ties go to the larger beta."""
    key = {"best-unseen-success": "unseen_success", "best-mean-test-reward": "mean_test_reward"}.get(criterion)
    if key is None:
        raise ValueError(f"unknown criterion {criterion!r}")
    if not len(family):
        raise ValueError("empty family")
    if any(key not in e.summary for e in family):
        raise ValueError(f"family entries lack the {key!r} evaluation needed for {criterion}")
    best = family[0]
    for e in family:
        if (e.summary[key], e.beta) >= (best.summary[key], best.beta):
            best = e
    return best

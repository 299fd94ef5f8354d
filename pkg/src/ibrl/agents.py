"""A2C and PPO trainers with the KL-shaped reward and KL loss term.

Rollouts run the encoder, draw a reparameterized code, sample an action and
store everything the update needs, including the standard-normal draws, so the
update can rebuild the very same codes under the current parameters.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import nnkit as nn
from .objective import gaussian_kl, ib_loss, kl_tensor, modified_reward
from .policy import SIGMA_MAX, SIGMA_MIN, PolicyBundle, forward_batch, make_bundle

log = logging.getLogger(__name__)

METRIC_FIELDS = ("update", "env_steps", "beta", "mean_return", "rolling_return", "episodes",
                 "mean_kl", "policy_loss", "value_loss", "entropy", "grad_norm")


@dataclass
class TrainConfig:
    algorithm: str = "ppo"
    env: str = "cartpole"
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    clip_range: float = 0.2
    minibatch_size: int = 128
    epochs: int = 10
    n_steps: int = 2048
    n_envs: int = 1
    max_grad_norm: float = 0.5
    total_steps: int = 300_000
    code_dim: int = 32
    deterministic: bool = False
    logvar_init: float = -4.0
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("a2c", "ppo"):
            raise ValueError(f"algorithm must be 'a2c' or 'ppo', got {self.algorithm!r}")
        if self.env not in ("grid", "cartpole"):
            raise ValueError(f"env must be 'grid' or 'cartpole', got {self.env!r}")
        for name in ("gamma", "gae_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("minibatch_size", "epochs", "n_steps", "n_envs", "total_steps", "code_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.clip_range <= 0 or self.lr <= 0:
            raise ValueError("clip_range and lr must be positive")

    @classmethod
    def grid_defaults(cls, **kw) -> "TrainConfig":
        base = dict(algorithm="a2c", env="grid", lr=7e-4, entropy_coef=0.01, value_coef=0.5,
                    n_steps=5, n_envs=16, epochs=1, code_dim=64, total_steps=500_000)
        base.update(kw)
        return cls(**base)

    @classmethod
    def cartpole_defaults(cls, **kw) -> "TrainConfig":
        base = dict(algorithm="ppo", env="cartpole", lr=3e-4, entropy_coef=0.01, value_coef=0.5,
                    n_steps=2048, n_envs=1, epochs=10, minibatch_size=128, code_dim=32)
        base.update(kw)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class RolloutBatch:
    """Time-major (T, E) arrays for E parallel environments."""

    obs: np.ndarray
    noise: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray | None
    z: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    kl: np.ndarray
    mod_rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    beta: float
    stochastic: bool
    episode_returns: list[float] = field(default_factory=list)

    def __len__(self):
        return self.actions.size


class Runner:
    """Owns the environments and the in-flight episode state between rollouts."""

    def __init__(self, envs: Sequence, rng: np.random.Generator):
        self.envs = list(envs)
        self.rng = rng
        self.obs = np.stack([env.reset() for env in self.envs])
        self.ep_returns = np.zeros(len(self.envs))

    def get_state(self) -> dict:
        return {"envs": [env.get_state() for env in self.envs], "ep_returns": self.ep_returns.tolist(),
                "rng": self.rng.bit_generator.state}

    def set_state(self, state: dict) -> None:
        for env, s in zip(self.envs, state["envs"]):
            env.set_state(s)
        self.obs = np.stack([env.current_observation() for env in self.envs])
        self.ep_returns = np.array(state["ep_returns"], dtype=np.float64)
        self.rng.bit_generator.state = state["rng"]


def policy_step(bundle: PolicyBundle, obs: np.ndarray, rng: np.random.Generator, stochastic: bool):
    """Inference pass for a batch of observations: code, action, log-prob, value, KL."""
    h = nn.predict(bundle.trunk, obs)
    mu = nn.predict(bundle.mu_head, h)
    if bundle.logvar_head is not None:
        logvar = nn.predict(bundle.logvar_head, h)
        sigma = np.clip(np.exp(0.5 * logvar), SIGMA_MIN, SIGMA_MAX)
        kl = gaussian_kl(mu, sigma)
    else:
        sigma = None
        kl = np.zeros(len(obs))
    if stochastic and sigma is not None:
        noise = rng.standard_normal(mu.shape)
        z = mu + sigma * noise
    else:
        noise = np.zeros_like(mu)
        z = mu
    logits = nn.predict(bundle.actor, z)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp_all = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(logp_all)
    u = rng.random(len(obs))[:, None]
    actions = np.minimum((u > np.cumsum(probs, axis=-1)).sum(axis=-1), probs.shape[-1] - 1)
    logp = logp_all[np.arange(len(obs)), actions]
    values = nn.predict(bundle.critic, z)[:, 0]
    return dict(mu=mu, sigma=sigma, noise=noise, z=z, actions=actions, logp=logp, values=values, kl=kl)


def collect_rollouts(bundle: PolicyBundle, runner: Runner, n_steps: int, beta: float,
                     stochastic: bool | None = None) -> RolloutBatch:
    """Run ``n_steps`` steps in every environment.  KL is computed once per step and
    feeds the shaped reward; the update reuses the stored value."""
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    if stochastic is None:
        stochastic = beta > 0
    stochastic = stochastic and not bundle.deterministic
    n_envs = len(runner.envs)
    buf: dict[str, list] = {k: [] for k in ("obs", "noise", "mu", "sigma", "z", "actions", "logp",
                                             "rewards", "kl", "values", "dones")}
    finished: list[float] = []
    for t in range(n_steps):
        out = policy_step(bundle, runner.obs, runner.rng, stochastic)
        buf["obs"].append(runner.obs)
        for k in ("noise", "mu", "sigma", "z", "actions", "logp", "values", "kl"):
            buf[k].append(out[k])
        rewards = np.zeros(n_envs)
        dones = np.zeros(n_envs, dtype=bool)
        next_obs = []
        for i, env in enumerate(runner.envs):
            try:
                ob, r, d = env.step(int(out["actions"][i]))
            except Exception as exc:
                raise RuntimeError(f"environment {i} failed at rollout step {t}") from exc
            rewards[i], dones[i] = r, d
            runner.ep_returns[i] += r
            if d:
                finished.append(float(runner.ep_returns[i]))
                runner.ep_returns[i] = 0.0
                ob = env.reset()
            next_obs.append(ob)
        runner.obs = np.stack(next_obs)
        buf["rewards"].append(rewards)
        buf["dones"].append(dones)
    last = policy_step(bundle, runner.obs, np.random.default_rng(0), stochastic=False)
    arr = {k: (np.stack(v) if k != "sigma" or v[0] is not None else None) for k, v in buf.items()}
    kl = arr["kl"] if not bundle.deterministic else np.zeros_like(arr["rewards"])
    return RolloutBatch(
        obs=arr["obs"], noise=arr["noise"], mu=arr["mu"], sigma=arr["sigma"], z=arr["z"],
        actions=arr["actions"], logp=arr["logp"], rewards=arr["rewards"], kl=kl,
        mod_rewards=modified_reward(arr["rewards"], kl, beta), values=arr["values"],
        dones=arr["dones"], last_values=last["values"], beta=beta, stochastic=stochastic,
        episode_returns=finished,
    )


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """GAE over time-major arrays (T, ...).  ``dones[t]`` marks that the episode
    ended at step t, so step t bootstraps from 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError(f"misaligned arrays: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    last_values = np.broadcast_to(np.asarray(last_values, dtype=np.float64), rewards.shape[1:])
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(len(rewards))):
        next_v = last_values if t == len(rewards) - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    mean_kl: float = 0.0
    grad_norm: float = 0.0


def _flat(batch: RolloutBatch, adv: np.ndarray, ret: np.ndarray) -> dict:
    n = batch.actions.size
    return {
        "obs": batch.obs.reshape((n,) + batch.obs.shape[2:]),
        "noise": batch.noise.reshape(n, -1),
        "actions": batch.actions.reshape(n),
        "logp": batch.logp.reshape(n),
        "adv": adv.reshape(n),
        "ret": ret.reshape(n),
    }


def _loss_terms(bundle: PolicyBundle, data: dict, idx, stochastic: bool, use_kl: bool):
    out = forward_batch(bundle, data["obs"][idx], data["noise"][idx] if stochastic else None)
    logp = nn.pick(out.logp_all, data["actions"][idx])
    entropy = nn.mean(-nn.tsum(nn.exp(out.logp_all) * out.logp_all, axis=-1))
    value_loss = nn.mean(nn.square(out.values - data["ret"][idx]))
    if use_kl and out.sigma is not None:
        mean_kl = nn.mean(kl_tensor(out.mu, out.sigma))
    else:
        mean_kl = nn.Tensor(0.0)
    return logp, entropy, value_loss, mean_kl


def _apply(bundle, opt, total, max_grad_norm) -> float:
    params = bundle.parameters()
    nn.backward(total)
    norm = nn.clip_grad_norm(params, max_grad_norm) if max_grad_norm else nn.global_grad_norm(params)
    nn.adam_step(params, opt)
    return norm


def a2c_update(batch: RolloutBatch, bundle: PolicyBundle, opt: nn.AdamState, config: TrainConfig,
               beta: float, include_ib: bool = True) -> UpdateStats:
    """One gradient step on the whole batch.  ``include_ib=False`` drops the KL
    loss term from the graph entirely (used to check baseline equivalence)."""
    adv, ret = compute_gae(batch.mod_rewards, batch.values, batch.dones, batch.last_values,
                           config.gamma, config.gae_lambda)
    data = _flat(batch, adv, ret)
    idx = np.arange(len(data["actions"]))
    logp, entropy, value_loss, mean_kl = _loss_terms(bundle, data, idx, batch.stochastic, include_ib)
    policy_loss = -nn.mean(logp * data["adv"])
    if include_ib:
        total = ib_loss(policy_loss, value_loss, entropy, mean_kl, config.value_coef, config.entropy_coef, beta)
    else:
        total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    if not np.isfinite(total.data):
        raise nn.NumericalError(f"non-finite A2C loss; batch returns {ret.min():.3g}..{ret.max():.3g}")
    norm = _apply(bundle, opt, total, config.max_grad_norm)
    return UpdateStats(policy_loss.item(), value_loss.item(), entropy.item(), float(batch.kl.mean()), norm)


def ppo_update(batch: RolloutBatch, bundle: PolicyBundle, opt: nn.AdamState, config: TrainConfig,
               beta: float, rng: np.random.Generator, include_ib: bool = True,
               normalize_advantages: bool = True) -> UpdateStats:
    adv, ret = compute_gae(batch.mod_rewards, batch.values, batch.dones, batch.last_values,
                           config.gamma, config.gae_lambda)
    data = _flat(batch, adv, ret)
    n = len(data["actions"])
    mb = min(config.minibatch_size, n)
    stats = UpdateStats(mean_kl=float(batch.kl.mean()))
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            logp, entropy, value_loss, mean_kl = _loss_terms(bundle, data, idx, batch.stochastic, include_ib)
            a = data["adv"][idx]
            if normalize_advantages and len(idx) > 1:
                a = (a - a.mean()) / (a.std() + 1e-8)
            ratio = nn.exp(logp - data["logp"][idx])
            if not np.isfinite(ratio.data).all():
                raise nn.NumericalError("non-finite PPO probability ratio")
            surrogate = nn.minimum(ratio * a, nn.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range) * a)
            policy_loss = -nn.mean(surrogate)
            if include_ib:
                total = ib_loss(policy_loss, value_loss, entropy, mean_kl, config.value_coef,
                                config.entropy_coef, beta)
            else:
                total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
            stats.grad_norm += _apply(bundle, opt, total, config.max_grad_norm)
            stats.policy_loss += policy_loss.item()
            stats.value_loss += value_loss.item()
            stats.entropy += entropy.item()
            count += 1
    for name in ("policy_loss", "value_loss", "entropy", "grad_norm"):
        setattr(stats, name, getattr(stats, name) / count)
    return stats


# ---------------------------------------------------------------- training


def make_envs(config: TrainConfig, layouts=None) -> list:
    """Environment instances with per-worker rng streams derived from the seed."""
    from .envs.cartpole import CartPoleEnv
    from .envs.grid import GridEnv

    seeds = np.random.SeedSequence([config.seed, 1]).spawn(config.n_envs)
    if config.env == "cartpole":
        return [CartPoleEnv(None, np.random.default_rng(s)) for s in seeds]
    if not layouts:
        raise ValueError("grid training needs at least one maze layout")
    return [GridEnv(list(layouts), np.random.default_rng(s)) for s in seeds]


@dataclass
class TrainState:
    bundle: PolicyBundle
    opt: nn.AdamState
    runner: Runner
    update_rng: np.random.Generator
    env_steps: int = 0
    updates: int = 0
    recent: deque = field(default_factory=lambda: deque(maxlen=100))
    last_mean_return: float = float("nan")


def init_state(config: TrainConfig, envs: Sequence, bundle: PolicyBundle | None = None) -> TrainState:
    root = np.random.SeedSequence(config.seed)
    init_ss, rollout_ss, update_ss = root.spawn(3)
    if bundle is None:
        bundle = make_bundle(config.env, np.random.default_rng(init_ss), deterministic=config.deterministic,
                             code_dim=config.code_dim, logvar_init=config.logvar_init)
    opt = nn.adam_init(bundle.parameters(), config.lr)
    runner = Runner(envs, np.random.default_rng(rollout_ss))
    return TrainState(bundle, opt, runner, np.random.default_rng(update_ss))


BetaSchedule = Callable[[int], float]


def constant_beta(beta: float) -> BetaSchedule:
    return lambda step: beta


def train_iteration(state: TrainState, config: TrainConfig, beta: float, stochastic: bool | None = None) -> dict:
    """Collect one rollout and apply one update; returns the metrics row."""
    batch = collect_rollouts(state.bundle, state.runner, config.n_steps, beta, stochastic)
    if config.algorithm == "a2c":
        stats = a2c_update(batch, state.bundle, state.opt, config, beta)
    else:
        stats = ppo_update(batch, state.bundle, state.opt, config, beta, state.update_rng)
    state.env_steps += len(batch)
    state.updates += 1
    state.recent.extend(batch.episode_returns)
    if batch.episode_returns:
        state.last_mean_return = float(np.mean(batch.episode_returns))
    return {
        "update": state.updates,
        "env_steps": state.env_steps,
        "beta": beta,
        "mean_return": state.last_mean_return,
        "rolling_return": float(np.mean(state.recent)) if state.recent else float("nan"),
        "episodes": len(batch.episode_returns),
        "mean_kl": stats.mean_kl,
        "policy_loss": stats.policy_loss,
        "value_loss": stats.value_loss,
        "entropy": stats.entropy,
        "grad_norm": stats.grad_norm,
    }


def train(config: TrainConfig, envs: Sequence, beta_schedule: BetaSchedule | float = 0.0,
          bundle: PolicyBundle | None = None, state: TrainState | None = None,
          on_update: Callable[[TrainState, dict], None] | None = None,
          stochastic_schedule: Callable[[int], bool] | None = None,
          stop: Callable[[TrainState, dict], bool] | None = None) -> tuple[PolicyBundle, list[dict]]:
    """Alternate rollouts and updates until ``config.total_steps`` env steps.

    ``beta_schedule`` maps the iteration index (number of completed updates) to
    the beta used for that iteration's rollout and update.  ``on_update`` fires
    after every update (checkpoint hooks live there).
    """
    if not callable(beta_schedule):
        beta_schedule = constant_beta(float(beta_schedule))
    if state is None:
        state = init_state(config, envs, bundle)
    metrics: list[dict] = []
    while state.env_steps < config.total_steps:
        beta = float(beta_schedule(state.updates))
        stochastic = stochastic_schedule(state.updates) if stochastic_schedule else None
        try:
            row = train_iteration(state, config, beta, stochastic)
        except nn.NumericalError as exc:
            raise nn.NumericalError(f"{exc} (beta={beta:.3g}, env step {state.env_steps})") from exc
        metrics.append(row)
        if on_update is not None:
            on_update(state, row)
        if stop is not None and stop(state, row):
            break
    return state.bundle, metrics


def write_metrics_csv(path, rows: Sequence[dict], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore", lineterminator="\n")
        if not append or fh.tell() == 0:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})

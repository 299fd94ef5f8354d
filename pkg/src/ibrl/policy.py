"""Encoder-decoder actor-critic: Gaussian encoder, categorical action head, critic.

The encoder maps an observation to a diagonal Gaussian over codes; actions and
values are read off a (sampled) code.  A deterministic bundle has no log-variance
head and always uses the mean code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnkit as nn
from .nnkit import LayerSpec, Network, Tensor

SIGMA_MIN = 1e-4
SIGMA_MAX = 10.0
GRID_OBS_SHAPE = (12, 12, 3)
CARTPOLE_OBS_SHAPE = (4,)


@dataclass
class GaussianCode:
    """Posterior over codes for one observation (or a batch along axis 0).

    ``sigma`` is None for deterministic encoders.
    """

    mu: np.ndarray
    sigma: np.ndarray | None
    z: np.ndarray | None = None

    @property
    def deterministic(self) -> bool:
        return self.sigma is None


@dataclass
class ActionDistribution:
    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "ActionDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return cls(logits, e / e.sum(axis=-1, keepdims=True))

    def log_prob(self, action) -> np.ndarray:
        logits = self.logits
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        if logp.ndim == 1:
            return logp[int(action)]
        return logp[np.arange(len(logp)), np.asarray(action)]

    def entropy(self) -> np.ndarray:
        p = self.probs
        return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)

    def sample(self, rng: np.random.Generator):
        if self.probs.ndim == 1:
            return int(rng.choice(len(self.probs), p=self.probs))
        u = rng.random(len(self.probs))[:, None]
        cdf = np.cumsum(self.probs, axis=-1)
        return np.minimum((u > cdf).sum(axis=-1), self.probs.shape[-1] - 1)

    def greedy(self):
        return np.argmax(self.probs, axis=-1)


@dataclass
class PolicyBundle:
    trunk: Network
    mu_head: Network
    logvar_head: Network | None
    actor: Network
    critic: Network
    code_dim: int
    n_actions: int
    env: str

    @property
    def deterministic(self) -> bool:
        return self.logvar_head is None

    @property
    def obs_shape(self) -> tuple:
        return self.trunk.input_shape

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for part in ("trunk", "mu_head", "logvar_head", "actor", "critic"):
            net = getattr(self, part)
            if net is None:
                continue
            for i, layer in enumerate(net.layers):
                out.append((f"{part}.{i}.weight", layer.weight))
                out.append((f"{part}.{i}.bias", layer.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        nets = [self.trunk, self.mu_head] + ([] if self.logvar_head is None else [self.logvar_head])
        return [p for net in nets for p in net.parameters()]


LOGVAR_GAIN = 0.01


def _heads(rng, trunk_shape: tuple, code_dim: int, hidden: int, n_hidden: int, n_actions: int,
           deterministic: bool, logvar_init: float):
    mu_head = nn.build_network(trunk_shape, [LayerSpec("dense", code_dim, "identity")], rng)
    logvar_head = None
    if not deterministic:
        logvar_head = nn.build_network(
            trunk_shape, [LayerSpec("dense", code_dim, "identity", gain=LOGVAR_GAIN, bias_init=logvar_init)], rng
        )
    actor = nn.build_network((code_dim,), nn.mlp_spec([code_dim] + [hidden] * n_hidden + [n_actions],
                                                       "tanh", "identity", out_gain=0.01), rng)
    critic = nn.build_network((code_dim,), nn.mlp_spec([code_dim] + [hidden] * n_hidden + [1],
                                                        "tanh", "identity", out_gain=1.0), rng)
    return mu_head, logvar_head, actor, critic


def make_grid_bundle(rng: np.random.Generator, code_dim: int = 64, deterministic: bool = False,
                     logvar_init: float = -4.0) -> PolicyBundle:
    """Three 2x2 convs (16/32/64) and a dense-64 layer feeding dense mean /
    log-variance heads; one hidden layer of 64 for both actor and critic."""
    convs = [LayerSpec("conv2x2", c, "tanh") for c in (16, 32, 64)]
    # 5184 flattened conv features feed the dense layer; unscaled, a single Adam
    # step shifts its pre-activations by O(1) and the tanh saturates
    trunk = nn.build_network(GRID_OBS_SHAPE, convs + [LayerSpec("dense", 64, "tanh", fan_in_scaled=True)], rng)
    heads = _heads(rng, (64,), code_dim, 64, 1, 4, deterministic, logvar_init)
    return PolicyBundle(trunk, *heads, code_dim=code_dim, n_actions=4, env="grid")


def make_cartpole_bundle(rng: np.random.Generator, code_dim: int = 32, deterministic: bool = False,
                         logvar_init: float = -4.0) -> PolicyBundle:
    """Dense-32 trunk, dense-32 mean / log-variance heads, two hidden layers of 32
    for actor and critic."""
    trunk = nn.build_network(CARTPOLE_OBS_SHAPE, [LayerSpec("dense", 32, "tanh")], rng)
    heads = _heads(rng, (32,), code_dim, 32, 2, 2, deterministic, logvar_init)
    return PolicyBundle(trunk, *heads, code_dim=code_dim, n_actions=2, env="cartpole")


def make_bundle(env: str, rng: np.random.Generator, deterministic: bool = False, **kw) -> PolicyBundle:
    if env == "grid":
        return make_grid_bundle(rng, deterministic=deterministic, **kw)
    if env == "cartpole":
        return make_cartpole_bundle(rng, deterministic=deterministic, **kw)
    raise ValueError(f"unknown environment {env!r}")


def _check_obs(bundle: PolicyBundle, obs: np.ndarray) -> bool:
    shape = bundle.obs_shape
    if obs.shape == shape:
        return False
    if obs.shape[1:] == shape:
        return True
    raise ValueError(f"observation shape {obs.shape} does not match {bundle.env} observations {shape}")


def encode(bundle: PolicyBundle, obs) -> GaussianCode:
    """Posterior parameters for one observation or a batch (no recording)."""
    obs = np.asarray(obs, dtype=np.float64)
    _check_obs(bundle, obs)
    h = nn.predict(bundle.trunk, obs)
    mu = nn.predict(bundle.mu_head, h)
    if bundle.logvar_head is None:
        return GaussianCode(mu, None)
    logvar = nn.predict(bundle.logvar_head, h)
    return GaussianCode(mu, np.clip(np.exp(0.5 * logvar), SIGMA_MIN, SIGMA_MAX))


def sample_code(code: GaussianCode, rng: np.random.Generator | None, mode: str = "stochastic") -> np.ndarray:
    if mode == "mean" or code.sigma is None:
        z = code.mu.copy()
    elif mode == "stochastic":
        z = code.mu + code.sigma * rng.standard_normal(code.mu.shape)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    code.z = z
    return z


def act(bundle: PolicyBundle, z) -> ActionDistribution:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != bundle.code_dim:
        raise ValueError(f"code has dimension {z.shape[-1]}, expected {bundle.code_dim}")
    return ActionDistribution.from_logits(nn.predict(bundle.actor, z))


def value(bundle: PolicyBundle, z):
    out = nn.predict(bundle.critic, np.asarray(z, dtype=np.float64))
    return out[..., 0] if out.ndim > 1 else float(out[0])


# ------------------------------------------------------------ recorded path


@dataclass
class BatchOutputs:
    """Differentiable quantities for a batch of observations."""

    mu: Tensor
    sigma: Tensor | None
    z: Tensor
    logp_all: Tensor
    values: Tensor


def forward_batch(bundle: PolicyBundle, obs: np.ndarray, noise: np.ndarray | None) -> BatchOutputs:
    """Recorded encoder -> reparameterized code -> actor/critic pass.

    ``noise`` holds the standard-normal draws used for z = mu + sigma * noise;
    None (or a deterministic bundle) means z = mu.
    """
    obs = np.asarray(obs, dtype=np.float64)
    h = nn.forward(bundle.trunk, obs)
    mu = nn.forward(bundle.mu_head, h)
    sigma = None
    if bundle.logvar_head is not None:
        logvar = nn.forward(bundle.logvar_head, h)
        sigma = nn.clip(nn.exp(0.5 * logvar), SIGMA_MIN, SIGMA_MAX)
    if sigma is not None and noise is not None:
        z = mu + sigma * Tensor(noise)
    else:
        z = mu
    logp_all = nn.log_softmax(nn.forward(bundle.actor, z))
    values = nn.forward(bundle.critic, z).reshape(-1)
    return BatchOutputs(mu, sigma, z, logp_all, values)

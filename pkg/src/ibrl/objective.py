"""Information-bottleneck terms: KL to the unit Gaussian prior, the variational
mutual-information bound, reward shaping and the combined loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nnkit as nn
from .nnkit import Tensor
from .policy import GaussianCode


@dataclass(frozen=True)
class IBConfig:
    beta: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and non-negative, got {self.beta}")


@dataclass
class MIEstimate:
    mean_kl: float
    per_sample_kl: np.ndarray


def gaussian_kl(mu, sigma) -> np.ndarray:
    """KL(N(mu, diag sigma^2) || N(0, I)) in nats, summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    var = sigma * sigma
    return 0.5 * np.sum(mu * mu + var - 1.0 - np.log(var), axis=-1)


def kl_to_unit_gaussian(code: GaussianCode) -> float:
    if code.sigma is None:
        raise ValueError("deterministic code has no posterior variance; KL is undefined")
    return float(gaussian_kl(code.mu, code.sigma))


def kl_tensor(mu: Tensor, sigma: Tensor) -> Tensor:
    """Differentiable per-sample KL for a batch (N, d) -> (N,)."""
    var = nn.square(sigma)
    terms = nn.square(mu) + var - 1.0 - 2.0 * nn.log(sigma)
    return 0.5 * nn.tsum(terms, axis=-1)


def mi_upper_bound(codes: Sequence[GaussianCode] | GaussianCode, weights=None) -> MIEstimate:
    """Average posterior-to-prior KL over a batch of codes.

    ``codes`` is either a list of single codes or one batched code.  Optional
    ``weights`` (summing to one) turn the mean into an expectation under p(s).
    """
    if isinstance(codes, GaussianCode):
        if codes.sigma is None:
            raise ValueError("deterministic codes carry no KL")
        per = np.atleast_1d(gaussian_kl(codes.mu, codes.sigma))
    else:
        if len(codes) == 0:
            raise ValueError("empty batch")
        per = np.array([kl_to_unit_gaussian(c) for c in codes])
    if per.size == 0:
        raise ValueError("empty batch")
    if weights is None:
        mean_kl = float(per.mean())
    else:
        w = np.asarray(weights, dtype=np.float64)
        mean_kl = float(np.dot(w, per) / w.sum())
    return MIEstimate(mean_kl, per)


def _normal_pdf(z, mu, sigma):
    return np.exp(-0.5 * ((z - mu) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))


def _mi_on_grid(probs, mus, sigmas, z):
    dens = np.stack([_normal_pdf(z, m, s) for m, s in zip(mus, sigmas)])
    marginal = probs @ dens
    total = 0.0
    for p, d in zip(probs, dens):
        mask = d > 0
        integrand = np.zeros_like(z)
        integrand[mask] = d[mask] * np.log(d[mask] / marginal[mask])
        total += p * np.trapezoid(integrand, z)
    return total


def true_mi_discrete(probs, mus, sigmas, z_grid: np.ndarray, tol: float = 1e-6) -> float:
    """I(Z; S) for discrete S and 1-D Gaussian channels p(z|s), by quadrature.

    Raises if the grid does not cover +-6 sigma of every component or if halving
    the resolution moves the answer by more than ``tol``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("state probabilities must sum to 1")
    z = np.asarray(z_grid, dtype=np.float64)
    if z[0] > np.min(mus - 6 * sigmas) or z[-1] < np.max(mus + 6 * sigmas):
        raise ValueError("z grid does not cover +-6 sigma of every component")
    fine = _mi_on_grid(probs, mus, sigmas, z)
    coarse = _mi_on_grid(probs, mus, sigmas, z[::2])
    if abs(fine - coarse) > tol:
        raise ValueError(f"z grid too coarse: halving resolution changes MI by {abs(fine - coarse):.2e}")
    return float(fine)


def modified_reward(r, kl, beta: float):
    """Environment reward with the KL penalty subtracted."""
    if np.any(np.asarray(kl) < 0):
        raise ValueError("kl must be non-negative")
    return r - beta * kl


def ib_loss(policy_loss, value_loss, entropy, mean_kl, value_coef: float, entropy_coef: float, beta: float):
    """policy + value_coef*value - entropy_coef*entropy + beta*KL.

    Works on floats or recorded Tensors alike.
    """
    return policy_loss + value_coef * value_loss - entropy_coef * entropy + beta * mean_kl

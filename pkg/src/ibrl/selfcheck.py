"""Independent numerical oracles for the core math, runnable in well under a minute.

Each check compares a library routine with a separately written reference:
closed-form KL vs adaptive quadrature, backprop vs central differences, the
variational MI bound vs exact quadrature MI, the CartPole step vs a scalar
re-derivation of the equations of motion, and GAE vs the explicit double sum.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from . import nnkit as nn
from .agents import compute_gae
from .envs import cartpole as cp
from .objective import gaussian_kl, ib_loss, kl_tensor, mi_upper_bound, true_mi_discrete
from .policy import GaussianCode, forward_batch, make_bundle


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}) {self.detail}".rstrip()


# ----------------------------------------------------------------- KL oracle


def kl_by_quadrature(mu: np.ndarray, sigma: np.ndarray) -> float:
    """Sum over dimensions of the integral of p log(p/q) with q = N(0, 1)."""
    total = 0.0
    for m, s in zip(mu, sigma):
        def integrand(z, m=m, s=s):
            logp = -0.5 * ((z - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)
            logq = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
            return math.exp(logp) * (logp - logq)

        val, _ = integrate.quad(integrand, m - 12 * s, m + 12 * s, epsabs=1e-12, epsrel=1e-12, limit=200)
        total += val
    return total


def check_kl(n_codes: int = 20, dim: int = 4, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_codes):
        mu = rng.normal(0, 1.5, dim)
        sigma = np.exp(rng.uniform(-2, 1, dim))
        worst = max(worst, abs(float(gaussian_kl(mu, sigma)) - kl_by_quadrature(mu, sigma)))
    return CheckResult("kl_closed_form_vs_quadrature", worst <= tol, worst, tol, f"{n_codes} codes")


# ----------------------------------------------------------- gradient oracle


def bundle_loss_fn(bundle, obs, noise, actions, adv, ret, beta: float = 0.05) -> Callable[[], nn.Tensor]:
    """Full training objective of one bundle on a fixed batch, as a closure."""
    def loss():
        out = forward_batch(bundle, obs, noise)
        logp = nn.pick(out.logp_all, actions)
        entropy = nn.mean(-nn.tsum(nn.exp(out.logp_all) * out.logp_all, axis=-1))
        value_loss = nn.mean(nn.square(out.values - ret))
        mean_kl = nn.mean(kl_tensor(out.mu, out.sigma)) if out.sigma is not None else nn.Tensor(0.0)
        return ib_loss(-nn.mean(logp * adv), value_loss, entropy, mean_kl, 0.5, 0.01, beta)

    return loss


def check_gradients(seed: int = 0, tol: float = 1e-4, max_entries: int = 4) -> CheckResult:
    """Grid and CartPole bundles, each with stochastic and deterministic encoders."""
    rng = np.random.default_rng(seed)
    worst, names = 0.0, []
    for env in ("grid", "cartpole"):
        for deterministic in (False, True):
            bundle = make_bundle(env, rng, deterministic=deterministic)
            n = 3
            obs = rng.normal(size=(n,) + bundle.obs_shape)
            if env == "grid":
                obs = (obs > 0.5).astype(np.float64)
            noise = None if deterministic else rng.standard_normal((n, bundle.code_dim))
            actions = rng.integers(bundle.n_actions, size=n)
            fn = bundle_loss_fn(bundle, obs, noise, actions, rng.normal(size=n), rng.normal(size=n))
            err = nn.gradient_check(bundle.parameters(), fn, h=1e-4, max_entries=max_entries, rng=rng)
            worst = max(worst, err)
            names.append(f"{env}/{'det' if deterministic else 'stoch'}={err:.1e}")
    return CheckResult("backprop_vs_finite_differences", worst <= tol, worst, tol, " ".join(names))


# ------------------------------------------------------------ MI bound oracle


def toy_channels(seed: int = 0, n: int = 5):
    """Discrete sources pushed through 1-D Gaussian channels."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        states = k + 2
        probs = rng.dirichlet(np.ones(states))
        mus = rng.normal(0, 1.5, states)
        sigmas = np.exp(rng.uniform(-1.5, 0.5, states))
        out.append((probs, mus, sigmas))
    return out


def check_mi_bound(tol: float = 1e-6) -> CheckResult:
    worst_gap = math.inf
    for probs, mus, sigmas in toy_channels():
        lo, hi = float(np.min(mus - 8 * sigmas)), float(np.max(mus + 8 * sigmas))
        z = np.linspace(lo, hi, 2 * 20000 + 1)
        exact = true_mi_discrete(probs, mus, sigmas, z)
        codes = [GaussianCode(np.array([m]), np.array([s]), np.array([m])) for m, s in zip(mus, sigmas)]
        bound = mi_upper_bound(codes, weights=probs).mean_kl
        worst_gap = min(worst_gap, bound - exact)
    return CheckResult("mi_upper_bound_dominates_true_mi", worst_gap >= -tol, worst_gap, tol,
                       "smallest bound minus exact MI over 5 channels")


# ----------------------------------------------------------- physics oracle


def reference_cartpole_step(x, x_dot, theta, theta_dot, force, half_length):
    """Scalar transcription of the classic cart-pole equations of motion
    (frictionless, semi-implicit Euler with dt = 0.02)."""
    g, m_cart, m_pole, dt = 9.8, 1.0, 0.1, 0.02
    m_total = m_cart + m_pole
    c, s = math.cos(theta), math.sin(theta)
    common = (force + m_pole * half_length * theta_dot * theta_dot * s) / m_total
    denom = half_length * (4.0 / 3.0 - m_pole * c * c / m_total)
    alpha = (g * s - c * common) / denom
    acc = common - m_pole * half_length * alpha * c / m_total
    x_dot = x_dot + dt * acc
    theta_dot = theta_dot + dt * alpha
    return (x + dt * x_dot, x_dot, theta + dt * theta_dot, theta_dot)


def check_cartpole(n: int = 500, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    states = rng.uniform(-0.3, 0.3, (n, 4)) * np.array([8, 3, 1, 3])
    forces = rng.choice([-1, 1], n) * rng.uniform(1, 160, n)
    lengths = rng.uniform(0.05, 6.8, n)
    ours = cp.dynamics(states, forces, lengths)
    ref = np.array([reference_cartpole_step(*s, f, l) for s, f, l in zip(states, forces, lengths)])
    err = float(np.max(np.abs(ours - ref)))
    return CheckResult("cartpole_step_vs_reference", err <= tol, err, tol, f"{n} random transitions")


# ---------------------------------------------------------------- GAE oracle


def gae_by_summation(rewards, values, dones, last_values, gamma, lam):
    """A_t = sum_k (gamma lam)^k delta_{t+k}, truncated at episode ends."""
    T, E = rewards.shape
    nxt = np.vstack([values[1:], last_values[None]])
    delta = rewards + gamma * nxt * (1.0 - dones) - values
    adv = np.zeros((T, E))
    for e in range(E):
        for t in range(T):
            acc, coef = 0.0, 1.0
            for k in range(t, T):
                acc += coef * delta[k, e]
                if dones[k, e]:
                    break
                coef *= gamma * lam
            adv[t, e] = acc
    return adv


def check_gae(seed: int = 0, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        T, E = 6, 3
        rewards = rng.normal(size=(T, E))
        values = rng.normal(size=(T, E))
        dones = (rng.random((T, E)) < 0.25).astype(np.float64)
        last = rng.normal(size=E)
        gamma, lam = rng.uniform(0.9, 1.0), rng.uniform(0.8, 1.0)
        adv, _ = compute_gae(rewards, values, dones, last, gamma, lam)
        worst = max(worst, float(np.max(np.abs(adv - gae_by_summation(rewards, values, dones, last, gamma, lam)))))
    return CheckResult("gae_vs_direct_summation", worst <= tol, worst, tol, "20 random 6-step batches")


CHECKS = (check_kl, check_gradients, check_mi_bound, check_cartpole, check_gae)


def run_all() -> list[CheckResult]:
    results = []
    for check in CHECKS:
        t0 = time.perf_counter()
        res = check()
        res.detail = f"{res.detail} [{time.perf_counter() - t0:.1f}s]".strip()
        results.append(res)
    return results

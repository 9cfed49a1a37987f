"""Brute-force reference computations used to validate the EP receivers.

These are intentionally direct and slow: dense covariance matrices,
exhaustive enumeration and plain sampling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


def lmmse_channel(y, x_pilot, Xi, sigma_n2):
    """LMMSE estimate of one channel from pilots: ``vec`` form with dense matrices.

    ``y``: ``(N, T_p)``; ``x_pilot``: ``(T_p,)``; ``Xi``: ``(N, N)``.
    """
    y = np.asarray(y, complex)
    N, Tp = y.shape
    A = np.kron(np.asarray(x_pilot, complex)[:, None], np.eye(N))  # vec(y) = A h + n
    Cy = A @ Xi @ A.conj().T + sigma_n2 * np.eye(N * Tp)
    return Xi @ A.conj().T @ np.linalg.solve(Cy, y.T.reshape(-1))


@dataclass
class MapDecision:
    u: np.ndarray
    x_idx: np.ndarray  # (K, T_d), -1 for inactive users
    log_post: float
    runner_up: float


def map_log_posterior(scenario, u, x_idx) -> float:
    """Unnormalized ``log p(u, x_A | Y)`` of one hypothesis.

    ``log p(Y | u, x) = sum_l log CN(vec Y_l | 0, sigma^2 I + sum_k u_k
    (x_k x_k^H) kron Xi_{l,k})``; the data of inactive users are ignored.
    """
    L, N, K = scenario.L, scenario.N, scenario.K
    const = np.asarray(scenario.constellation)
    M, Td = len(const), scenario.T_d
    xp = np.asarray(scenario.X_pilot)
    T = xp.shape[1] + Td
    active = [k for k in range(K) if u[k]]
    lam = scenario.lam
    with np.errstate(divide="ignore"):
        lp = sum(np.log(lam) if b else np.log1p(-lam) for b in u) - len(active) * Td * np.log(M)
    for l in range(L):
        vy = scenario.Y[l].T.reshape(-1)
        C = scenario.sigma_n2 * np.eye(N * T, dtype=complex)
        for k in active:
            xk = np.concatenate([xp[k], const[np.asarray(x_idx[k])]])
            C = C + np.kron(np.outer(xk, xk.conj()), scenario.Xi[l, k])
        _, logdet = np.linalg.slogdet(C)
        lp += -N * T * np.log(np.pi) - logdet - np.real(vy.conj() @ np.linalg.solve(C, vy))
    return float(lp)


def exact_map(scenario) -> MapDecision:
    """Joint MAP of activities and data with the channels integrated out.

    Hypotheses are ``(u, x_A)`` where ``x_A`` are the data of the active set;
    the data of inactive users do not affect the likelihood and sum to one.
    """
    K, M, Td = scenario.K, len(scenario.constellation), scenario.T_d
    best, second = None, -np.inf
    for u in itertools.product((0, 1), repeat=K):
        active = [k for k in range(K) if u[k]]
        for combo in itertools.product(range(M), repeat=len(active) * Td):
            idx = -np.ones((K, Td), int)
            for j, k in enumerate(active):
                idx[k] = combo[j * Td:(j + 1) * Td]
            lp = map_log_posterior(scenario, u, idx)
            if best is None or lp > best.log_post:
                if best is not None:
                    second = max(second, best.log_post)
                best = MapDecision(np.array(u, bool), idx, lp, -np.inf)
            else:
                second = max(second, lp)
    best.runner_up = second
    return best


def sample_mixture(weights, means, variances, n, rng):
    """Draw ``n`` samples of a scalar complex Gaussian mixture."""
    weights = np.asarray(weights, float)
    comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
    z = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.sqrt(np.asarray(variances)[comp] / 2)
    return np.asarray(means)[comp] + z


def monte_carlo_moments(samples):
    """Sample mean and variance with their standard errors.

    Returns ``(mean, se_mean_re, se_mean_im, var, se_var)``.
    """
    n = samples.size
    m = samples.mean()
    d2 = np.abs(samples - m) ** 2
    v = d2.mean()
    return m, samples.real.std() / np.sqrt(n), samples.imag.std() / np.sqrt(n), v, d2.std() / np.sqrt(n)

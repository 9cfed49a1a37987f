"""Pilot-only EP for joint activity detection and channel estimation.

Runs on the pilot part of the observations and returns activity decisions,
channel estimates and the refined priors used to start the joint
activity/channel/data algorithm.

Each ``jac_update_*`` function evaluates one line of the schedule for every
(l, k[, t]) instance at once from the current state and returns the new
values without touching the state; :func:`jac_ep_run` applies them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bernoulli import activity_evidence, activity_message, channel_factor_message, channel_posterior
from .errors import ConfigMismatch, ZeroPilotSymbol
from .gaussian import exclusive_sum, hermitian_pd_mask, hermitize, inv_pd, matvec
from .messages import EdgeStateJAC, init_edge_state_jac, normalize_log
from .system import from_jsonable, to_jsonable


@dataclass
class Priors:
    """Activity probabilities (as log-probabilities) and Gaussian channel priors.

    ``log_p_u``: ``(K, 2)``; ``mu_h``: ``(L, K, N)``; ``C_h``: ``(L, K, N, N)``.
    """

    log_p_u: np.ndarray
    mu_h: np.ndarray
    C_h: np.ndarray

    @property
    def p_u(self) -> np.ndarray:
        return np.exp(self.log_p_u)

    def natural(self):
        lam = inv_pd(self.C_h)
        return lam, matvec(lam, self.mu_h)


def _log_bernoulli(lam: float, K: int) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.tile(np.log([1.0 - lam, lam]), (K, 1))


def neutral_priors(scenario) -> Priors:
    """Priors that carry only the activity probability and correlation."""
    return Priors(_log_bernoulli(scenario.lam, scenario.K), np.zeros((scenario.L, scenario.K, scenario.N), complex),
                  np.array(scenario.Xi, complex))


def save_priors(priors: Priors, path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(priors), indent=1))


def load_priors(path) -> Priors:
    return from_jsonable(Priors, json.loads(Path(path).read_text()))


@dataclass
class JacResult:
    u_hat: np.ndarray
    h_hat: np.ndarray
    priors: Priors
    log_p_u_hat: np.ndarray


# ---------------------------------------------------------------------------
# Schedule lines
# ---------------------------------------------------------------------------

def pilot_contamination_cov(scenario, xi_of_interferer=False):
    """``sum_{k' in P_k} Xi |x_{k't}|^2`` for every (l, k, t <= T_p).

    The victim's correlation ``Xi_{l,k}`` is used unless ``xi_of_interferer``.
    Returns None when no two UEs share a pilot sequence.
    """
    P = np.asarray(scenario.pilot_sets, float)
    if not P.any():
        return None
    p2 = np.abs(scenario.X_pilot) ** 2
    if xi_of_interferer:
        return np.einsum("kj,ljab,jt->lktab", P, scenario.Xi, p2)
    return scenario.Xi[:, :, None] * (P @ p2)[None, :, :, None, None]


def jac_update_Psi_y_to_g(state: EdgeStateJAC, scenario, pc_correction=False, xi_of_interferer=False):
    """Observation factor to channel messages for all (l, k, t <= T_p).

    Returns ``(lam, gam, accept)`` with shapes ``(L, K, T_p, ...)``.
    """
    xp = np.asarray(scenario.X_pilot)
    if np.any(xp == 0):
        raise ZeroPilotSymbol("pilot symbols must be nonzero")
    N = scenario.N
    Tp = scenario.T_p
    y = np.transpose(scenario.Y[:, :, :Tp], (0, 2, 1))  # (L, Tp, N)
    mean, cov = state.gy.mean, state.gy.cov
    x = xp[None, :, :, None]
    interf = exclusive_sum(mean * x, axis=1)
    icov = exclusive_sum(cov * (np.abs(x) ** 2)[..., None], axis=1)
    c = scenario.sigma_n2 * np.eye(N) + icov
    if pc_correction:
        extra = pilot_contamination_cov(scenario, xi_of_interferer)
        if extra is not None:
            c = c + extra
    p2 = (np.abs(xp) ** 2)[None, :, :, None, None]
    mu = (y[:, None] - interf) / x
    c = hermitize(c / p2)
    accept = hermitian_pd_mask(c) & np.all(np.isfinite(mu), axis=-1)
    lam = np.zeros_like(c)
    gam = np.zeros_like(mu)
    if accept.any():
        lam[accept] = inv_pd(c[accept])
        gam[accept] = matvec(lam[accept], mu[accept])
    return lam, gam, accept


def jac_update_g_to_Psi_g(state: EdgeStateJAC):
    return state.yg.lam.sum(axis=2), state.yg.gam.sum(axis=2)


def _evidence(state, scenario):
    Xi = np.asarray(scenario.Xi, complex)
    zeros = np.zeros(Xi.shape[:-1], complex)
    return activity_evidence(state.gg, zeros, Xi, inv_pd(Xi), zeros)


def jac_update_Psi_g_to_u(state: EdgeStateJAC, scenario):
    """Returns ``(log_p, accept)`` with ``log_p`` of shape ``(L, K, 2)``."""
    return activity_message(_evidence(state, scenario))


def jac_update_u_to_Psi_g(state: EdgeStateJAC, lam: float):
    K = state.gu.logp.shape[1]
    out = _log_bernoulli(lam, K)[None] + exclusive_sum(state.gu.logp, axis=0)
    return normalize_log(out)[0]


def jac_update_Psi_g_to_g(state: EdgeStateJAC, scenario):
    """Guarded ``Psi_g -> g``; returns ``(lam, gam, accept)``."""
    ev = _evidence(state, scenario)
    Xi = np.asarray(scenario.Xi, complex)
    return channel_factor_message(ev, state.gg, state.ug.logp, inv_pd(Xi), np.zeros(Xi.shape[:-1], complex))


def jac_update_g_to_Psi_y(state: EdgeStateJAC):
    return (state.Gg.lam[:, :, None] + exclusive_sum(state.yg.lam, axis=2),
            state.Gg.gam[:, :, None] + exclusive_sum(state.yg.gam, axis=2))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def check_config(scenario, config, with_data=False):
    pairs = [("L", scenario.L, config.L), ("N", scenario.N, config.N), ("K", scenario.K, config.K),
             ("T_p", scenario.T_p, config.T_p)]
    if with_data:
        pairs += [("T_d", scenario.T_d, config.T_d), ("M", scenario.M, config.M)]
    bad = [f"{n}: scenario {a} vs config {b}" for n, a, b in pairs if a != b]
    if bad:
        raise ConfigMismatch("; ".join(bad))


def jac_ep_run(scenario, config) -> JacResult:
    check_config(scenario, config)
    eta, first = config.eta, config.damp_first_iteration
    st = init_edge_state_jac(scenario)
    # overflowing intermediates (near point masses) are rejected by the guards
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(config.jac_i_max):
            lam, gam, acc = jac_update_Psi_y_to_g(st, scenario, config.pc_correction, config.pc_xi_of_interferer)
            st.yg.update(lam, gam, acc, eta, first)
            st.gg.assign(*jac_update_g_to_Psi_g(st))
            logp, acc = jac_update_Psi_g_to_u(st, scenario)
            st.gu.update(logp, acc, eta, first)
            st.ug.logp = jac_update_u_to_Psi_g(st, scenario.lam)
            st.ug.informed[:] = True
            lam, gam, acc = jac_update_Psi_g_to_g(st, scenario)
            st.Gg.update(lam, gam, acc, eta, first)
            st.gy.assign(*jac_update_g_to_Psi_y(st))
    return jac_estimates(st, scenario)


def jac_estimates(st: EdgeStateJAC, scenario) -> JacResult:
    """Activity decisions, channel estimates and priors for the joint stage."""
    log_p = normalize_log(_log_bernoulli(scenario.lam, scenario.K) + st.gu.logp.sum(axis=0))[0]
    u_hat = log_p[:, 1] > log_p[:, 0]

    ev = _evidence(st, scenario)
    Xi = np.asarray(scenario.Xi, complex)
    mean, cov, ok = channel_posterior(ev, st.ug.logp, np.zeros(Xi.shape[:-1], complex), Xi)
    h_hat = np.where(ok[..., None], mean, 0)

    # improper posteriors fall back to the uninitialized prior
    fallback = (scenario.lam if scenario.lam > 0 else 1.0) * Xi
    good = ok & hermitian_pd_mask(cov)
    mu_h = np.where(good[..., None], mean, 0)
    C_h = np.where(good[..., None, None], cov, fallback)
    return JacResult(u_hat, h_hat, Priors(log_p, mu_h, C_h), log_p)

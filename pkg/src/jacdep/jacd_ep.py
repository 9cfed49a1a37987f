"""Joint activity detection, channel estimation and data detection by EP.

Each factor ``Psi_z`` ties the noiseless contribution ``z = g x`` of one UE
at one AP and slot to its effective channel ``g`` and its symbol ``x``. For a
fixed symbol the two incoming Gaussians ``y -> z`` and ``g -> z`` combine
into a single Gaussian in ``z`` with evidence

    theta(x) = CN(0 | mu_yz - mu_gz x, C_yz + C_gz |x|^2)

and precision ``Lam_yz + Lam_gz / |x|^2``. Pilot slots have one known
symbol; data slots mix over the constellation.

The ``upd_*`` functions evaluate one schedule line for every instance and
return new values without mutating the state. :func:`jacd_run` applies them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bernoulli import ActivityEvidence, activity_evidence, activity_message, channel_factor_message, channel_posterior
from .gaussian import batched_mixture_moments, exclusive_sum, hermitian_pd_mask, hermitize, inv_pd, log_cn0, matvec
from .jac_ep import Priors, check_config, pilot_contamination_cov
from .messages import EdgeStateJACD, init_edge_state_jacd, normalize_log


@dataclass
class SymbolConditionedMoments:
    """Per-symbol evidence and tilted ``z`` moments.

    Shapes are ``(L, K, S, Mx[, N[, N]])`` with ``S`` slots and ``Mx``
    candidate symbols (1 for pilots). ``valid`` (``(L, K, S)``) marks
    instances whose two incoming messages are both proper.
    """

    log_theta: np.ndarray
    valid: np.ndarray
    x: Optional[np.ndarray]
    lam_a: Optional[np.ndarray]
    gam_a: Optional[np.ndarray]
    mu_a: Optional[np.ndarray]
    cov_a: Optional[np.ndarray]


@dataclass
class JacdResult:
    u_hat: np.ndarray  # (K,)
    h_hat: np.ndarray  # (L, K, N)
    x_hat: np.ndarray  # (K, T_d) constellation indices
    p_u: np.ndarray  # (K, 2)
    p_x: np.ndarray  # (K, T_d, M)
    fronthaul_reals_per_iter: int


def _slots(scenario, phase):
    Tp = scenario.T_p
    if phase == "pilot":
        return slice(0, Tp), np.asarray(scenario.X_pilot, complex)[None, :, :, None]
    if phase == "data":
        return slice(Tp, None), np.asarray(scenario.constellation, complex)[None, None, None, :]
    raise ValueError(f"phase must be 'pilot' or 'data', got {phase!r}")


def compute_symbol_conditioned(state: EdgeStateJACD, scenario, phase: str) -> SymbolConditionedMoments:
    sl, x = _slots(scenario, phase)
    my, cy = state.yz.moments()
    mg, cg = state.gz.moments()
    my, cy, mg, cg = my[:, :, sl], cy[:, :, sl], mg[:, :, sl], cg[:, :, sl]
    valid = state.yz.proper()[:, :, sl] & state.gz.proper()[:, :, sl]
    # neutral stand-ins keep invalid entries finite
    eye = np.eye(my.shape[-1])
    v1, v2 = valid[..., None], valid[..., None, None]
    my, mg = np.where(v1, my, 0), np.where(v1, mg, 0)
    cy, cg = np.where(v2, cy, eye), np.where(v2, cg, eye)
    ly = np.where(v2, state.yz.lam[:, :, sl], eye)
    gy = np.where(v1, state.yz.gam[:, :, sl], 0)
    lg = np.where(v2, state.gz.lam[:, :, sl], eye)
    gg = np.where(v1, state.gz.gam[:, :, sl], 0)

    shape = valid.shape + (x.shape[-1],)
    x = np.broadcast_to(x, shape)
    a2 = np.abs(x) ** 2
    xv, a2m = x[..., None], a2[..., None, None]
    log_theta = log_cn0(my[:, :, :, None] - mg[:, :, :, None] * xv, cy[:, :, :, None] + cg[:, :, :, None] * a2m)
    lam_a = ly[:, :, :, None] + lg[:, :, :, None] / a2m
    gam_a = gy[:, :, :, None] + gg[:, :, :, None] * (x / a2)[..., None]
    cov_a = inv_pd(lam_a)
    mu_a = matvec(cov_a, gam_a)
    log_theta = np.where(valid[..., None], log_theta, 0.0)
    return SymbolConditionedMoments(log_theta, valid, x, lam_a, gam_a, mu_a, cov_a)


# ---------------------------------------------------------------------------
# Schedule lines
# ---------------------------------------------------------------------------

def upd_Psi_y_to_z(state: EdgeStateJACD, scenario, pc_correction=False, xi_of_interferer=False):
    """``y - sum_{k' != k} z_{k'}`` with the other UEs' ``Psi_z -> z`` moments.

    Returns ``(lam, gam, mean, cov, accept)`` over ``(L, K, T)``.
    """
    N = scenario.N
    y = np.transpose(scenario.Y, (0, 2, 1))[:, None]  # (L, 1, T, N)
    zm, zc = state.zz.mean, state.zz.cov
    mean = y - exclusive_sum(zm, axis=1)
    cov = scenario.sigma_n2 * np.eye(N) + exclusive_sum(zc, axis=1)
    if pc_correction:
        extra = pilot_contamination_cov(scenario, xi_of_interferer)
        if extra is not None:
            cov[:, :, :scenario.T_p] += extra
    cov = hermitize(cov)
    accept = hermitian_pd_mask(cov) & np.all(np.isfinite(mean), axis=-1)
    lam = np.zeros_like(cov)
    gam = np.zeros_like(mean)
    if accept.any():
        lam[accept] = inv_pd(cov[accept])
        gam[accept] = matvec(lam[accept], mean[accept])
    return lam, gam, mean, cov, accept


def upd_Psi_z_to_x(scm: SymbolConditionedMoments):
    logp, ok = normalize_log(scm.log_theta)
    return logp, scm.valid & ok


def upd_x_to_Psi_z(state: EdgeStateJACD):
    """Product of the other APs' symbol messages (uniform symbol prior)."""
    return normalize_log(exclusive_sum(state.zx.logp, axis=0))


def _proper(lam, gam):
    return hermitian_pd_mask(lam) & np.all(np.isfinite(gam), axis=-1)


def _mixture_out(log_w, means, covs, valid, lam_in, gam_in):
    _, mean, cov = batched_mixture_moments(log_w, means, covs)
    good = valid & hermitian_pd_mask(cov)
    lam_t = np.zeros_like(cov)
    gam_t = np.zeros_like(mean)
    if good.any():
        lam_t[good] = inv_pd(cov[good])
        gam_t[good] = matvec(lam_t[good], mean[good])
    lam, gam = lam_t - lam_in, gam_t - gam_in
    return lam, gam, good & _proper(lam, gam)


def upd_Psi_z_to_z(state: EdgeStateJACD, scenario, scm_data=None):
    """Moment-matched ``z`` belief divided by ``y -> z``; ``(lam, gam, accept)``
    over ``(L, K, T)``. Pilot slots reduce to ``g -> z`` scaled by the pilot."""
    Tp = scenario.T_p
    lam = np.zeros_like(state.yz.lam)
    gam = np.zeros_like(state.yz.gam)
    accept = np.zeros(lam.shape[:-2], bool)

    x = np.asarray(scenario.X_pilot, complex)[None, :, :, None]
    a2 = np.abs(x) ** 2
    lam[:, :, :Tp] = state.gz.lam[:, :, :Tp] / a2[..., None]
    gam[:, :, :Tp] = state.gz.gam[:, :, :Tp] * (x / a2)
    accept[:, :, :Tp] = _proper(lam[:, :, :Tp], gam[:, :, :Tp])

    if scenario.T_d:
        d = scm_data if scm_data is not None else compute_symbol_conditioned(state, scenario, "data")
        out = _mixture_out(state.xz.logp + d.log_theta, d.mu_a, d.cov_a, d.valid,
                           state.yz.lam[:, :, Tp:], state.yz.gam[:, :, Tp:])
        lam[:, :, Tp:], gam[:, :, Tp:], accept[:, :, Tp:] = out
    return lam, gam, accept


def upd_Psi_z_to_g(state: EdgeStateJACD, scenario, scm_data=None):
    """Moment-matched ``g`` belief divided by ``g -> z``; ``(lam, gam, accept)``."""
    Tp = scenario.T_p
    lam = np.zeros_like(state.gz.lam)
    gam = np.zeros_like(state.gz.gam)
    accept = np.zeros(lam.shape[:-2], bool)

    x = np.asarray(scenario.X_pilot, complex)[None, :, :, None]
    lam[:, :, :Tp] = state.yz.lam[:, :, :Tp] * (np.abs(x) ** 2)[..., None]
    gam[:, :, :Tp] = state.yz.gam[:, :, :Tp] * x.conj()
    accept[:, :, :Tp] = _proper(lam[:, :, :Tp], gam[:, :, :Tp])

    if scenario.T_d:
        d = scm_data if scm_data is not None else compute_symbol_conditioned(state, scenario, "data")
        xs = d.x[..., None]
        means = d.mu_a / xs
        covs = d.cov_a / (np.abs(xs) ** 2)[..., None]
        out = _mixture_out(state.xz.logp + d.log_theta, means, covs, d.valid,
                           state.gz.lam[:, :, Tp:], state.gz.gam[:, :, Tp:])
        lam[:, :, Tp:], gam[:, :, Tp:], accept[:, :, Tp:] = out
    return lam, gam, accept


def upd_g_to_Psi_g(state: EdgeStateJACD):
    return state.zg.lam.sum(axis=2), state.zg.gam.sum(axis=2)


def upd_g_to_Psi_z(state: EdgeStateJACD):
    return (state.Gg.lam[:, :, None] + exclusive_sum(state.zg.lam, axis=2),
            state.Gg.gam[:, :, None] + exclusive_sum(state.zg.gam, axis=2))


def _evidence(state: EdgeStateJACD, priors: Priors, natural=None) -> ActivityEvidence:
    lam_p, gam_p = natural if natural is not None else priors.natural()
    return activity_evidence(state.gg, np.asarray(priors.mu_h, complex), np.asarray(priors.C_h, complex), lam_p, gam_p)


def upd_Psi_g_to_u(state: EdgeStateJACD, priors: Priors, ev=None):
    return activity_message(ev if ev is not None else _evidence(state, priors))


def upd_u_to_Psi_g(state: EdgeStateJACD, priors: Priors):
    return normalize_log(np.asarray(priors.log_p_u)[None] + exclusive_sum(state.gu.logp, axis=0))[0]


def upd_Psi_g_to_g(state: EdgeStateJACD, priors: Priors, ev=None, natural=None):
    natural = natural if natural is not None else priors.natural()
    ev = ev if ev is not None else _evidence(state, priors, natural)
    return channel_factor_message(ev, state.gg, state.ug.logp, *natural)


# ---------------------------------------------------------------------------
# Estimates and driver
# ---------------------------------------------------------------------------

def estimate_all(state: EdgeStateJACD, priors: Priors, scenario, fronthaul_reals_per_iter=0) -> JacdResult:
    p_u = normalize_log(np.asarray(priors.log_p_u) + state.gu.logp.sum(axis=0))[0]
    p_x = normalize_log(state.zx.logp.sum(axis=0))[0]
    mu0 = np.asarray(priors.mu_h, complex)
    mean, _, ok = channel_posterior(_evidence(state, priors), state.ug.logp, mu0, np.asarray(priors.C_h, complex))
    h_hat = np.where(ok[..., None], mean, mu0)
    return JacdResult(u_hat=p_u[:, 1] > p_u[:, 0], h_hat=h_hat, x_hat=np.argmax(p_x, axis=-1),
                      p_u=np.exp(p_u), p_x=np.exp(p_x), fronthaul_reals_per_iter=fronthaul_reals_per_iter)


def fronthaul_load(config) -> int:
    """Real numbers exchanged with the CPU per iteration."""
    return 2 * config.L * config.K * (config.T_d * (config.M - 1) + 1)


def _count_reals(logp: np.ndarray) -> int:
    return int(np.prod(logp.shape[:-1])) * (logp.shape[-1] - 1)


def jacd_run(scenario, priors: Priors, config) -> JacdResult:
    """Run the joint detector from the given priors for ``config.i_max`` iterations."""
    check_config(scenario, config, with_data=True)
    eta, first = config.eta, config.damp_first_iteration
    st = init_edge_state_jacd(priors, scenario)
    natural = priors.natural()
    has_data = scenario.T_d > 0
    # overflowing intermediates (near point masses) are rejected by the guards
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(config.i_max):
            lam, gam, _, _, acc = upd_Psi_y_to_z(st, scenario, config.pc_correction_jacd, config.pc_xi_of_interferer)
            st.yz.update(lam, gam, acc, eta, first)

            d = compute_symbol_conditioned(st, scenario, "data") if has_data else None
            if has_data:
                logp, acc = upd_Psi_z_to_x(d)
                st.zx.update(logp, acc, eta, first)
                st.fronthaul_reals += _count_reals(st.zx.logp)
                st.xz.logp = upd_x_to_Psi_z(st)[0]
                st.xz.informed[:] = True
                st.fronthaul_reals += _count_reals(st.xz.logp)

            lam, gam, acc = upd_Psi_z_to_g(st, scenario, scm_data=d)
            st.zg.update(lam, gam, acc, eta, first)
            st.gg.assign(*upd_g_to_Psi_g(st))

            ev = _evidence(st, priors, natural)
            logp, acc = upd_Psi_g_to_u(st, priors, ev)
            st.gu.update(logp, acc, eta, first)
            st.fronthaul_reals += _count_reals(st.gu.logp)
            st.ug.logp = upd_u_to_Psi_g(st, priors)
            st.ug.informed[:] = True
            st.fronthaul_reals += _count_reals(st.ug.logp)

            lam, gam, acc = upd_Psi_g_to_g(st, priors, ev, natural)
            st.Gg.update(lam, gam, acc, eta, first)
            st.gz.assign(*upd_g_to_Psi_z(st))

            lam, gam, acc = upd_Psi_z_to_z(st, scenario)
            st.zz.update(lam, gam, acc, eta, first)
        per_iter = st.fronthaul_reals // config.i_max if config.i_max else 0
    return estimate_all(st, priors, scenario, per_iter)

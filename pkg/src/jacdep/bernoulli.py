"""Bernoulli-Gaussian factor ``g = h u`` shared by both message-passing graphs.

Given the message ``g -> Psi_g`` (natural form, ``(L, K)`` stack) and a
Gaussian prior ``h ~ CN(mu_p, C_p)``, the two activity hypotheses have
evidences

    vartheta(0) = CN(0 | mu_g, C_g)
    vartheta(1) = CN(0 | mu_g - mu_p, C_g + C_p)

and under ``u = 1`` the effective channel is Gaussian with natural
parameters ``(Lam_g + Lam_p, gam_g + gam_p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian import hermitian_pd_mask, hermitize, inv_pd, log_cn0, matvec, outer
from .messages import GaussianEdges, normalize_log


@dataclass
class ActivityEvidence:
    valid: np.ndarray  # g -> Psi_g proper
    log_vartheta: np.ndarray  # (L, K, 2)
    mu_a: np.ndarray
    cov_a: np.ndarray
    lam_a: np.ndarray
    gam_a: np.ndarray


def activity_evidence(gg: GaussianEdges, mu_p, cov_p, lam_p, gam_p) -> ActivityEvidence:
    valid = gg.proper()
    shape = valid.shape
    n = gg.gam.shape[-1]
    log_v = np.zeros(shape + (2,))
    mu_a = np.zeros(shape + (n,), complex)
    cov_a = np.zeros(shape + (n, n), complex)
    lam_a = gg.lam + lam_p
    gam_a = gg.gam + gam_p
    if valid.any():
        mg, cg = gg.moments()
        mg, cg = mg[valid], cg[valid]
        log_v[valid, 0] = log_cn0(mg, cg)
        log_v[valid, 1] = log_cn0(mg - mu_p[valid], cg + cov_p[valid])
        ca = inv_pd(lam_a[valid])
        cov_a[valid] = ca
        mu_a[valid] = matvec(ca, gam_a[valid])
    return ActivityEvidence(valid, log_v, mu_a, cov_a, lam_a, gam_a)


def activity_message(ev: ActivityEvidence):
    """New ``Psi_g -> u`` log-probabilities and the mask where they exist."""
    logp, ok = normalize_log(ev.log_vartheta)
    return logp, ev.valid & ok


def branch_weights(ev: ActivityEvidence, log_nu_u):
    """Normalized posterior weights of ``u = 0`` and ``u = 1``."""
    w, ok = normalize_log(log_nu_u + ev.log_vartheta)
    return np.exp(w), ok & ev.valid


def channel_factor_message(ev: ActivityEvidence, gg: GaussianEdges, log_nu_u, lam_p, gam_p):
    """Moment-matched ``Psi_g -> g`` divided by ``g -> Psi_g``.

    The ``u = 0`` branch is a point mass at zero. Returns ``(lam, gam,
    accept)``; ``accept`` is the guard (valid inputs and Hermitian PD
    tilted and outgoing precisions).
    """
    w, ok = branch_weights(ev, log_nu_u)
    w1 = w[..., 1]
    mean = w1[..., None] * ev.mu_a
    cov = hermitize(w1[..., None, None] * ev.cov_a + (w1 * (1 - w1))[..., None, None] * outer(ev.mu_a, ev.mu_a))
    lam_t = np.zeros_like(cov)
    gam_t = np.zeros_like(mean)
    good = ok & hermitian_pd_mask(cov)
    if good.any():
        lam_t[good] = inv_pd(cov[good])
        gam_t[good] = matvec(lam_t[good], mean[good])
    lam = lam_t - gg.lam
    gam = gam_t - gg.gam
    # a single active branch reduces exactly to the prior side
    sure = ok & (w1 == 1.0)
    lam = np.where(sure[..., None, None], lam_p, lam)
    gam = np.where(sure[..., None], gam_p, gam)
    good |= sure
    accept = good & hermitian_pd_mask(lam) & np.all(np.isfinite(gam), axis=-1)
    return lam, gam, accept


def channel_posterior(ev: ActivityEvidence, log_nu_u, mu0, cov0):
    """Two-branch posterior of ``h``: ``CN(mu0, cov0)`` if inactive,
    ``CN(mu_a, cov_a)`` if active. Returns ``(mean, cov, ok)``."""
    w, ok = branch_weights(ev, log_nu_u)
    w0, w1 = w[..., 0], w[..., 1]
    mean = w0[..., None] * mu0 + w1[..., None] * ev.mu_a
    second = w0[..., None, None] * (cov0 + outer(mu0, mu0)) + w1[..., None, None] * (ev.cov_a + outer(ev.mu_a, ev.mu_a))
    cov = hermitize(second - outer(mean, mean))
    return mean, cov, ok

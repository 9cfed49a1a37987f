"""Categorical messages and the edge containers of both factor graphs.

Categorical messages are kept as normalized log-probabilities. Gaussian edge
messages are kept in natural form, optionally with a moment-form cache for
edges that downstream updates consume as means and covariances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import AllNegInfinity, EtaOutOfRange, MissingPrior, MissingScenario, SupportMismatch
from .gaussian import hermitian_pd_mask, hermitize, inv_pd, matvec, outer


@dataclass(frozen=True, eq=False)
class CategoricalMessage:
    """Weights over a finite support, stored as log-weights."""

    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        if lw.ndim != 1 or lw.size < 2:
            raise ValueError("a categorical message needs a support of size >= 2")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError("log-weights must not be NaN or +inf")
        object.__setattr__(self, "log_weights", lw)

    @classmethod
    def from_weights(cls, w) -> "CategoricalMessage":
        w = np.asarray(w, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        with np.errstate(divide="ignore"):
            return categorical_normalize(cls(np.log(w)))

    @classmethod
    def uniform(cls, support_size: int) -> "CategoricalMessage":
        return cls(np.full(support_size, -np.log(support_size)))

    @property
    def support_size(self) -> int:
        return self.log_weights.size

    @property
    def probs(self) -> np.ndarray:
        """Normalized probabilities."""
        return np.exp(categorical_normalize(self).log_weights)


def categorical_normalize(m: CategoricalMessage) -> CategoricalMessage:
    out, ok = normalize_log(m.log_weights)
    if not ok:
        raise AllNegInfinity("every log-weight is -inf")
    return CategoricalMessage(out)


def categorical_product(ms: Sequence[CategoricalMessage], support_size: Optional[int] = None) -> CategoricalMessage:
    """Normalized elementwise product; the empty product is uniform."""
    sizes = {m.support_size for m in ms}
    if support_size is not None:
        sizes.add(support_size)
    if len(sizes) > 1:
        raise SupportMismatch(f"support sizes {sorted(sizes)}")
    if not ms:
        if support_size is None:
            raise SupportMismatch("support size needed for an empty product")
        return CategoricalMessage.uniform(support_size)
    total = np.sum([m.log_weights for m in ms], axis=0)
    return categorical_normalize(CategoricalMessage(total))


def _check_eta(eta):
    if not 0.0 <= eta <= 1.0:
        raise EtaOutOfRange(f"damping factor {eta} outside [0, 1]")


def damp_categorical(old: CategoricalMessage, new: CategoricalMessage, eta: float) -> CategoricalMessage:
    """``eta * new + (1 - eta) * old`` in the probability domain, renormalized."""
    _check_eta(eta)
    if old.support_size != new.support_size:
        raise SupportMismatch("damping messages over different supports")
    if eta == 1.0:
        return categorical_normalize(new)
    if eta == 0.0:
        return categorical_normalize(old)
    a = categorical_normalize(old).log_weights
    b = categorical_normalize(new).log_weights
    return CategoricalMessage(damp_log(a, b, eta))


# ---------------------------------------------------------------------------
# Batched categorical helpers, support along the last axis.
# ---------------------------------------------------------------------------

def normalize_log(log_w: np.ndarray):
    """Normalize log-weights along the last axis.

    Returns ``(log_p, ok)``; rows whose entries are all ``-inf`` are flagged
    ``ok == False`` and come back uniform.
    """
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w, axis=-1, keepdims=True)
    ok = np.isfinite(top[..., 0])
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = log_w - top
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        out = shifted - lse
    if not np.all(ok):
        out = np.where(ok[..., None], out, -np.log(log_w.shape[-1]))
    return out, ok


def damp_log(old: np.ndarray, new: np.ndarray, eta: float) -> np.ndarray:
    """Probability-domain damping of normalized log-probabilities, done with
    ``logaddexp`` so that small probabilities do not underflow to zero."""
    if eta == 1.0:
        return new
    if eta == 0.0:
        return old
    mixed = np.logaddexp(np.log(eta) + new, np.log1p(-eta) + old)
    return normalize_log(mixed)[0]


# ---------------------------------------------------------------------------
# Edge containers
# ---------------------------------------------------------------------------

@dataclass
class GaussianEdges:
    """A family of Gaussian messages indexed by the leading axes.

    ``informed`` marks entries holding a computed or informative value; the
    first accepted update of an uninformed entry is taken without damping.
    When ``mean``/``cov`` are present they cache the moment form and are
    refreshed on every accepted update.
    """

    lam: np.ndarray
    gam: np.ndarray
    informed: np.ndarray
    mean: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None

    @classmethod
    def uninformative(cls, shape, n, track_moments=False) -> "GaussianEdges":
        shape = tuple(shape)
        e = cls(np.zeros(shape + (n, n), complex), np.zeros(shape + (n,), complex), np.zeros(shape, bool))
        if track_moments:
            e.mean = np.zeros(shape + (n,), complex)
            e.cov = np.full(shape + (n, n), np.inf + 0j)
        return e

    @classmethod
    def from_moments(cls, mean, cov, track_moments=True) -> "GaussianEdges":
        """Build from moment form; entries without a usable natural form
        (singular covariance, e.g. a point mass) are stored uninformed."""
        mean = np.array(mean, dtype=complex)
        cov = hermitize(np.array(cov, dtype=complex))
        lam = np.zeros_like(cov)
        gam = np.zeros_like(mean)
        ok = hermitian_pd_mask(cov)
        if ok.any():
            li = inv_pd(cov[ok])
            gi = matvec(li, mean[ok])
            good = hermitian_pd_mask(li) & np.all(np.isfinite(gi), axis=-1)
            idx = tuple(ix[good] for ix in np.nonzero(ok))
            lam[idx] = li[good]
            gam[idx] = gi[good]
            ok = np.zeros_like(ok)
            ok[idx] = True
        e = cls(lam, gam, ok)
        if track_moments:
            e.mean, e.cov = mean, cov
        return e

    def proper(self) -> np.ndarray:
        return hermitian_pd_mask(self.lam)

    def update(self, new_lam, new_gam, accept, eta, damp_uninformed=False):
        """Write ``new`` where ``accept``; damp against the old value where the
        old value is informed (or everywhere with ``damp_uninformed``)."""
        accept = np.asarray(accept, bool)
        if not accept.any():
            return
        damp = accept & (self.informed | damp_uninformed) if eta < 1.0 else np.zeros_like(accept)
        with np.errstate(invalid="ignore", over="ignore"):
            lam = np.where(accept[..., None, None], new_lam, self.lam)
            gam = np.where(accept[..., None], new_gam, self.gam)
            if damp.any():
                lam = np.where(damp[..., None, None], eta * new_lam + (1 - eta) * self.lam, lam)
                gam = np.where(damp[..., None], eta * new_gam + (1 - eta) * self.gam, gam)
        self.lam, self.gam = lam, gam
        self.informed = self.informed | accept
        if self.mean is not None:
            cov = inv_pd(lam[accept])
            self.cov[accept] = cov
            self.mean[accept] = matvec(cov, gam[accept])

    def assign(self, lam, gam):
        """Overwrite every entry (variable-to-factor messages, no damping)."""
        self.lam, self.gam = lam, gam
        ok = hermitian_pd_mask(lam)
        self.informed = ok | np.any(lam != 0, axis=(-2, -1))
        if self.mean is not None:
            self.mean = np.zeros_like(gam)
            self.cov = np.full_like(lam, np.inf)
            if ok.any():
                cov = inv_pd(lam[ok])
                self.cov[ok] = cov
                self.mean[ok] = matvec(cov, gam[ok])

    def moments(self):
        """Moment form of every entry; only meaningful where ``proper()``."""
        if self.mean is not None:
            return self.mean, self.cov
        ok = self.proper()
        cov = np.full_like(self.lam, np.nan)
        mean = np.full_like(self.gam, np.nan)
        if ok.any():
            cov[ok] = inv_pd(self.lam[ok])
            mean[ok] = matvec(cov[ok], self.gam[ok])
        return mean, cov


@dataclass
class CategoricalEdges:
    """A family of categorical messages, normalized log-probabilities along the last axis."""

    logp: np.ndarray
    informed: np.ndarray

    @classmethod
    def uniform(cls, shape, support) -> "CategoricalEdges":
        shape = tuple(shape)
        return cls(np.full(shape + (support,), -np.log(support)), np.zeros(shape, bool))

    def update(self, new_logp, accept, eta, damp_uninformed=False):
        accept = np.asarray(accept, bool)
        if not accept.any():
            return
        out = np.where(accept[..., None], new_logp, self.logp)
        if eta < 1.0:
            damp = accept & (self.informed | damp_uninformed)
            if damp.any():
                out[damp] = damp_log(self.logp[damp], new_logp[damp], eta)
        self.logp = out
        self.informed = self.informed | accept


@dataclass
class EdgeStateJACD:
    """Messages of the joint activity/channel/data graph.

    Shapes use ``(L, K, T)`` for per-slot edges, ``(L, K)`` for per-link
    edges and ``(L, K, T_d, M)`` for symbol messages. Names read
    ``<from><to>``: ``yz`` is Psi_y -> z, ``zz`` is Psi_z -> z, ``zg`` is
    Psi_z -> g, ``gz`` is g -> Psi_z, ``gg`` is g -> Psi_g, ``Gg`` is
    Psi_g -> g, ``gu``/``ug`` connect Psi_g and u, ``zx``/``xz`` connect
    Psi_z and x.
    """

    yz: GaussianEdges
    zz: GaussianEdges
    zg: GaussianEdges
    gz: GaussianEdges
    gg: GaussianEdges
    Gg: GaussianEdges
    gu: CategoricalEdges
    ug: CategoricalEdges
    zx: CategoricalEdges
    xz: CategoricalEdges
    fronthaul_reals: int = 0


@dataclass
class EdgeStateJAC:
    """Messages of the pilot-only graph: ``yg`` is Psi_y -> g, ``gy`` is
    g -> Psi_y (per pilot slot); ``gg``, ``Gg``, ``gu``, ``ug`` as in
    :class:`EdgeStateJACD`."""

    yg: GaussianEdges
    gy: GaussianEdges
    gg: GaussianEdges
    Gg: GaussianEdges
    gu: CategoricalEdges
    ug: CategoricalEdges
    extras: dict = field(default_factory=dict)


def init_edge_state_jacd(priors, scenario) -> EdgeStateJACD:
    """Initial messages induced by the activity and channel priors."""
    if priors is None or getattr(priors, "log_p_u", None) is None:
        raise MissingPrior("priors with activity probabilities and channel moments are required")
    L, K, N = scenario.L, scenario.K, scenario.N
    Tp, Td = scenario.T_p, scenario.T_d
    T = Tp + Td
    M = len(scenario.constellation)
    mu, C = np.asarray(priors.mu_h, complex), np.asarray(priors.C_h, complex)
    if mu.shape != (L, K, N) or C.shape != (L, K, N, N):
        raise MissingPrior(f"channel priors of shape {mu.shape}/{C.shape}, expected ({L}, {K}, {N})")
    p = np.exp(np.asarray(priors.log_p_u, float))
    p0, p1 = p[:, 0][None, :, None, None], p[:, 1][None, :, None, None]

    mm = outer(mu, mu)
    mean_g = p1[..., 0] * mu
    cov_g = p1 * (C + mm * p0)
    cov_data = p1 * (C + mm) * scenario.sigma_x2

    xp = np.asarray(scenario.X_pilot, complex)[None, :, :, None]  # (1, K, Tp, 1)
    zz_mean = np.zeros((L, K, T, N), complex)
    zz_cov = np.zeros((L, K, T, N, N), complex)
    zz_mean[:, :, :Tp] = mean_g[:, :, None, :] * xp
    zz_cov[:, :, :Tp] = cov_g[:, :, None] * (np.abs(xp) ** 2)[..., None]
    zz_cov[:, :, Tp:] = cov_data[:, :, None]

    per_t = lambda a: np.broadcast_to(a[:, :, None], a.shape[:2] + (T,) + a.shape[2:])
    return EdgeStateJACD(
        yz=GaussianEdges.uninformative((L, K, T), N, track_moments=True),
        zz=GaussianEdges.from_moments(zz_mean, zz_cov),
        zg=GaussianEdges.uninformative((L, K, T), N),
        gz=GaussianEdges.from_moments(per_t(mean_g), per_t(cov_g)),
        gg=GaussianEdges.uninformative((L, K), N),
        Gg=GaussianEdges.from_moments(mean_g, cov_g),
        gu=CategoricalEdges.uniform((L, K), 2),
        ug=CategoricalEdges.uniform((L, K), 2),
        zx=CategoricalEdges.uniform((L, K, Td), M),
        xz=CategoricalEdges.uniform((L, K, Td), M),
    )


def init_edge_state_jac(scenario) -> EdgeStateJAC:
    """Initial messages from the activity probability and channel correlation."""
    if scenario is None or getattr(scenario, "Xi", None) is None:
        raise MissingScenario("a scenario with correlation matrices is required")
    L, K, N, Tp = scenario.L, scenario.K, scenario.N, scenario.T_p
    cov = scenario.lam * np.asarray(scenario.Xi, complex)
    mean = np.zeros((L, K, N), complex)
    per_t = lambda a: np.broadcast_to(a[:, :, None], a.shape[:2] + (Tp,) + a.shape[2:])
    return EdgeStateJAC(
        yg=GaussianEdges.uninformative((L, K, Tp), N),
        gy=GaussianEdges.from_moments(per_t(mean), per_t(cov)),
        gg=GaussianEdges.uninformative((L, K), N),
        Gg=GaussianEdges.from_moments(mean, cov),
        gu=CategoricalEdges.uniform((L, K), 2),
        ug=CategoricalEdges.uniform((L, K), 2),
    )

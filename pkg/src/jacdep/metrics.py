"""Genie-aided linear MMSE baseline and the DER/NMSE/SER/CDF metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyInput, LengthMismatch


def slice_to_constellation(est, constellation) -> np.ndarray:
    """Index of the nearest constellation point for each estimate."""
    est = np.asarray(est)
    return np.argmin(np.abs(est[..., None] - np.asarray(constellation)), axis=-1)


def genie_mmse_detect(scenario) -> np.ndarray:
    """Centralized LMMSE detection with known channels and activities.

    Returns constellation indices of shape ``(K, T_d)``; rows of inactive
    UEs are ``-1`` (all ``-1`` when nobody is active).
    """
    K, Tp = scenario.K, scenario.T_p
    out = -np.ones((K, scenario.T_d), int)
    active = np.flatnonzero(scenario.U)
    if active.size == 0 or scenario.T_d == 0:
        return out
    Ha = np.concatenate(list(scenario.H), axis=0)[:, active]  # (L N, |A|)
    Yd = np.concatenate(list(scenario.Y[:, :, Tp:]), axis=0)  # (L N, T_d)
    # push-through form of sigma_x^2 H^H (sigma_x^2 H H^H + sigma_n^2 I)^-1
    G = Ha.conj().T @ Ha + (scenario.sigma_n2 / scenario.sigma_x2) * np.eye(active.size)
    est = np.linalg.solve(G, Ha.conj().T @ Yd)
    out[active] = slice_to_constellation(est, scenario.constellation)
    return out


def compute_der(u_hat, u_true) -> float:
    """Fraction of realizations with a wrong activity decision."""
    u_hat, u_true = np.asarray(u_hat, bool), np.asarray(u_true, bool)
    if u_hat.shape != u_true.shape:
        raise LengthMismatch(f"{u_hat.shape} vs {u_true.shape}")
    if u_hat.size == 0:
        raise EmptyInput("no realizations")
    return float(np.mean(u_hat != u_true))


def strong_links(xi, sigma_x2, sigma_n2) -> np.ndarray:
    """Links kept in the NMSE (``sigma_x^2 xi >= sigma_n^2``)."""
    return sigma_x2 * np.asarray(xi) >= sigma_n2


def nmse_ratio(h_hat, h_true, xi, sigma_x2, sigma_n2) -> float:
    """``||h_hat - h|| / ||h||`` over the stacked strong links of one UE.

    ``h_hat`` and ``h_true`` are ``(L, N)``; returns NaN when no link qualifies.
    """
    keep = strong_links(xi, sigma_x2, sigma_n2)
    if not keep.any():
        return float("nan")
    h = np.asarray(h_true)[keep]
    return float(np.linalg.norm(np.asarray(h_hat)[keep] - h) / np.linalg.norm(h))


def compute_nmse(h_hat, h_true, xi, config, u_true=None) -> Optional[float]:
    """Mean NMSE ratio of one UE over the realizations where it is active.

    ``h_hat``/``h_true``: ``(R, L, N)``; ``xi``: ``(L,)``. Returns None if no
    realization is active or no link is strong.
    """
    h_hat, h_true = np.asarray(h_hat), np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise LengthMismatch(f"{h_hat.shape} vs {h_true.shape}")
    u = np.ones(len(h_true), bool) if u_true is None else np.asarray(u_true, bool)
    vals = [nmse_ratio(a, b, xi, config.sigma_x2, config.sigma_n2) for a, b, on in zip(h_hat, h_true, u) if on]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else None


def compute_ser(x_hat, x_true, u_true) -> Optional[float]:
    """Symbol error rate over the data of active realizations/UEs.

    ``x_hat``/``x_true``: ``(R, T_d)`` indices; ``u_true``: ``(R,)``.
    """
    x_hat, x_true = np.asarray(x_hat), np.asarray(x_true)
    u = np.asarray(u_true, bool)
    if x_hat.shape != x_true.shape or len(u) != len(x_true):
        raise LengthMismatch(f"{x_hat.shape} vs {x_true.shape} vs {u.shape}")
    if not u.any() or x_true.shape[-1] == 0:
        return None
    return float(np.mean(x_hat[u] != x_true[u]))


def empirical_cdf(values) -> np.ndarray:
    """Right-continuous empirical CDF as a ``(n_unique, 2)`` table of (value, fraction)."""
    v = np.asarray(values, float).ravel()
    if v.size == 0:
        raise EmptyInput("empirical CDF of an empty sample")
    u, counts = np.unique(v, return_counts=True)
    frac = np.cumsum(counts) / v.size
    frac[-1] = 1.0
    return np.column_stack([u, frac])


@dataclass(frozen=True)
class MetricRecord:
    """Per (UPP outcome, UE) summary; absent metrics are None."""

    upp_id: int
    ue_id: int
    der: float
    nmse: Optional[float]
    ser: Optional[float]
    n_der: int
    n_nmse: int
    n_ser: int

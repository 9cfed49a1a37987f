"""Circularly-symmetric complex Gaussians in moment and natural form.

The density convention is

    CN(x | mu, C) = exp(-(x - mu)^H C^{-1} (x - mu)) / (pi^N det C)

Two layers live here. The object API (``ComplexGaussianMoment``,
``ComplexGaussianNatural``, ``GaussianMixture`` and the functions acting on
them) handles single messages and is used for fixtures and tests. The batched
helpers at the bottom operate on stacks of vectors ``(..., N)`` and matrices
``(..., N, N)`` and carry the message-passing loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    AllZeroWeights,
    DimensionMismatch,
    EtaOutOfRange,
    ImproperMessage,
    SingularCovariance,
    ZeroScale,
)

HERMITIAN_RTOL = 1e-12


def _hermitian_error(m: np.ndarray) -> float:
    scale = np.max(np.abs(m)) if m.size else 0.0
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(m - m.conj().T)) / scale)


def _check_vec_mat(vec, mat, what):
    vec = np.asarray(vec, dtype=complex)
    mat = np.asarray(mat, dtype=complex)
    if vec.ndim != 1 or mat.shape != (vec.size, vec.size):
        raise DimensionMismatch(f"{what}: vector of length {vec.size} with matrix of shape {mat.shape}")
    if _hermitian_error(mat) > HERMITIAN_RTOL:
        raise ValueError(f"{what}: matrix is not Hermitian")
    return vec, mat


@dataclass(frozen=True, eq=False)
class ComplexGaussianMoment:
    """Gaussian with mean vector ``mean`` and covariance ``cov``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean, cov = _check_vec_mat(self.mean, self.cov, "ComplexGaussianMoment")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_proper(self) -> bool:
        return is_hermitian_pd(self.cov)

    def __eq__(self, other):
        if not isinstance(other, ComplexGaussianMoment):
            return NotImplemented
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.cov, other.cov)


@dataclass(frozen=True, eq=False)
class ComplexGaussianNatural:
    """Gaussian in natural parameters ``gamma = C^{-1} mu`` and ``lam = C^{-1}``.

    ``lam`` may be zero or indefinite; such a message is improper and cannot be
    converted to moment form.
    """

    gamma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        gamma, lam = _check_vec_mat(self.gamma, self.lam, "ComplexGaussianNatural")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.gamma.size

    @property
    def is_proper(self) -> bool:
        return is_hermitian_pd(self.lam)

    @classmethod
    def uninformative(cls, n: int) -> "ComplexGaussianNatural":
        return cls(np.zeros(n, complex), np.zeros((n, n), complex))

    def __eq__(self, other):
        if not isinstance(other, ComplexGaussianNatural):
            return NotImplemented
        return np.array_equal(self.gamma, other.gamma) and np.array_equal(self.lam, other.lam)


@dataclass(frozen=True)
class GaussianMixture:
    """Nonnegative ``weights`` over ``components`` of a common dimension."""

    weights: np.ndarray
    components: Sequence[ComplexGaussianMoment]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != len(self.components) or w.size == 0:
            raise DimensionMismatch("one weight per component is required")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("mixture weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise AllZeroWeights("mixture has no positive weight")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise DimensionMismatch("mixture components differ in dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", tuple(self.components))


def is_hermitian_pd(m) -> bool:
    """True iff ``m`` is Hermitian (1e-12 relative) and has a Cholesky factor."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.size == 0:
        return False
    if not np.all(np.isfinite(m)):
        return False
    if np.max(np.abs(m)) == 0.0 or _hermitian_error(m) > HERMITIAN_RTOL:
        return False
    try:
        chol = np.linalg.cholesky((m + m.conj().T) / 2)
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.diagonal(chol).real > 0))


def _chol(m, exc, what):
    if not is_hermitian_pd(m):
        raise exc(f"{what} is not Hermitian positive definite")
    return np.linalg.cholesky((m + m.conj().T) / 2)


def _pd_inverse(m, exc, what):
    c = _chol(m, exc, what)
    ci = np.linalg.inv(c)
    inv = ci.conj().T @ ci
    return (inv + inv.conj().T) / 2


def natural_from_moment(g: ComplexGaussianMoment) -> ComplexGaussianNatural:
    lam = _pd_inverse(g.cov, SingularCovariance, "covariance")
    return ComplexGaussianNatural(lam @ g.mean, lam)


def moment_from_natural(g: ComplexGaussianNatural) -> ComplexGaussianMoment:
    cov = _pd_inverse(g.lam, ImproperMessage, "precision")
    return ComplexGaussianMoment(cov @ g.gamma, cov)


def gaussian_product(a: ComplexGaussianMoment, b: ComplexGaussianMoment):
    """Product of two densities as ``(normalized Gaussian, scale)``.

    ``CN(x|a) CN(x|b) = scale * CN(x|result)`` with
    ``scale = CN(0 | mu_a - mu_b, C_a + C_b)``.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions {a.dim} and {b.dim}")
    na, nb = natural_from_moment(a), natural_from_moment(b)
    prod = moment_from_natural(ComplexGaussianNatural(na.gamma + nb.gamma, na.lam + nb.lam))
    scale = np.exp(_log_cn(np.zeros(a.dim), a.mean - b.mean, a.cov + b.cov))
    return prod, float(scale)


def gaussian_quotient(num: ComplexGaussianNatural, den: ComplexGaussianNatural) -> ComplexGaussianNatural:
    if num.dim != den.dim:
        raise DimensionMismatch(f"dimensions {num.dim} and {den.dim}")
    return ComplexGaussianNatural(num.gamma - den.gamma, num.lam - den.lam)


def gaussian_scale(g: ComplexGaussianMoment, c: complex) -> ComplexGaussianMoment:
    """Distribution of ``c * x`` for ``x ~ g``."""
    if c == 0:
        raise ZeroScale("scale factor must be nonzero")
    return ComplexGaussianMoment(c * g.mean, abs(c) ** 2 * g.cov)


def _log_cn(x, mean, cov):
    c = _chol(cov, SingularCovariance, "covariance")
    d = np.linalg.solve(c, np.asarray(x, complex) - mean)
    logdet = 2.0 * np.sum(np.log(np.diagonal(c).real))
    return float(-len(d) * np.log(np.pi) - logdet - np.vdot(d, d).real)


def gaussian_log_density(x, g: ComplexGaussianMoment) -> float:
    x = np.asarray(x, dtype=complex)
    if x.shape != g.mean.shape:
        raise DimensionMismatch(f"point of shape {x.shape} for a {g.dim}-dimensional Gaussian")
    return _log_cn(x, g.mean, g.cov)


def gaussian_density(x, g: ComplexGaussianMoment) -> float:
    return float(np.exp(gaussian_log_density(x, g)))


def mixture_moments(m: GaussianMixture):
    """Return ``(Z, mean, cov)`` of a weighted Gaussian mixture.

    ``Z`` is the total weight; ``mean`` and ``cov`` are those of the
    normalized mixture.
    """
    w = m.weights
    z = float(np.sum(w))
    means = np.stack([c.mean for c in m.components])
    covs = np.stack([c.cov for c in m.components])
    p = w / z
    mean = p @ means
    second = np.einsum("i,ijk->jk", p, covs + means[:, :, None] * means[:, None, :].conj())
    cov = second - np.outer(mean, mean.conj())
    return z, mean, (cov + cov.conj().T) / 2


def _check_eta(eta):
    if not 0.0 <= eta <= 1.0:
        raise EtaOutOfRange(f"damping factor {eta} outside [0, 1]")


def damp_natural(old: ComplexGaussianNatural, new: ComplexGaussianNatural, eta: float) -> ComplexGaussianNatural:
    _check_eta(eta)
    if old.dim != new.dim:
        raise DimensionMismatch(f"dimensions {old.dim} and {new.dim}")
    if eta == 1.0:
        return new
    if eta == 0.0:
        return old
    return ComplexGaussianNatural(
        eta * new.gamma + (1 - eta) * old.gamma,
        eta * new.lam + (1 - eta) * old.lam,
    )


# ---------------------------------------------------------------------------
# Batched helpers. Vectors are (..., N), matrices (..., N, N).
# ---------------------------------------------------------------------------

def hermitian_pd_mask(a: np.ndarray) -> np.ndarray:
    """Elementwise :func:`is_hermitian_pd` over a stack of matrices.

    The Cholesky recursion is written out column by column so the whole
    stack is tested at once without raising on the first failure.
    """
    a = np.asarray(a, dtype=complex)
    n = a.shape[-1]
    finite = np.all(np.isfinite(a), axis=(-2, -1))
    a = np.where(finite[..., None, None], a, 0)
    scale = np.max(np.abs(a), axis=(-2, -1))
    skew = np.max(np.abs(a - np.swapaxes(a, -1, -2).conj()), axis=(-2, -1))
    ok = finite & (scale > 0) & (skew <= HERMITIAN_RTOL * scale)
    if n == 1:
        return ok & (a[..., 0, 0].real > 0)
    chol = np.zeros_like(a)
    for j in range(n):
        d = a[..., j, j].real - np.sum(np.abs(chol[..., j, :j]) ** 2, axis=-1)
        ok &= d > 0
        ljj = np.sqrt(np.where(d > 0, d, 1.0))
        chol[..., j, j] = ljj
        if j + 1 < n:
            s = np.einsum("...ik,...k->...i", chol[..., j + 1:, :j], chol[..., j, :j].conj())
            chol[..., j + 1:, j] = (a[..., j + 1:, j] - s) / ljj[..., None]
    return ok


def hermitize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2).conj())


def inv_pd(a: np.ndarray) -> np.ndarray:
    """Inverse of a stack of Hermitian PD matrices, Hermitian on return."""
    if a.shape[-1] == 1:
        return 1.0 / a
    return hermitize(np.linalg.inv(a))


def matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", a, v)


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., :, None] * v[..., None, :].conj()


def log_cn0(mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """``log CN(0 | mean, cov)`` for stacks of PD covariances."""
    n = mean.shape[-1]
    if n == 1:
        c = cov[..., 0, 0].real
        return -np.log(np.pi * c) - np.abs(mean[..., 0]) ** 2 / c
    chol = np.linalg.cholesky(hermitize(cov))
    d = np.linalg.solve(chol, mean[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1).real), axis=-1)
    return -n * np.log(np.pi) - logdet - np.sum(np.abs(d) ** 2, axis=-1)


def batched_mixture_moments(log_w: np.ndarray, means: np.ndarray, covs: np.ndarray):
    """Moment-match mixtures along axis ``-1`` of ``log_w``.

    Shapes: ``log_w`` (..., M), ``means`` (..., M, N), ``covs`` (..., M, N, N).
    Returns ``(log Z, mean, cov)`` with ``Z`` the total (unnormalized) weight.
    Each row needs at least one finite log-weight.
    """
    top = np.max(log_w, axis=-1, keepdims=True)
    w = np.exp(log_w - top)
    s = np.sum(w, axis=-1, keepdims=True)
    p = w / s
    log_z = top[..., 0] + np.log(s[..., 0])
    mean = np.einsum("...m,...mi->...i", p, means)
    second = np.einsum("...m,...mij->...ij", p, covs + outer(means, means))
    cov = hermitize(second - outer(mean, mean))
    return log_z, mean, cov


def exclusive_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """Leave-one-out sums along ``axis`` built from prefix and suffix sums.

    Avoids ``total - own``, which loses precision when one term dominates and
    yields NaN for ``-inf`` log-weights.
    """
    a = np.moveaxis(np.asarray(a), axis, 0)
    zero = np.zeros_like(a[:1])
    prefix = np.concatenate([zero, np.cumsum(a[:-1], axis=0)], axis=0)
    suffix = np.concatenate([np.cumsum(a[::-1][:-1], axis=0)[::-1], zero], axis=0)
    return np.moveaxis(prefix + suffix, 0, axis)

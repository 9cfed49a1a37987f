"""Uplink system model: configuration, scenario generation and received signals.

Array conventions follow the model ``y_{l,t} = sum_k h_{l,k} u_k x_{k,t} + n_{l,t}``:

* ``H``: ``(L, N, K)``, column ``k`` of block ``l`` is ``h_{l,k}``
* ``Xi``: ``(L, K, N, N)`` correlation matrices with ``tr Xi_{l,k} = N xi_{l,k}``
* ``Y``: ``(L, N, T)`` with pilot columns first
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyCodebook,
    NonPositiveDistance,
    NonPSDCorrelation,
    NonSquareL,
    RangeError,
    RhoOutOfRange,
)

MODULATIONS = ("QAM4", "BPSK")
PILOT_MODES = ("iid_bpsk", "codebook")
CORRELATIONS = ("identity", "exponential")
PRIOR_MODES = ("jac_ep", "neutral")

# substream labels for counter-based seeding
_GEOMETRY, _TRIAL = 0, 1
STREAM_CHANNELS, STREAM_ACTIVITY, STREAM_PILOTS, STREAM_DATA, STREAM_NOISE = range(5)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class SimConfig:
    """Link-level parameters. Defaults reproduce the reference 16-AP setup."""

    L: int = 16
    N: int = 1
    K: int = 16
    T_p: int = 8
    T_d: int = 10
    lam: float = 0.5
    tx_power_dbm: float = 16.0
    noise_power_dbm: float = -96.0
    area_m: float = 400.0
    ap_height_m: float = 10.0
    ap_spacing_m: float = 100.0
    modulation: str = "QAM4"
    pilot_mode: str = "iid_bpsk"
    codebook_size: int = 4
    correlation: str = "identity"
    rho: float = 0.0
    eta: float = 0.5
    i_max: int = 20
    jac_i_max: int = 20
    pc_correction: bool = True
    pc_xi_of_interferer: bool = False
    pc_correction_jacd: bool = False
    damp_first_iteration: bool = False
    prior_mode: str = "jac_ep"
    pathloss_intercept_db: float = -30.5
    pathloss_slope_db: float = 36.7
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            check_field(f.name, getattr(self, f.name))

    @property
    def T(self) -> int:
        return self.T_p + self.T_d

    @property
    def sigma_x2(self) -> float:
        return dbm_to_watts(self.tx_power_dbm)

    @property
    def sigma_n2(self) -> float:
        return dbm_to_watts(self.noise_power_dbm)

    @property
    def constellation(self) -> np.ndarray:
        return constellation(self.modulation, self.sigma_x2)

    @property
    def M(self) -> int:
        return len(self.constellation)


def check_field(name, value):
    """Raise :class:`RangeError` if ``value`` is not admissible for ``name``."""
    positive = {"L", "N", "K", "i_max", "jac_i_max"}
    if name in positive and (not isinstance(value, (int, np.integer)) or value < 1):
        raise RangeError(f"{name} must be a positive integer, got {value!r}")
    if name in ("T_p", "T_d", "codebook_size") and (not isinstance(value, (int, np.integer)) or value < 0):
        raise RangeError(f"{name} must be a nonnegative integer, got {value!r}")
    if name in ("lam", "eta") and not 0.0 <= value <= 1.0:
        raise RangeError(f"{name} must lie in [0, 1], got {value!r}")
    if name in ("area_m", "ap_spacing_m") and not value > 0:
        raise RangeError(f"{name} must be positive, got {value!r}")
    if name == "rho" and not abs(value) < 1:
        raise RhoOutOfRange(f"rho must satisfy |rho| < 1, got {value!r}")
    if name == "modulation" and value not in MODULATIONS:
        raise RangeError(f"modulation must be one of {MODULATIONS}, got {value!r}")
    if name == "pilot_mode" and value not in PILOT_MODES:
        raise RangeError(f"pilot_mode must be one of {PILOT_MODES}, got {value!r}")
    if name == "correlation" and value not in CORRELATIONS:
        raise RangeError(f"correlation must be one of {CORRELATIONS}, got {value!r}")
    if name == "prior_mode" and value not in PRIOR_MODES:
        raise RangeError(f"prior_mode must be one of {PRIOR_MODES}, got {value!r}")
    if name == "T_p" and value < 1:
        raise RangeError("at least one pilot slot is required")
    if name == "seed" and not (isinstance(value, (int, np.integer)) and 0 <= value < 2**64):
        raise RangeError(f"seed must be an integer in [0, 2^64), got {value!r}")


def constellation(modulation: str, sigma_x2: float) -> np.ndarray:
    """Constant-modulus symbol alphabet with average power ``sigma_x2``."""
    a = math.sqrt(sigma_x2)
    if modulation == "QAM4":
        return a * np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / math.sqrt(2)
    if modulation == "BPSK":
        return a * np.array([1.0 + 0j, -1.0 + 0j])
    raise RangeError(f"unknown modulation {modulation!r}")


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def geometry_rng(seed: int, upp_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _GEOMETRY, upp_id]))


def trial_rng(seed: int, upp_id: int, realization_id: int, stream: int) -> np.random.Generator:
    """Independent generator per (seed, UPP outcome, realization, substream)."""
    return np.random.default_rng(np.random.SeedSequence([seed, _TRIAL, upp_id, realization_id, stream]))


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------

def place_network(config: SimConfig, rng: np.random.Generator):
    """AP grid at height ``ap_height_m`` and i.i.d. uniform UEs at height 0.

    AP ``(i, j)`` sits at ``(s/2 + i s, s/2 + j s)`` with pitch ``s =
    ap_spacing_m``.
    """
    side = math.isqrt(config.L)
    if side * side != config.L:
        raise NonSquareL(f"grid placement needs a square number of APs, got L={config.L}")
    s = config.ap_spacing_m
    coords = s / 2 + s * np.arange(side)
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    ap = np.column_stack([gx.ravel(), gy.ravel(), np.full(config.L, config.ap_height_m)])
    ue = np.column_stack([rng.uniform(0, config.area_m, size=(config.K, 2)), np.zeros(config.K)])
    return ap, ue


def pathloss_umi(d3d_m, intercept_db: float = -30.5, slope_db: float = 36.7):
    """Linear power gain ``10^((intercept - slope log10 d) / 10)``."""
    d = np.asarray(d3d_m, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDistance("distances must be positive")
    g = 10.0 ** ((intercept_db - slope_db * np.log10(d)) / 10.0)
    return float(g) if g.ndim == 0 else g


def large_scale_fading(config: SimConfig, ap: np.ndarray, ue: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(ap[:, None, :] - ue[None, :, :], axis=-1)
    return pathloss_umi(d, config.pathloss_intercept_db, config.pathloss_slope_db)


def build_correlation(config: SimConfig, xi_lk: float) -> np.ndarray:
    if config.correlation == "identity":
        return xi_lk * np.eye(config.N, dtype=complex)
    if not abs(config.rho) < 1:
        raise RhoOutOfRange(f"|rho| must be < 1, got {config.rho}")
    idx = np.arange(config.N)
    r = config.rho ** np.abs(idx[:, None] - idx[None, :])
    r = r * config.N / np.trace(r)
    return xi_lk * r.astype(complex)


def correlation_tensor(config: SimConfig, xi: np.ndarray) -> np.ndarray:
    base = build_correlation(config, 1.0)
    return xi[..., None, None] * base


def sample_channels(Xi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``h_{l,k} ~ CN(0, Xi_{l,k})``; returns ``H`` of shape ``(L, N, K)``."""
    Xi = np.asarray(Xi, dtype=complex)
    L, K, N = Xi.shape[0], Xi.shape[1], Xi.shape[-1]
    w = (rng.standard_normal((L, K, N)) + 1j * rng.standard_normal((L, K, N))) / math.sqrt(2)
    try:
        factor = np.linalg.cholesky(Xi)
    except np.linalg.LinAlgError:
        # PSD but singular (e.g. zero) correlation: fall back to a square root
        vals, vecs = np.linalg.eigh(Xi)
        scale = np.max(np.abs(vals), axis=-1, keepdims=True)
        if np.any(vals < -1e-12 * np.maximum(scale, 1e-300)):
            raise NonPSDCorrelation("correlation matrix has a negative eigenvalue")
        factor = vecs * np.sqrt(np.clip(vals, 0, None))[..., None, :]
    h = np.einsum("lkij,lkj->lki", factor, w)
    return np.transpose(h, (0, 2, 1))


def sample_activity(lam: float, K: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random(K) < lam


def generate_pilots(config: SimConfig, rng: np.random.Generator):
    """BPSK pilots of amplitude ``sigma_x`` and the collision matrix.

    ``P[k, k2]`` is True when UE ``k2 != k`` transmits exactly the same
    sequence as UE ``k``.
    """
    K, Tp = config.K, config.T_p
    if config.pilot_mode == "codebook":
        if config.codebook_size < 1:
            raise EmptyCodebook("codebook must contain at least one sequence")
        book = rng.choice([-1.0, 1.0], size=(config.codebook_size, Tp))
        signs = book[rng.integers(config.codebook_size, size=K)]
    else:
        signs = rng.choice([-1.0, 1.0], size=(K, Tp))
    P = np.all(signs[:, None, :] == signs[None, :, :], axis=-1)
    np.fill_diagonal(P, False)
    return math.sqrt(config.sigma_x2) * signs.astype(complex), P


def pilot_collisions(X_pilot: np.ndarray) -> np.ndarray:
    P = np.all(X_pilot[:, None, :] == X_pilot[None, :, :], axis=-1)
    np.fill_diagonal(P, False)
    return P


def sample_data_symbols(config: SimConfig, rng: np.random.Generator):
    """Uniform symbols; returns ``(X_data, indices)`` of shape ``(K, T_d)``."""
    const = config.constellation
    idx = rng.integers(len(const), size=(config.K, config.T_d))
    return const[idx], idx


def received_signal(H, U, X, sigma_n2, rng: Optional[np.random.Generator]):
    """``Y[l] = H[l] diag(U) X + noise``; noise is omitted when ``rng`` is None."""
    H, X = np.asarray(H), np.asarray(X)
    U = np.asarray(U, dtype=bool)
    if H.ndim != 3 or H.shape[2] != U.size or X.shape[0] != U.size:
        raise DimensionMismatch(f"H {H.shape}, U {U.shape}, X {X.shape}")
    Y = np.einsum("lnk,kt->lnt", H * U[None, None, :], X).astype(complex)
    if rng is not None:
        shape = Y.shape
        Y = Y + math.sqrt(sigma_n2 / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return Y


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

@dataclass
class NetworkScenario:
    """One realization: geometry, fading, activities, symbols and observations."""

    sigma_x2: float
    sigma_n2: float
    lam: float
    constellation: np.ndarray
    ap_positions: np.ndarray
    ue_positions: np.ndarray
    xi: np.ndarray
    Xi: np.ndarray
    H: np.ndarray
    U: np.ndarray
    X_pilot: np.ndarray
    X_data: np.ndarray
    data_idx: np.ndarray
    Y: np.ndarray
    pilot_sets: np.ndarray
    upp_id: int = 0
    realization_id: int = 0

    @property
    def L(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return self.H.shape[1]

    @property
    def K(self) -> int:
        return self.H.shape[2]

    @property
    def T_p(self) -> int:
        return self.X_pilot.shape[1]

    @property
    def T_d(self) -> int:
        return self.X_data.shape[1]

    @property
    def M(self) -> int:
        return len(self.constellation)

    @property
    def X(self) -> np.ndarray:
        return np.concatenate([self.X_pilot, self.X_data], axis=1)

    def with_observations(self, rng: Optional[np.random.Generator]) -> "NetworkScenario":
        return dataclasses.replace(self, Y=synthesize_received(self, rng))


def synthesize_received(scenario: NetworkScenario, rng: Optional[np.random.Generator]) -> np.ndarray:
    return received_signal(scenario.H, scenario.U, scenario.X, scenario.sigma_n2, rng)


def draw_geometry(config: SimConfig, upp_id: int):
    """AP/UE positions and large-scale gains of one UPP outcome."""
    ap, ue = place_network(config, geometry_rng(config.seed, upp_id))
    return ap, ue, large_scale_fading(config, ap, ue)


def assemble_scenario(config: SimConfig, ap, ue, xi, rngs, upp_id=0, realization_id=0,
                      U=None, pilots=None) -> NetworkScenario:
    """Draw the small-scale quantities for fixed geometry.

    ``rngs`` maps substream labels to generators. ``U`` and ``pilots`` (a
    ``(X_pilot, P)`` pair) override the random draws when given.
    """
    Xi = correlation_tensor(config, xi)
    H = sample_channels(Xi, rngs[STREAM_CHANNELS])
    if U is None:
        U = sample_activity(config.lam, config.K, rngs[STREAM_ACTIVITY])
    X_pilot, P = pilots if pilots is not None else generate_pilots(config, rngs[STREAM_PILOTS])
    X_data, idx = sample_data_symbols(config, rngs[STREAM_DATA])
    sc = NetworkScenario(
        sigma_x2=config.sigma_x2, sigma_n2=config.sigma_n2, lam=config.lam,
        constellation=config.constellation, ap_positions=ap, ue_positions=ue, xi=xi, Xi=Xi,
        H=H, U=np.asarray(U, bool), X_pilot=X_pilot, X_data=X_data, data_idx=idx,
        Y=np.zeros((config.L, config.N, config.T), complex), pilot_sets=P,
        upp_id=upp_id, realization_id=realization_id,
    )
    return sc.with_observations(rngs[STREAM_NOISE])


def generate_scenario(config: SimConfig, upp_id: int, realization_id: int, geometry=None) -> NetworkScenario:
    """Scenario for ``(upp_id, realization_id)``, fully determined by ``config.seed``."""
    ap, ue, xi = geometry if geometry is not None else draw_geometry(config, upp_id)
    rngs = {s: trial_rng(config.seed, upp_id, realization_id, s) for s in range(5)}
    return assemble_scenario(config, ap, ue, xi, rngs, upp_id, realization_id)


# ---------------------------------------------------------------------------
# JSON fixtures
# ---------------------------------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    out = {"dtype": a.dtype.kind, "shape": list(a.shape)}
    if a.dtype.kind == "c":
        out["re"] = a.real.ravel().tolist()
        out["im"] = a.imag.ravel().tolist()
    else:
        out["data"] = a.ravel().tolist()
    return out


def decode_array(d: dict) -> np.ndarray:
    kind, shape = d["dtype"], tuple(d["shape"])
    if kind == "c":
        return (np.array(d["re"], float) + 1j * np.array(d["im"], float)).reshape(shape)
    dtype = {"b": bool, "i": np.int64, "u": np.uint64, "f": float}[kind]
    return np.array(d["data"], dtype=dtype).reshape(shape)


def to_jsonable(obj) -> dict:
    out = {"type": type(obj).__name__}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = encode_array(v) if isinstance(v, np.ndarray) else v
    return out


def from_jsonable(cls, d: dict):
    if d.get("type") != cls.__name__:
        raise ValueError(f"expected a {cls.__name__} record, found {d.get('type')!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        v = d[f.name]
        kwargs[f.name] = decode_array(v) if isinstance(v, dict) and "dtype" in v else v
    return cls(**kwargs)


def save_scenario(scenario: NetworkScenario, path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(scenario), indent=1))


def load_scenario(path) -> NetworkScenario:
    return from_jsonable(NetworkScenario, json.loads(Path(path).read_text()))


def scenario_from_arrays(H, U, X_pilot, X_data, sigma_n2, *, Xi=None, lam=0.5, constellation=None,
                         sigma_x2=None, rng=None, Y=None) -> NetworkScenario:
    """Build a scenario from explicit arrays (fixtures and oracles).

    ``Xi`` defaults to ``I``; ``constellation`` defaults to the distinct data
    symbols; ``Y`` is synthesized (noise-free when ``rng`` is None) unless given.
    """
    H = np.asarray(H, complex)
    L, N, K = H.shape
    X_pilot = np.asarray(X_pilot, complex).reshape(K, -1)
    X_data = np.asarray(X_data, complex).reshape(K, -1)
    if Xi is None:
        Xi = np.broadcast_to(np.eye(N, dtype=complex), (L, K, N, N)).copy()
    Xi = np.asarray(Xi, complex)
    xi = np.trace(Xi, axis1=-2, axis2=-1).real / N
    if constellation is None:
        constellation = np.unique(X_data) if X_data.size else np.array([1.0 + 0j, -1.0 + 0j])
    constellation = np.asarray(constellation, complex)
    if X_data.size:
        dist = np.abs(X_data[..., None] - constellation)
        idx = np.argmin(dist, axis=-1)
    else:
        idx = np.zeros(X_data.shape, int)
    if sigma_x2 is None:
        sigma_x2 = float(np.mean(np.abs(constellation) ** 2))
    sc = NetworkScenario(
        sigma_x2=float(sigma_x2), sigma_n2=float(sigma_n2), lam=float(lam), constellation=constellation,
        ap_positions=np.zeros((L, 3)), ue_positions=np.zeros((K, 3)), xi=xi, Xi=Xi, H=H,
        U=np.asarray(U, bool), X_pilot=X_pilot, X_data=X_data, data_idx=idx,
        Y=np.zeros((L, N, X_pilot.shape[1] + X_data.shape[1]), complex), pilot_sets=pilot_collisions(X_pilot),
    )
    if Y is not None:
        return dataclasses.replace(sc, Y=np.asarray(Y, complex))
    return sc.with_observations(rng)

"""Monte Carlo campaigns: configuration files, seeded trials, aggregation and CSV output.

A campaign draws ``n_upp`` network geometries (UPP outcomes) and, for each,
``n_realizations`` independent draws of fading, activity, pilots, data and
noise. Every trial derives its random streams from ``(seed, upp_id,
realization_id)`` alone, so results do not depend on scheduling or on the
number of worker processes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import IoError, JacdepError, ParseError, RangeError, TrialError, UnknownKey
from .jac_ep import jac_ep_run, neutral_priors
from .jacd_ep import jacd_run
from .metrics import MetricRecord, compute_der, compute_ser, empirical_cdf, genie_mmse_detect, nmse_ratio
from .system import SimConfig, check_field, draw_geometry, generate_scenario

ALGORITHMS = ("jac_ep", "jacd_ep", "genie_mmse")
METRICS = {"jac_ep": ("der", "nmse"), "jacd_ep": ("der", "nmse", "ser"), "genie_mmse": ("ser",)}
WORKERS_ENV = "JACDEP_WORKERS"


@dataclass(frozen=True)
class CampaignConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    n_upp: int = 100
    n_realizations: int = 1000
    algorithms: tuple = ALGORITHMS
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        for name in ("n_upp", "n_realizations", "workers"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise RangeError(f"{name} must be a positive integer, got {v!r}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise RangeError(f"algorithms must be a non-empty subset of {ALGORITHMS}, got {self.algorithms!r}")


# ---------------------------------------------------------------------------
# Config text format
# ---------------------------------------------------------------------------

_SIM_TYPES = {f.name: f.type for f in dataclasses.fields(SimConfig)}
_ALIASES = {"lambda": "lam"}
_CALL = re.compile(r"^(\w+)\s*\(\s*([^()]*?)\s*\)$")


def _convert(kind, raw, key, line):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ParseError(f"cannot read {raw!r} as {kind} for {key}", line) from None
    return raw


def _parse_value(key, raw, line):
    """Map one ``key = value`` pair to a dict of SimConfig/CampaignConfig fields."""
    if key in ("pilot_mode", "correlation"):
        m = _CALL.match(raw)
        name, arg = (m.group(1), m.group(2)) if m else (raw, None)
        out = {key: name}
        if arg is not None:
            extra = "codebook_size" if key == "pilot_mode" else "rho"
            out[extra] = _convert(_SIM_TYPES[extra], arg, key, line)
        return out
    if key == "algorithms":
        return {key: tuple(a.strip() for a in raw.split(",") if a.strip())}
    if key in ("n_upp", "n_realizations", "workers"):
        return {key: _convert("int", raw, key, line)}
    if key == "output_dir":
        return {key: raw}
    return {key: _convert(_SIM_TYPES[key], raw, key, line)}


def parse_config_text(text: str) -> CampaignConfig:
    sim_kw, camp_kw, seen = {}, {}, {}
    for no, raw_line in enumerate(text.splitlines(), start=1):
        body = raw_line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"expected 'key = value', got {body!r}", no)
        key, raw = (s.strip() for s in body.split("=", 1))
        key = _ALIASES.get(key, key)
        if not raw:
            raise ParseError(f"missing value for {key}", no)
        if key not in _SIM_TYPES and key not in ("n_upp", "n_realizations", "algorithms", "output_dir", "workers"):
            raise UnknownKey(f"unknown key {key!r}", no)
        if key in seen:
            raise ParseError(f"{key} already set on line {seen[key]}", no)
        seen[key] = no
        for k, v in _parse_value(key, raw, no).items():
            try:
                if k in _SIM_TYPES:
                    check_field(k, v)
                    sim_kw[k] = v
                else:
                    camp_kw[k] = v
                    CampaignConfig(**{k: v})
            except RangeError as e:
                raise type(e)(str(e), no) from None
    return CampaignConfig(sim=SimConfig(**sim_kw), **camp_kw)


def parse_config(source) -> CampaignConfig:
    """Parse a config file (``Path`` or existing path string) or config text."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "=" not in source
                                    and source.strip() and os.path.isfile(source)):
        try:
            text = Path(source).read_text()
        except OSError as e:
            raise IoError(str(e)) from e
        return parse_config_text(text)
    return parse_config_text(source)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

@dataclass
class AlgorithmOutput:
    u_hat: Optional[np.ndarray] = None  # (K,)
    x_hat: Optional[np.ndarray] = None  # (K, T_d)
    nmse: Optional[np.ndarray] = None  # (K,), NaN where inactive or all links weak
    fronthaul: Optional[int] = None


@dataclass
class TrialOutput:
    upp_id: int
    realization_id: int
    U: np.ndarray
    data_idx: np.ndarray
    xi_hash: str
    outputs: dict


@lru_cache(maxsize=8)
def _geometry(sim: SimConfig, upp_id: int):
    return draw_geometry(sim, upp_id)


def xi_digest(xi) -> str:
    return hashlib.sha256(np.ascontiguousarray(xi, float).tobytes()).hexdigest()


def _nmse_per_ue(h_hat, sc):
    """``h_hat``: ``(L, K, N)``."""
    out = np.full(sc.K, np.nan)
    H = np.transpose(sc.H, (0, 2, 1))
    for k in np.flatnonzero(sc.U):
        out[k] = nmse_ratio(h_hat[:, k], H[:, k], sc.xi[:, k], sc.sigma_x2, sc.sigma_n2)
    return out


def run_trial(sim: SimConfig, algorithms, upp_id: int, realization_id: int) -> TrialOutput:
    """One realization of every requested algorithm."""
    sc = generate_scenario(sim, upp_id, realization_id, geometry=_geometry(sim, upp_id))
    outputs = {}
    jac = None
    if "jac_ep" in algorithms or ("jacd_ep" in algorithms and sim.prior_mode == "jac_ep"):
        jac = jac_ep_run(sc, sim)
    if "jac_ep" in algorithms:
        outputs["jac_ep"] = AlgorithmOutput(u_hat=jac.u_hat, nmse=_nmse_per_ue(jac.h_hat, sc))
    if "jacd_ep" in algorithms:
        priors = jac.priors if sim.prior_mode == "jac_ep" else neutral_priors(sc)
        res = jacd_run(sc, priors, sim)
        outputs["jacd_ep"] = AlgorithmOutput(u_hat=res.u_hat, x_hat=res.x_hat, nmse=_nmse_per_ue(res.h_hat, sc),
                                             fronthaul=res.fronthaul_reals_per_iter)
    if "genie_mmse" in algorithms:
        outputs["genie_mmse"] = AlgorithmOutput(x_hat=genie_mmse_detect(sc))
    return TrialOutput(upp_id, realization_id, sc.U, sc.data_idx, xi_digest(sc.xi), outputs)


def _trial_task(args):
    sim, algorithms, upp_id, r = args
    try:
        return run_trial(sim, algorithms, upp_id, r)
    except Exception as e:
        raise TrialError(upp_id, r, e) from e


# ---------------------------------------------------------------------------
# Campaign
# ---------------------------------------------------------------------------

@dataclass
class CampaignResult:
    config: CampaignConfig
    records: dict  # algorithm -> list[MetricRecord] in (upp, ue) order
    cdfs: dict  # (metric, algorithm) -> (n, 2) table
    fronthaul_reals_per_iter: Optional[int]
    xi_hashes: list
    wall_clock_s: dict


def effective_workers(cc: CampaignConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise RangeError(f"{WORKERS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise RangeError(f"{WORKERS_ENV} must be a positive integer, got {env!r}")
        return n
    return cc.workers


def _aggregate(cc: CampaignConfig, trials) -> tuple:
    K = cc.sim.K
    R = cc.n_realizations
    records = {a: [] for a in cc.algorithms}
    for upp in range(cc.n_upp):
        block = trials[upp * R:(upp + 1) * R]
        U = np.stack([t.U for t in block])
        idx = np.stack([t.data_idx for t in block])
        for alg in cc.algorithms:
            outs = [t.outputs[alg] for t in block]
            for k in range(K):
                der = nmse = ser = None
                n_der = n_nmse = n_ser = 0
                if "der" in METRICS[alg]:
                    der = compute_der([o.u_hat[k] for o in outs], U[:, k])
                    n_der = R
                if "nmse" in METRICS[alg]:
                    vals = np.array([o.nmse[k] for o in outs])
                    vals = vals[U[:, k] & ~np.isnan(vals)]
                    n_nmse = int(vals.size)
                    nmse = float(np.mean(vals)) if n_nmse else None
                if "ser" in METRICS[alg]:
                    ser = compute_ser(np.stack([o.x_hat[k] for o in outs]), idx[:, k], U[:, k])
                    n_ser = int(U[:, k].sum()) if ser is not None else 0
                records[alg].append(MetricRecord(upp, k, der, nmse, ser, n_der, n_nmse, n_ser))
    cdfs = {}
    for alg in cc.algorithms:
        for m in METRICS[alg]:
            vals = [getattr(r, m) for r in records[alg] if getattr(r, m) is not None]
            if vals:
                cdfs[(m, alg)] = empirical_cdf(vals)
    return records, cdfs


def run_campaign(cc: CampaignConfig) -> CampaignResult:
    t0 = time.perf_counter()
    sim = cc.sim
    tasks = [(sim, tuple(cc.algorithms), u, r) for u in range(cc.n_upp) for r in range(cc.n_realizations)]
    workers = effective_workers(cc)
    if workers == 1:
        trials = [_trial_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order, whatever the completion order
            trials = list(pool.map(_trial_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    t1 = time.perf_counter()

    hashes = []
    for upp in range(cc.n_upp):
        block = {t.xi_hash for t in trials[upp * cc.n_realizations:(upp + 1) * cc.n_realizations]}
        if len(block) != 1:
            raise JacdepError(f"large-scale coefficients changed within UPP outcome {upp}")
        hashes.append(block.pop())
    records, cdfs = _aggregate(cc, trials)
    fh = trials[0].outputs["jacd_ep"].fronthaul if "jacd_ep" in cc.algorithms else None
    return CampaignResult(cc, records, cdfs, fh, hashes,
                          {"trials": t1 - t0, "total": time.perf_counter() - t0, "workers": workers})


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, tuple):
        return ", ".join(map(str, v))
    return str(v)


def config_echo(cc: CampaignConfig) -> str:
    """Every parameter that affects numeric outputs, in config syntax."""
    lines = [f"{f.name} = {_fmt(getattr(cc.sim, f.name))}" for f in dataclasses.fields(cc.sim)]
    lines += [f"n_upp = {cc.n_upp}", f"n_realizations = {cc.n_realizations}",
              f"algorithms = {_fmt(tuple(cc.algorithms))}"]
    return "\n".join(lines) + "\n"


def medians(result: CampaignResult) -> dict:
    out = {}
    for alg, recs in result.records.items():
        for m in METRICS[alg]:
            vals = [getattr(r, m) for r in recs if getattr(r, m) is not None]
            out[(alg, m)] = (float(np.median(vals)) if vals else None, len(vals))
    return out


def write_results(result: CampaignResult, output_dir) -> Path:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config_echo.txt").write_text(config_echo(result.config), encoding="utf-8")

        rows = ["algorithm,upp_id,ue_id,metric,value,n_samples"]
        for alg, recs in result.records.items():
            for r in recs:
                for m in METRICS[alg]:
                    v = getattr(r, m)
                    if v is not None:
                        rows.append(f"{alg},{r.upp_id},{r.ue_id},{m},{_fmt(float(v))},{getattr(r, 'n_' + m)}")
        (out / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

        for (m, alg), tab in sorted(result.cdfs.items()):
            body = "\n".join(f"{_fmt(float(v))},{_fmt(float(c))}" for v, c in tab)
            (out / f"cdf_{m}_{alg}.csv").write_text("value,cdf\n" + body + "\n", encoding="utf-8")

        cc = result.config
        lines = [f"seed = {cc.sim.seed}", f"n_upp = {cc.n_upp}", f"n_realizations = {cc.n_realizations}"]
        if result.fronthaul_reals_per_iter is not None:
            lines.append(f"fronthaul_reals_per_iteration = {result.fronthaul_reals_per_iter}")
        for (alg, m), (med, n) in medians(result).items():
            lines.append(f"median_{m}_{alg} = {'absent' if med is None else _fmt(med)} (n = {n})")
        (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(str(e)) from e
    return out

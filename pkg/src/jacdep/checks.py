"""Acceptance checks: brute-force oracles and Monte Carlo properties.

Each ``check_*`` function runs one criterion at its full size by default and
returns a :class:`CheckResult`. Sizes can be reduced through keyword
arguments for quick smoke runs. The ``oracle`` CLI subcommand and the
acceptance test-suite both call into this module.
"""

from __future__ import annotations

import dataclasses
import hashlib
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gaussian as G
from .harness import CampaignConfig, run_campaign, write_results
from .jac_ep import jac_ep_run, neutral_priors
from .jacd_ep import _mixture_out, compute_symbol_conditioned, fronthaul_load, jacd_run, upd_Psi_z_to_g, upd_Psi_z_to_z
from .messages import init_edge_state_jacd
from .metrics import nmse_ratio
from .oracles import exact_map, lmmse_channel, monte_carlo_moments, sample_mixture
from .system import (
    STREAM_ACTIVITY,
    STREAM_PILOTS,
    SimConfig,
    assemble_scenario,
    generate_pilots,
    generate_scenario,
    large_scale_fading,
    pilot_collisions,
    place_network,
    sample_activity,
    scenario_from_arrays,
)


@dataclass
class CheckResult:
    number: int
    title: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.number} [{'PASS' if self.passed else 'FAIL'}] {self.title}: {self.summary} ({self.seconds:.1f} s)"


def _timed(number, title):
    def wrap(fn):
        def run(**kw):
            t0 = time.perf_counter()
            res = fn(**kw)
            res.number, res.title, res.seconds = number, title, time.perf_counter() - t0
            return res
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


def _rand_pd(rng, n, floor=0.5):
    a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return a @ a.conj().T / n + floor * np.eye(n)


def _rand_gauss(rng, n):
    return G.ComplexGaussianMoment(rng.standard_normal(n) + 1j * rng.standard_normal(n), _rand_pd(rng, n))


def paired_bootstrap_median_diff(a, b, n_boot=2000, seed=0, clusters=None):
    """Median(a) - median(b) with a 95% percentile interval.

    Pairs (or clusters of pairs, given as an integer label per pair) are
    resampled jointly.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    rng = np.random.default_rng(seed)
    if clusters is None:
        clusters = np.arange(a.size)
    labels, inv = np.unique(clusters, return_inverse=True)
    members = [np.flatnonzero(inv == i) for i in range(labels.size)]
    diffs = np.empty(n_boot)
    for i in range(n_boot):
        pick = np.concatenate([members[j] for j in rng.integers(labels.size, size=labels.size)])
        diffs[i] = np.median(a[pick]) - np.median(b[pick])
    lo, hi = np.percentile(diffs, [2.5, 97.5])
    return float(np.median(a) - np.median(b)), float(lo), float(hi)


# ---------------------------------------------------------------------------
# 1-3: algebra
# ---------------------------------------------------------------------------

@_timed(1, "Gaussian lemmas")
def check_gaussian_lemmas(n_instances=1000, dims=(1, 2, 4), tol=1e-10, seed=1):
    """Product/quotient round trip, pointwise product-scale identity and the
    scaling lemma, in relative error."""
    rng = np.random.default_rng(seed)
    worst = {"roundtrip": 0.0, "scale_identity": 0.0, "scaling_lemma": 0.0}
    for n in dims:
        for _ in range(n_instances):
            a, b = _rand_gauss(rng, n), _rand_gauss(rng, n)
            na, nb = G.natural_from_moment(a), G.natural_from_moment(b)
            prod, s = G.gaussian_product(a, b)
            back = G.gaussian_quotient(G.natural_from_moment(prod), nb)
            err = max(np.max(np.abs(back.lam - na.lam)) / np.max(np.abs(na.lam)),
                      np.max(np.abs(back.gamma - na.gamma)) / max(np.max(np.abs(na.gamma)), np.max(np.abs(na.lam))))
            worst["roundtrip"] = max(worst["roundtrip"], err)

            x = a.mean + rng.standard_normal(n) + 1j * rng.standard_normal(n)
            lhs = G.gaussian_log_density(x, a) + G.gaussian_log_density(x, b)
            rhs = np.log(s) + G.gaussian_log_density(x, prod)
            worst["scale_identity"] = max(worst["scale_identity"], abs(np.expm1(lhs - rhs)))

            c = complex(*rng.standard_normal(2)) * rng.uniform(0.2, 5)
            lhs = G.gaussian_log_density(c * x, G.gaussian_scale(a, c))
            rhs = -2 * n * np.log(abs(c)) + G.gaussian_log_density(x, a)
            worst["scaling_lemma"] = max(worst["scaling_lemma"], abs(np.expm1(lhs - rhs)))
    ok = all(v <= tol for v in worst.values())
    text = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return CheckResult(1, "", ok, f"worst relative errors {text} (tol {tol:g}, {n_instances} per N in {list(dims)})", worst)


@_timed(2, "Moment matching vs Monte Carlo")
def check_moment_matching(n_mixtures=50, n_samples=10**6, n_se=3.0, seed=2):
    rng = np.random.default_rng(seed)
    worst, fails = 0.0, 0
    for _ in range(n_mixtures):
        m = int(rng.integers(2, 5))
        w = rng.dirichlet(np.ones(m))
        means = rng.standard_normal(m) * 2 + 2j * rng.standard_normal(m)
        var = rng.uniform(0.1, 2.0, m)
        mix = G.GaussianMixture(w, [G.ComplexGaussianMoment([mu], [[v]]) for mu, v in zip(means, var)])
        _, mean, cov = G.mixture_moments(mix)
        smp = sample_mixture(w, means, var, n_samples, rng)
        m_mc, se_re, se_im, v_mc, se_v = monte_carlo_moments(smp)
        z = [abs(mean[0].real - m_mc.real) / se_re, abs(mean[0].imag - m_mc.imag) / se_im,
             abs(cov[0, 0].real - v_mc) / se_v]
        worst = max(worst, max(z))
        fails += any(v > n_se for v in z)
    return CheckResult(2, "", fails == 0,
                       f"{fails}/{n_mixtures} mixtures outside {n_se:g} SE, worst {worst:.2f} SE ({n_samples} samples each)",
                       {"worst_se": worst, "fails": fails})


@_timed(3, "Pilot-case reductions")
def check_pilot_reductions(n_sets=100, tol=1e-12, seed=3):
    """The pilot branches of both ``Psi_z`` updates against the generic
    one-component moment-matching route (``|x|`` varied, ``N`` in {1, 2})."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_sets):
        L, K, N, Tp = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 1 + i % 2, int(rng.integers(1, 4))
        amp = rng.uniform(0.3, 3.0, size=(K, Tp))
        xp = amp * np.exp(2j * np.pi * rng.random((K, Tp)))
        H = rng.standard_normal((L, N, K)) + 0j
        sc = scenario_from_arrays(H, np.ones(K, bool), xp, np.ones((K, 1)), 0.1,
                                  constellation=np.array([1.0 + 0j, -1.0]), rng=rng)
        st = init_edge_state_jacd(neutral_priors(sc), sc)
        T = Tp + 1
        for e in (st.yz, st.gz):
            lam = np.stack([_rand_pd(rng, N) for _ in range(L * K * T)]).reshape(L, K, T, N, N)
            e.assign(lam, (rng.standard_normal((L, K, T, N)) + 1j * rng.standard_normal((L, K, T, N))))
        lz, gz, az = upd_Psi_z_to_z(st, sc)
        lg, gg, ag = upd_Psi_z_to_g(st, sc)

        p = compute_symbol_conditioned(st, sc, "pilot")
        zero = np.zeros(p.log_theta.shape)
        rz = _mixture_out(zero, p.mu_a, p.cov_a, p.valid, st.yz.lam[:, :, :Tp], st.yz.gam[:, :, :Tp])
        xs = p.x[..., None]
        rg = _mixture_out(zero, p.mu_a / xs, p.cov_a / (np.abs(xs) ** 2)[..., None], p.valid,
                          st.gz.lam[:, :, :Tp], st.gz.gam[:, :, :Tp])
        if not (az[:, :, :Tp].all() and ag[:, :, :Tp].all() and rz[2].all() and rg[2].all()):
            return CheckResult(3, "", False, f"set {i}: a proper pilot update was rejected")
        scale_z = max(np.max(np.abs(p.lam_a)), np.max(np.abs(p.gam_a)))
        g_lam = (np.abs(p.x) ** 2)[..., None, None] * p.lam_a
        scale_g = max(np.max(np.abs(g_lam)), np.max(np.abs(p.gam_a * np.abs(p.x[..., None]))))
        errs = [np.max(np.abs(lz[:, :, :Tp] - rz[0])) / scale_z, np.max(np.abs(gz[:, :, :Tp] - rz[1])) / scale_z,
                np.max(np.abs(lg[:, :, :Tp] - rg[0])) / scale_g, np.max(np.abs(gg[:, :, :Tp] - rg[1])) / scale_g]
        worst = max(worst, max(errs))
    return CheckResult(3, "", worst <= tol, f"worst relative deviation {worst:.1e} over {n_sets} message sets (tol {tol:g})",
                       {"worst": worst})


# ---------------------------------------------------------------------------
# 4-6: oracles on small instances
# ---------------------------------------------------------------------------

@_timed(4, "LMMSE reduction")
def check_lmmse(n_real=100, snr_db=20.0, tol=1e-6, seed=4):
    rng = np.random.default_rng(seed)
    cfg = SimConfig(L=1, K=1, N=1, T_p=8, T_d=0, lam=1.0)
    s2 = 10 ** (-snr_db / 10)
    worst = 0.0
    for _ in range(n_real):
        H = (rng.standard_normal((1, 1, 1)) + 1j * rng.standard_normal((1, 1, 1))) / np.sqrt(2)
        xp = rng.choice([-1.0, 1.0], size=(1, 8)).astype(complex)
        sc = scenario_from_arrays(H, [True], xp, np.zeros((1, 0)), s2, lam=1.0,
                                  constellation=np.array([1.0 + 0j, -1.0]), rng=rng)
        h = jac_ep_run(sc, cfg).h_hat[0, 0]
        ref = lmmse_channel(sc.Y[0, :, :8], xp[0], sc.Xi[0, 0], s2)
        worst = max(worst, np.linalg.norm(h - ref) / np.linalg.norm(ref))
    return CheckResult(4, "", worst <= tol, f"worst relative deviation {worst:.1e} over {n_real} realizations (tol {tol:g})",
                       {"worst": worst})


def tiny_map_instance(rng, snr_range=(20.0, 30.0)):
    """K=2, L=1, N=1, T_p=2, T_d=2, i.i.d. BPSK pilots and data, unit gains."""
    bpsk = np.array([1.0 + 0j, -1.0 + 0j])
    s2 = 10 ** (-rng.uniform(*snr_range) / 10)
    H = (rng.standard_normal((1, 1, 2)) + 1j * rng.standard_normal((1, 1, 2))) / np.sqrt(2)
    U = rng.random(2) < 0.5
    xp = rng.choice([-1.0, 1.0], size=(2, 2)).astype(complex)
    xd = bpsk[rng.integers(2, size=(2, 2))]
    return scenario_from_arrays(H, U, xp, xd, s2, lam=0.5, constellation=bpsk, rng=rng)


@_timed(5, "Exact-MAP agreement")
def check_map_agreement(n_instances=200, target=0.9, seed=5):
    rng = np.random.default_rng(seed)
    cfg = SimConfig(L=1, K=2, N=1, T_p=2, T_d=2, lam=0.5, modulation="BPSK")
    hits, collinear, hits_distinct = 0, 0, 0
    for _ in range(n_instances):
        sc = tiny_map_instance(rng)
        res = jacd_run(sc, jac_ep_run(sc, cfg).priors, cfg)
        ref = exact_map(sc)
        ok = np.array_equal(res.u_hat, ref.u) and all(
            np.array_equal(res.x_hat[k], ref.x_idx[k]) for k in range(2) if ref.u[k])
        hits += ok
        if abs(np.vdot(sc.X_pilot[0], sc.X_pilot[1])) == 2:
            collinear += 1
        else:
            hits_distinct += ok
    rate = hits / n_instances
    distinct = n_instances - collinear
    d_rate = hits_distinct / distinct if distinct else float("nan")
    return CheckResult(5, "", rate >= target,
                       f"agreement {rate:.3f} (target {target}); {collinear}/{n_instances} instances have collinear pilots, "
                       f"agreement on the rest {d_rate:.3f}",
                       {"rate": rate, "collinear": collinear, "rate_distinct_pilots": d_rate})


@_timed(6, "Fronthaul counter")
def check_fronthaul(n_configs=20, seed=6):
    rng = np.random.default_rng(seed)
    bad = []
    for i in range(n_configs):
        cfg = SimConfig(L=int(rng.choice([1, 4, 9, 16])), K=int(rng.integers(1, 9)), T_p=int(rng.integers(1, 5)),
                        T_d=int(rng.integers(0, 6)), modulation=str(rng.choice(["QAM4", "BPSK"])),
                        i_max=int(rng.integers(1, 4)), jac_i_max=2, seed=int(rng.integers(1 << 31)))
        sc = generate_scenario(cfg, 0, 0)
        got = jacd_run(sc, jac_ep_run(sc, cfg).priors, cfg).fronthaul_reals_per_iter
        if got != fronthaul_load(cfg):
            bad.append((i, got, fronthaul_load(cfg)))
    return CheckResult(6, "", not bad, f"{n_configs - len(bad)}/{n_configs} configs match 2LK(T_d(M-1)+1) exactly",
                       {"mismatches": bad})


# ---------------------------------------------------------------------------
# 7-9: campaigns
# ---------------------------------------------------------------------------

def _unit_values(result, alg, metric):
    return {(r.upp_id, r.ue_id): getattr(r, metric) for r in result.records[alg]}


def _paired(res_a, alg_a, res_b, alg_b, metric):
    a, b = _unit_values(res_a, alg_a, metric), _unit_values(res_b, alg_b, metric)
    keys = [k for k in a if a[k] is not None and b.get(k) is not None]
    return np.array([a[k] for k in keys]), np.array([b[k] for k in keys])


@_timed(7, "Desk-scale trends")
def check_trends(n_upp=10, n_real=100, n_boot=2000, seed=7, workers=1):
    """Orderings hold when the 95% bootstrap upper bound of median(A) - median(B) is <= 0."""
    sim10 = SimConfig(L=16, N=1, K=16, lam=0.5, T_p=8, T_d=10, eta=0.5, i_max=20, seed=seed)
    sim30 = dataclasses.replace(sim10, T_d=30)
    algs = ("jacd_ep", "genie_mmse")
    r10 = run_campaign(CampaignConfig(sim=sim10, n_upp=n_upp, n_realizations=n_real, algorithms=algs, workers=workers))
    r30 = run_campaign(CampaignConfig(sim=sim30, n_upp=n_upp, n_realizations=n_real, algorithms=algs, workers=workers))
    claims = [
        ("(a) SER  T_d=30 <= T_d=10", r30, "jacd_ep", r10, "jacd_ep", "ser"),
        ("(b) NMSE T_d=30 <= T_d=10", r30, "jacd_ep", r10, "jacd_ep", "nmse"),
        ("(b) DER  T_d=30 <= T_d=10", r30, "jacd_ep", r10, "jacd_ep", "der"),
        ("(c) SER genie <= JACD, T_d=10", r10, "genie_mmse", r10, "jacd_ep", "ser"),
        ("(c) SER genie <= JACD, T_d=30", r30, "genie_mmse", r30, "jacd_ep", "ser"),
    ]
    rows, ok = {}, True
    for name, ra, aa, rb, ab, m in claims:
        a, b = _paired(ra, aa, rb, ab, m)
        d, lo, hi = paired_bootstrap_median_diff(a, b, n_boot, seed)
        good = hi <= 0.0
        ok &= good
        rows[name] = {"median_a": float(np.median(a)), "median_b": float(np.median(b)), "diff": d, "ci": (lo, hi),
                      "n_units": int(a.size), "holds": good}
    text = "; ".join(f"{k}: {v['median_a']:.3g} vs {v['median_b']:.3g}, CI [{v['ci'][0]:.3g}, {v['ci'][1]:.3g}]"
                     f"{'' if v['holds'] else ' VIOLATED'}" for k, v in rows.items())
    return CheckResult(7, "", ok, text, rows)


def copilot_scenario(config: SimConfig, r: int, radius_m=50.0):
    """Realization ``r`` with UEs 0 and 1 active, on one codebook sequence and
    within ``radius_m`` (horizontal) of a randomly chosen AP."""
    rng = np.random.default_rng([config.seed, 8, r])
    ap, ue = place_network(config, rng)
    a = int(rng.integers(config.L))
    for k in (0, 1):
        rad, ang = radius_m * np.sqrt(rng.random()), 2 * np.pi * rng.random()
        ue[k, :2] = ap[a, :2] + rad * np.array([np.cos(ang), np.sin(ang)])
    xi = large_scale_fading(config, ap, ue)
    rngs = {s: np.random.default_rng([config.seed, 9, r, s]) for s in range(5)}
    X_pilot, _ = generate_pilots(config, rngs[STREAM_PILOTS])
    X_pilot[1] = X_pilot[0]
    U = sample_activity(config.lam, config.K, rngs[STREAM_ACTIVITY])
    U[:2] = True
    return assemble_scenario(config, ap, ue, xi, rngs, 0, r, U=U, pilots=(X_pilot, pilot_collisions(X_pilot)))


@_timed(8, "Pilot-contamination ablation")
def check_pc_ablation(n_real=500, n_boot=2000, seed=8):
    """Significance: the 95% bootstrap upper bound of median(corrected) - median(uncorrected) < 0."""
    on = SimConfig(K=16, pilot_mode="codebook", codebook_size=4, T_d=0, pc_correction=True, seed=seed)
    off = dataclasses.replace(on, pc_correction=False)
    a, b, clusters = [], [], []
    for r in range(n_real):
        sc = copilot_scenario(on, r)
        H = np.transpose(sc.H, (0, 2, 1))
        ja, jb = jac_ep_run(sc, on), jac_ep_run(sc, off)
        for k in (0, 1):
            va = nmse_ratio(ja.h_hat[:, k], H[:, k], sc.xi[:, k], sc.sigma_x2, sc.sigma_n2)
            vb = nmse_ratio(jb.h_hat[:, k], H[:, k], sc.xi[:, k], sc.sigma_x2, sc.sigma_n2)
            if not (np.isnan(va) or np.isnan(vb)):
                a.append(va)
                b.append(vb)
                clusters.append(r)
    d, lo, hi = paired_bootstrap_median_diff(a, b, n_boot, seed, clusters=np.array(clusters))
    ok = hi < 0.0
    return CheckResult(8, "", ok, f"median NMSE corrected {np.median(a):.4g} vs uncorrected {np.median(b):.4g}, "
                                   f"difference {d:.3g}, 95% CI [{lo:.3g}, {hi:.3g}] over {len(a)} co-pilot UE samples",
                       {"median_on": float(np.median(a)), "median_off": float(np.median(b)), "ci": (lo, hi)})


def _tree_digest(d: Path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


@_timed(9, "Determinism across worker counts")
def check_determinism(n_upp=2, n_real=4, workers=(1, 2), seed=9):
    sim = SimConfig(L=4, K=6, T_p=4, T_d=4, i_max=5, jac_i_max=5, seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        digests = []
        for w in workers:
            cc = CampaignConfig(sim=sim, n_upp=n_upp, n_realizations=n_real, workers=w)
            digests.append(_tree_digest(write_results(run_campaign(cc), Path(tmp) / f"w{w}")))
    same = all(d == digests[0] for d in digests)
    return CheckResult(9, "", same, f"{len(digests[0])} output files byte-identical for workers {list(workers)}"
                       if same else "outputs differ between worker counts")


CHECKS = {
    1: check_gaussian_lemmas,
    2: check_moment_matching,
    3: check_pilot_reductions,
    4: check_lmmse,
    5: check_map_agreement,
    6: check_fronthaul,
    7: check_trends,
    8: check_pc_ablation,
    9: check_determinism,
}

SUITES = {
    "gaussian": 1, "moments": 2, "pilot": 3, "lmmse": 4, "map": 5,
    "fronthaul": 6, "trends": 7, "pilot-contamination": 8, "determinism": 9,
}

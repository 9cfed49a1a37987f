import dataclasses
import hashlib

import numpy as np
import pytest

from jacdep.errors import ParseError, RangeError, TrialError, UnknownKey
from jacdep.harness import (
    CampaignConfig,
    parse_config,
    run_campaign,
    run_trial,
    write_results,
)
from jacdep.system import SimConfig

SMALL = """
# tiny network
L = 4
K = 4
N = 1
T_p = 4
T_d = 3
i_max = 3
jac_i_max = 3
n_upp = 2
n_realizations = 2
algorithms = jac_ep, jacd_ep, genie_mmse
"""


class TestParse:
    def test_empty_is_default(self):
        cc = parse_config("")
        assert cc.sim == SimConfig()
        assert (cc.n_upp, cc.n_realizations) == (100, 1000)

    def test_override(self):
        assert parse_config("T_d = 30\n").sim.T_d == 30

    def test_eta_range(self):
        with pytest.raises(RangeError) as e:
            parse_config("L = 16\neta = 1.5\n")
        assert e.value.line == 2

    def test_unknown_key(self):
        with pytest.raises(UnknownKey) as e:
            parse_config("\n\nbogus = 3")
        assert e.value.line == 3

    @pytest.mark.parametrize("text", ["L 16", "L = ", "L = 2.5", "pc_correction = maybe", "L = 4\nL = 9"])
    def test_parse_errors(self, text):
        with pytest.raises(ParseError):
            parse_config(text)

    def test_special_forms(self):
        cc = parse_config("pilot_mode = codebook(8)\ncorrelation = exponential(0.7)\nlambda = 0.25\n"
                          "pc_correction = false  # ablation\nalgorithms = genie_mmse\nmodulation = BPSK")
        s = cc.sim
        assert (s.pilot_mode, s.codebook_size, s.correlation, s.rho, s.lam) == ("codebook", 8, "exponential", 0.7, 0.25)
        assert s.pc_correction is False and cc.algorithms == ("genie_mmse",) and s.modulation == "BPSK"

    def test_rho_range(self):
        with pytest.raises(RangeError):
            parse_config("correlation = exponential(1.2)")

    def test_campaign_ranges(self):
        with pytest.raises(RangeError):
            parse_config("n_upp = 0")
        with pytest.raises(RangeError):
            parse_config("algorithms = amp")

    def test_file(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text(SMALL)
        assert parse_config(p).sim.L == 4


@pytest.fixture(scope="module")
def small_result():
    return run_campaign(parse_config(SMALL))


class TestCampaign:
    def test_every_pair_present(self, small_result):
        for alg in ("jac_ep", "jacd_ep", "genie_mmse"):
            recs = small_result.records[alg]
            assert sorted((r.upp_id, r.ue_id) for r in recs) == [(u, k) for u in range(2) for k in range(4)]

    def test_metric_ranges(self, small_result):
        for recs in small_result.records.values():
            for r in recs:
                assert r.der is None or 0 <= r.der <= 1
                assert r.ser is None or 0 <= r.ser <= 1
                assert r.nmse is None or r.nmse >= 0

    def test_fronthaul(self, small_result):
        assert small_result.fronthaul_reals_per_iter == 2 * 4 * 4 * (3 * 3 + 1)

    def test_genie_only_allocates_no_ep(self, monkeypatch):
        import jacdep.harness as hz

        def boom(*a, **k):
            raise AssertionError("EP state allocated")

        monkeypatch.setattr(hz, "jac_ep_run", boom)
        monkeypatch.setattr(hz, "jacd_run", boom)
        cc = dataclasses.replace(parse_config(SMALL), algorithms=("genie_mmse",))
        res = run_campaign(cc)
        assert all(r.ser is not None or r.n_ser == 0 for r in res.records["genie_mmse"])

    def test_trial_replay(self):
        cc = parse_config(SMALL)
        a = run_trial(cc.sim, cc.algorithms, 1, 1)
        b = run_trial(cc.sim, cc.algorithms, 1, 1)
        assert np.array_equal(a.outputs["jacd_ep"].x_hat, b.outputs["jacd_ep"].x_hat)
        assert np.array_equal(a.outputs["jac_ep"].nmse, b.outputs["jac_ep"].nmse, equal_nan=True)

    def test_geometry_fixed_within_upp(self):
        cc = parse_config(SMALL)
        h = {run_trial(cc.sim, ("genie_mmse",), 0, r).xi_hash for r in range(3)}
        assert len(h) == 1
        assert run_trial(cc.sim, ("genie_mmse",), 1, 0).xi_hash not in h

    def test_trial_error_annotated(self):
        sim = SimConfig(L=4, K=4, T_p=4, T_d=2, pilot_mode="codebook", codebook_size=0)
        with pytest.raises(TrialError) as e:
            run_campaign(CampaignConfig(sim=sim, n_upp=1, n_realizations=1, algorithms=("genie_mmse",)))
        assert (e.value.upp_id, e.value.realization_id) == (0, 0)

    def test_trial_error_pickles(self):
        import pickle

        err = pickle.loads(pickle.dumps(TrialError(3, 4, ValueError("x"))))
        assert (err.upp_id, err.realization_id) == (3, 4)


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


class TestOutputs:
    def test_files(self, small_result, tmp_path):
        write_results(small_result, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"config_echo.txt", "metrics.csv", "summary.txt", "cdf_ser_jacd_ep.csv", "cdf_nmse_jac_ep.csv",
                "cdf_der_jacd_ep.csv", "cdf_ser_genie_mmse.csv"} <= names
        rows = (tmp_path / "metrics.csv").read_text().splitlines()
        assert rows[0] == "algorithm,upp_id,ue_id,metric,value,n_samples"
        # at most n_upp * K * metrics per algorithm
        assert len(rows) - 1 <= 2 * 4 * (2 + 3 + 1)
        for name in names:
            if name.startswith("cdf_"):
                tab = np.loadtxt(tmp_path / name, delimiter=",", skiprows=1, ndmin=2)
                assert np.all(np.diff(tab, axis=0) >= 0) and tab[-1, 1] == 1.0

    def test_rewrite_identical(self, small_result, tmp_path):
        write_results(small_result, tmp_path / "a")
        write_results(small_result, tmp_path / "b")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_rerun_deterministic(self, small_result, tmp_path):
        write_results(small_result, tmp_path / "a")
        write_results(run_campaign(parse_config(SMALL)), tmp_path / "b")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_workers_bit_identical(self, small_result, tmp_path):
        cc = dataclasses.replace(parse_config(SMALL), workers=2)
        write_results(small_result, tmp_path / "a")
        write_results(run_campaign(cc), tmp_path / "b")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_env_worker_override(self, monkeypatch):
        from jacdep.harness import effective_workers

        monkeypatch.setenv("JACDEP_WORKERS", "3")
        assert effective_workers(CampaignConfig(workers=1)) == 3
        monkeypatch.delenv("JACDEP_WORKERS")
        assert effective_workers(CampaignConfig(workers=2)) == 2

    def test_unwritable(self, small_result, tmp_path):
        from jacdep.errors import IoError

        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(IoError):
            write_results(small_result, blocker / "sub")

import csv
from fractions import Fraction

import numpy as np
import pytest

from quicfl import codecs, harness
from quicfl.errors import DomainError, QuicFLError
from quicfl.harness import ExperimentConfig
from quicfl.solver import SolverOptions
from quicfl.tables import QuantConfig, QuantTable


def test_config_defaults_and_errors():
    cfg = ExperimentConfig(b=2)
    assert cfg.ell == 5 and cfg.p == Fraction(1, 512)
    assert [harness.default_ell(b) for b in (1, 2, 3, 4)] == [6, 5, 4, 4]
    for bad in (dict(n=0), dict(trials=0), dict(scheme="zip"), dict(dist="cauchy")):
        with pytest.raises(DomainError):
            ExperimentConfig(**bad)


def test_generate_inputs():
    X = harness.generate_inputs("identical_lognormal", 100, 5, 1)
    assert all(X[i].tobytes() == X[0].tobytes() for i in range(5))
    X = harness.generate_inputs("lognormal", 100, 5, 1)
    assert np.all(X > 0) and not np.array_equal(X[0], X[1])
    X = harness.generate_inputs("sparse_spike", 100, 5, 1, spikes=1)
    assert np.all(np.count_nonzero(X, axis=1) == 1)
    X = harness.generate_inputs("normal", 100, 3, 1)
    assert X.shape == (3, 100)
    np.testing.assert_array_equal(X, harness.generate_inputs("normal", 100, 3, 1))
    with pytest.raises(DomainError):
        harness.generate_inputs("uniform", 10, 1, 0)


def test_ell0_scheme_mse():
    cfg = QuantConfig(b=1, ell=0, m=2)
    t = QuantTable(cfg, np.array([[-cfg.T, cfg.T]]))
    chi = harness.estimate_quantizer_mse(t)
    # (T - z)(T + z) averaged over the truncated normal
    assert chi == pytest.approx(8.58, rel=0.02)
    z = np.linspace(-cfg.T, cfg.T, 400_001)
    w = np.exp(-z * z / 2)
    assert chi == pytest.approx(np.sum(w * (cfg.T ** 2 - z * z)) / np.sum(w), rel=1e-6)


def test_point_mass_at_endpoints_is_exact():
    cfg = QuantConfig(b=1, ell=0, m=2)
    t = QuantTable(cfg, np.array([[-cfg.T, cfg.T]]))
    assert harness.estimate_quantizer_mse(t, points=[-cfg.T, cfg.T], weights=[0.5, 0.5]) == 0.0


def test_chi_stable_under_node_doubling():
    for b, ell in [(1, 6), (2, 5), (4, 4)]:
        t = harness.load_default_table(b, ell)
        a = harness.estimate_quantizer_mse(t, nodes=100_001)
        c = harness.estimate_quantizer_mse(t, nodes=200_001)
        assert abs(a - c) <= 5e-5 * a
    with pytest.raises(DomainError):
        harness.estimate_quantizer_mse(t, nodes=1000)


def test_one_shared_bit_solved_chi():
    t = harness.load_default_table(1, 1)
    assert harness.estimate_quantizer_mse(t) == pytest.approx(3.29, rel=0.05)


def test_n1_nmse_equals_vnmse():
    rep = harness.run_dme(ExperimentConfig(n=1, d=1 << 12, b=2, trials=4, seed=2))
    assert rep.nmse == pytest.approx(rep.vnmse, rel=1e-12)
    assert rep.nmse >= 0


def test_headline_vnmse():
    rep = harness.run_dme(ExperimentConfig(n=1, d=1 << 16, b=1, ell=6, trials=3, seed=1))
    assert rep.vnmse == pytest.approx(1.52, rel=0.10)
    assert rep.bits_per_coord == pytest.approx(1 + 64 / 512, rel=0.05)


def test_bsq_bound_through_harness():
    rep = harness.run_dme(ExperimentConfig(scheme="bsq", n=1, d=1 << 12, b=1, p="1/32", trials=20))
    assert rep.vnmse <= 32


@pytest.mark.parametrize("scheme", ["qsgd", "minmax_hadamard", "quicfl_alg1"])
def test_other_schemes_run(scheme):
    rep = harness.run_dme(ExperimentConfig(scheme=scheme, n=3, d=300, b=2, trials=2))
    assert np.isfinite(rep.nmse) and rep.nmse > 0 and rep.vnmse_per_client.shape == (3,)


def test_nmse_near_vnmse_over_n():
    rep = harness.run_dme(ExperimentConfig(n=8, d=1 << 12, b=2, dist="lognormal", trials=10, seed=4))
    assert rep.nmse == pytest.approx(rep.vnmse / 8, rel=0.25)


def test_missing_and_mismatched_table(tmp_path, monkeypatch, small_table):
    monkeypatch.setenv(harness.TABLE_DIR_ENV, str(tmp_path))
    with pytest.raises(QuicFLError, match="quicfl solve"):
        harness.load_default_table(2, 7)
    with pytest.raises(DomainError):
        harness.run_dme(ExperimentConfig(b=1, ell=6, d=64), small_table)


def test_table_dir_env_takes_priority(tmp_path, monkeypatch, small_table):
    from quicfl.tables import default_table_name, write_table
    write_table(small_table, tmp_path / default_table_name(2, 2, 64))
    monkeypatch.setenv(harness.TABLE_DIR_ENV, str(tmp_path))
    assert harness.load_default_table(2, 2, 64).table_hash == small_table.table_hash


def test_deterministic_across_threads():
    cfg = ExperimentConfig(n=3, d=1000, b=2, dist="lognormal", trials=6, seed=11)
    a = harness.run_dme(cfg)
    b = harness.run_dme(ExperimentConfig(**{**cfg.__dict__, "threads": 4}))
    np.testing.assert_array_equal(a.nmse_per_trial, b.nmse_per_trial)
    np.testing.assert_array_equal(a.vnmse_per_trial, b.vnmse_per_trial)
    assert a.nmse == b.nmse


def test_csv_format(tmp_path):
    cfg = ExperimentConfig(n=2, d=256, b=1, trials=2)
    rep = harness.run_dme(cfg)
    path = tmp_path / "out.csv"
    harness.write_csv([harness.report_row(cfg, rep)], path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 1 and rows[0]["p"] == "1/512"
    assert rows[0]["nmse"] == format(rep.nmse, ".9g")


def test_sweep_small_grid_and_failure_flag(monkeypatch):
    tables = {}
    rows = harness.sweep([1, 2], [0, 1, 2], ["1/512"], m=16, opts=SolverOptions(restarts=2), tables=tables)
    assert len(rows) == 6 and all(r.ok for r in rows)
    assert all(r.monotone_ell and r.monotone_b for r in rows)
    assert len(tables) == 6

    real = harness.solve_table

    def flaky(cfg, opts=None, initial=()):
        if cfg.ell == 1:
            raise harness.InfeasibleError("forced")
        return real(cfg, opts, initial)

    monkeypatch.setattr(harness, "solve_table", flaky)
    rows = harness.sweep([1], [0, 1, 2], ["1/512"], m=16, opts=SolverOptions(restarts=1))
    assert [r.ok for r in rows] == [True, False, True]


def test_sweep_flags_violations():
    rows = [harness.SweepRow(1, 0, Fraction(1, 2), 2.0, 2.0), harness.SweepRow(1, 1, Fraction(1, 2), 3.0, 3.0)]
    harness._flag_monotonicity(rows)
    assert rows[0].monotone_ell and not rows[1].monotone_ell


def test_power_iteration_uncompressed_is_exact():
    res = harness.power_iteration(ExperimentConfig(scheme="none", n=4, d=64, seed=1), rounds=10)
    assert np.all(res.errors == 0)
    res = harness.power_iteration(ExperimentConfig(n=4, d=64, b=32, seed=1), rounds=5)
    assert np.all(res.errors == 0)


def test_power_iteration_single_client_matches_manual_loop():
    cfg = ExperimentConfig(n=1, d=32, b=2, seed=3)
    data = harness.synthetic_rows(32, 80, 9)
    res = harness.power_iteration(cfg, rounds=6, data=data)
    table = harness.load_default_table(2, 5)
    cov = data.T @ data
    rng = np.random.default_rng(harness.prng.derive_seed(3, 0x51))
    v = rng.standard_normal(32)
    v /= np.linalg.norm(v)
    for rnd in range(6):
        w = cov @ v
        diff = w / np.linalg.norm(w) - v
        g = harness.prng.derive_seed(3, rnd, 0)
        msg = codecs.encode_quicfl(diff, table, g, harness.prng.derive_seed(3, rnd, 1, 0),
                                   harness.prng.derive_seed(3, rnd, 2, 0))
        v = v + 0.1 * codecs.decode_aggregate([msg], table, g)
        v /= np.linalg.norm(v)
    np.testing.assert_allclose(res.estimate, v, atol=1e-12)


def test_power_iteration_converges_to_top_eigenvector():
    cfg = ExperimentConfig(scheme="none", n=5, d=32, seed=2)
    data = harness.synthetic_rows(32, 400, 2)
    res = harness.power_iteration(cfg, rounds=300, data=data)
    top = np.linalg.eigh(data.T @ data)[1][:, -1]
    assert abs(top @ res.estimate) > 0.99


def test_power_iteration_error_decreases_with_bits():
    med = []
    for b in (1, 2, 4):
        errs = [harness.power_iteration(ExperimentConfig(n=10, d=256, b=b, seed=s), 50).errors[-1]
                for s in range(5)]
        med.append(np.median(errs))
    assert med[0] >= med[1] >= med[2]


def test_power_iteration_errors():
    cfg = ExperimentConfig(n=2, d=8, b=1, scheme="none")
    with pytest.raises(DomainError):
        harness.power_iteration(cfg, 3, data=np.zeros((10, 8)))
    with pytest.raises(DomainError):
        harness.power_iteration(cfg, 3, data=np.ones(8))
    with pytest.raises(DomainError):
        harness.power_iteration(cfg, 3, data=np.ones((10, 7)))


def test_scaling_with_clients():
    base = dict(d=1 << 14, b=4, dist="identical_lognormal", trials=3, seed=3)
    r4 = harness.run_dme(ExperimentConfig(n=4, **base))
    r64 = harness.run_dme(ExperimentConfig(n=64, **base))
    assert r64.nmse / r4.nmse == pytest.approx(4 / 64, rel=0.25)


@pytest.mark.slow
def test_gap_to_chi_shrinks_with_dimension():
    t = harness.load_default_table(1, 6)
    chi = harness.estimate_quantizer_mse(t)
    gaps = []
    for d in (1 << 10, 1 << 14, 1 << 18):
        rep = harness.run_dme(ExperimentConfig(n=1, d=d, b=1, trials=20, seed=5), t)
        gaps.append(np.median(np.abs(rep.vnmse_per_trial[:, 0] - chi)))
    assert gaps[0] >= gaps[1] >= gaps[2]

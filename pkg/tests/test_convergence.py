import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lqmfc.convergence import (
    BANDS,
    RateReport,
    coupled_pass,
    fit_loglog,
    rate_studies,
    write_plot_data,
    write_rate_csv,
    write_summary_csv,
)
from lqmfc.fields import make_pde_config, solve_decoupling_field
from lqmfc.model import InitialLaw, ModelError
from lqmfc.noise import NoisePlan
from lqmfc.riccati import solve_P
from lqmfc.sim import ClosedLoop


def test_fit_exact_power_laws():
    s, c, r2 = fit_loglog([(8, 1 / 8), (16, 1 / 16), (32, 1 / 32)])
    assert s == pytest.approx(-1.0, abs=1e-12) and r2 == pytest.approx(1.0)
    s, _, _ = fit_loglog([(8, 1.0), (16, 0.25), (32, 0.0625)])
    assert s == pytest.approx(-2.0, abs=1e-12)
    s, _, _ = fit_loglog([(8, 3.0), (16, 3.0), (32, 3.0)])
    assert s == pytest.approx(0.0, abs=1e-12)


@given(st.floats(-3, 3), st.floats(0.1, 10))
@settings(max_examples=50, deadline=None)
def test_fit_recovers_slope(slope, c):
    rows = [(n, c * n**slope) for n in (4, 8, 16, 32, 64)]
    assert fit_loglog(rows)[0] == pytest.approx(slope, abs=1e-9)


def test_fit_drops_nonpositive_rows():
    with pytest.warns(RuntimeWarning):
        s, _, _ = fit_loglog([(8, 0.0), (16, 1 / 16), (32, 1 / 32)])
    assert s == pytest.approx(-1.0)
    with pytest.raises(ValueError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit_loglog([(8, 0.0), (16, 1.0)])


def test_report_states():
    r = RateReport("FIELD_GAP", [(8, 0.0, 0.0), (16, 0.0, 0.0), (32, 0.0, 0.0)])
    assert r.degenerate and r.passed is None and r.slope is None
    r = RateReport("CHAOS", [(8, 0.1, 0.01)])
    assert r.passed is False and any("slope undefined" in n for n in r.notes)
    r = RateReport("CHAOS", [(32, 1 / 32, 0), (8, 1 / 8, 0), (16, 1 / 16, 0)])
    assert [n for n, _, _ in r.rows] == [8, 16, 32]
    assert r.passed is True
    with pytest.raises(ValueError):
        RateReport("CHAOS", [(8, -1.0, 0.0)])


def test_cost_gap_needs_monotone_errors():
    rows = [(8, 0.1, 0.001), (16, 0.2, 0.001), (32, 0.01, 0.001), (64, 0.005, 0.001)]
    r = RateReport("COST_GAP", rows)
    assert r.slope < BANDS["COST_GAP"][1]
    assert r.monotone_flags() == [(8, 16)] and r.passed is False


def test_moment_needs_flat_errors():
    assert RateReport("MOMENT", [(8, 2.0, 0), (16, 2.01, 0), (32, 1.99, 0)]).passed is True
    # nearly flat slope but too much spread
    assert RateReport("MOMENT", [(8, 2.0, 0), (16, 2.6, 0), (32, 2.0, 0)]).passed is False


@pytest.fixture(scope="module")
def small(nonconvex):
    m = nonconvex
    P = solve_P(m, 100)
    cfg = make_pde_config(m, P, 80)
    phi = solve_decoupling_field(m, P, cfg, m.sigma0**2)
    psis = {N: solve_decoupling_field(m, P, cfg, m.sigma**2 / N + m.sigma0**2, name=f"psi_N{N}") for N in (2, 4, 8)}
    return m, P, phi, psis


def test_field_gap_matches_direct_sup(small):
    m, P, phi, psis = small
    plan = NoisePlan(3, 100, 1.0)
    vals = coupled_pass(m, P, phi, psis[4], 4, 6, plan)
    kern = ClosedLoop(m, P, 100)
    _, _, xbN, _ = kern.particle_paths(psis[4], plan.init_block(m.init, range(6), 4), plan.common_block(range(6)),
                                       plan.idio_block(range(6), 4))
    direct = np.max((phi.eval(kern.t, xbN) - psis[4].eval(kern.t, xbN)) ** 2, axis=-1)
    np.testing.assert_allclose(vals["FIELD_GAP"], direct, rtol=1e-12, atol=0)
    assert all(v.shape == (6,) for v in vals.values())


def test_field_gap_degenerate_without_idiosyncratic_noise(nonconvex):
    m = nonconvex.replace(sigma=0.0)
    P = solve_P(m, 100)
    cfg = make_pde_config(m, P, 80)
    phi = solve_decoupling_field(m, P, cfg, m.sigma0**2)
    psis = {N: solve_decoupling_field(m, P, cfg, m.sigma0**2, name=f"psi_N{N}") for N in (2, 4, 8)}
    rep = rate_studies(["FIELD_GAP", "CONTROL_GAP", "VALUE_GAP"], m, P, phi, psis, [2, 4, 8], 4,
                       NoisePlan(1, 100, 1.0))
    assert all(r.degenerate and r.passed is None for r in rep.values())


def test_rate_studies_reproducible_and_worker_free(small):
    m, P, phi, psis = small
    plan = NoisePlan(9, 100, 1.0)
    a = rate_studies(["CHAOS", "MOMENT"], m, P, phi, psis, [2, 4, 8], 10, plan, workers=1)
    b = rate_studies(["CHAOS", "MOMENT"], m, P, phi, psis, [8, 4, 2], 10, plan, workers=4)
    for q in a:
        assert a[q].rows == b[q].rows and a[q].seed == 9
    with pytest.raises(ModelError):
        rate_studies(["CHAOS"], m, P, phi, psis, [16], 10, plan)
    with pytest.raises(ModelError):
        rate_studies(["NOPE"], m, P, phi, psis, [2], 10, plan)


def test_writers(tmp_path):
    r = RateReport("CHAOS", [(8, 1 / 8, 0.01), (16, 1 / 16, 0.01), (32, 1 / 32, 0.01)])
    d = RateReport("FIELD_GAP", [(8, 0.0, 0.0), (16, 0.0, 0.0), (32, 0.0, 0.0)])
    write_rate_csv(tmp_path / "r.csv", r, "# seed: 1\n")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[:2] == ["# seed: 1", "quantity,N,error,stderr"] and len(lines) == 5
    write_summary_csv(tmp_path / "s.csv", [r, d])
    rows = [l.split(",") for l in (tmp_path / "s.csv").read_text().splitlines()[1:]]
    assert rows[0][5] == "1" and rows[1][5] == "degenerate"
    write_plot_data(tmp_path / "p.dat", r)
    pts = np.loadtxt(tmp_path / "p.dat")
    np.testing.assert_allclose(pts, [[3, -3], [4, -4], [5, -5]], atol=1e-12)

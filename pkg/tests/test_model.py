import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lqmfc.model import (
    CATALOG_KINDS,
    AssumptionError,
    InitialLaw,
    ModelError,
    catalog_make,
    fn_from_spec,
    validate_assumptions,
)
from lqmfc.riccati import solve_P

from conftest import lq_model, make_model

GRID = np.linspace(-10.0, 10.0, 1001)
H = 1e-5


def all_kinds():
    return [
        catalog_make("zero"),
        catalog_make("constant", {"c": 1.5}),
        catalog_make("affine", {"slope": -2.0, "intercept": 0.5}),
        catalog_make("quadratic", {"coef": 0.7}),
        catalog_make("sin", {"amplitude": 1.3, "frequency": 0.8, "phase": 0.2}),
        catalog_make("cos", {"amplitude": -0.5, "frequency": 2.0}),
        catalog_make("tanh", {"amplitude": 0.9, "scale": 1.7}),
        catalog_make("neg_logistic", {"amplitude": 1.0, "scale": 1.0}),
        fn_from_spec({"kind": "scaled_sum", "params": {"terms": [
            {"scale": 1.0, "fn": {"kind": "cos"}}, {"scale": 2.0, "fn": {"kind": "neg_logistic"}}]}}),
    ]


def test_neg_logistic_values():
    f = catalog_make("neg_logistic")
    assert f.value(0.0) == -0.5
    assert f.d1(0.0) == 0.25
    xs = np.array([-3.0, 0.4, 2.0])
    np.testing.assert_allclose(f.value(xs), -1.0 / (np.exp(xs) + 1.0), rtol=1e-15)


def test_zero_kind():
    f = catalog_make("zero")
    for x in (-3.0, 0.0, 7.5):
        assert f.value(x) == f.d1(x) == f.d2(x) == 0.0


def test_sin_second_derivative():
    f = catalog_make("sin", {"amplitude": 1.0})
    assert f.d2(math.pi / 2) == pytest.approx(-1.0, abs=1e-15)
    np.testing.assert_allclose(f.d2(GRID), -np.sin(GRID), atol=1e-15)


@pytest.mark.parametrize("fn", all_kinds(), ids=lambda f: f.kind)
def test_derivatives_match_central_differences(fn):
    fd1 = (fn.value(GRID + H) - fn.value(GRID - H)) / (2 * H)
    fd2 = (fn.d1(GRID + H) - fn.d1(GRID - H)) / (2 * H)
    assert np.all(np.abs(fn.d1(GRID) - fd1) <= 1e-6 * (1 + np.abs(fn.d1(GRID))))
    assert np.all(np.abs(fn.d2(GRID) - fd2) <= 1e-6 * (1 + np.abs(fn.d2(GRID))))


@settings(max_examples=60, deadline=None)
@given(
    kind=st.sampled_from(["sin", "cos", "tanh", "neg_logistic"]),
    amp=st.floats(-3, 3),
    scale=st.floats(0.1, 3),
)
def test_derivative_consistency_property(kind, amp, scale):
    key = "frequency" if kind in ("sin", "cos") else "scale"
    fn = catalog_make(kind, {"amplitude": amp, key: scale})
    fd1 = (fn.value(GRID + H) - fn.value(GRID - H)) / (2 * H)
    assert np.all(np.abs(fn.d1(GRID) - fd1) <= 1e-6 * (1 + np.abs(fn.d1(GRID))))


@pytest.mark.parametrize("fn", all_kinds(), ids=lambda f: f.kind)
def test_sup_bounds_dominate_samples(fn):
    xs = np.linspace(-40, 40, 80001)
    b0, b1, b2 = fn.sup_bounds()
    assert np.max(np.abs(fn.value(xs))) <= b0 * (1 + 1e-12) + 1e-15 or math.isinf(b0)
    assert np.max(np.abs(fn.d1(xs))) <= b1 * (1 + 1e-12) + 1e-15 or math.isinf(b1)
    assert np.max(np.abs(fn.d2(xs))) <= b2 * (1 + 1e-12) + 1e-15


def test_tanh_and_logistic_curvature_bounds_are_attained():
    xs = np.linspace(-5, 5, 200001)
    t = catalog_make("tanh")
    assert np.max(np.abs(t.d2(xs))) == pytest.approx(t.sup_bounds()[2], rel=1e-6)
    g = catalog_make("neg_logistic")
    assert np.max(np.abs(g.d2(xs))) == pytest.approx(g.sup_bounds()[2], rel=1e-6)


def test_oracle_only_flags():
    flags = {f.kind: f.oracle_only for f in all_kinds()}
    assert flags["affine"] and flags["quadratic"]
    assert not any(v for k, v in flags.items() if k not in ("affine", "quadratic"))


def test_catalog_errors():
    with pytest.raises(ModelError):
        catalog_make("exp")
    with pytest.raises(ModelError):
        catalog_make("tanh", {"scale": -1.0})
    with pytest.raises(ModelError):
        catalog_make("sin", {"frequency": 0.0})
    with pytest.raises(ModelError):
        catalog_make("sin", {"wavelength": 1.0})
    with pytest.raises(ModelError):
        catalog_make("constant", {"c": float("nan")})
    with pytest.raises(ModelError):
        catalog_make("scaled_sum", {"terms": []})


def test_spec_round_trip():
    for f in all_kinds():
        g = fn_from_spec(f.to_spec())
        np.testing.assert_array_equal(g.value(GRID), f.value(GRID))
    assert set(CATALOG_KINDS) >= {f.kind for f in all_kinds()}


def test_initial_law_moments(rng):
    for law, var in [
        (InitialLaw("point", 1.5, 0.0), 0.0),
        (InitialLaw("gaussian", 0.5, 0.4), 0.16),
        (InitialLaw("uniform", -1.0, 0.6), 0.12),
    ]:
        assert law.second_moment == pytest.approx(law.mean**2 + var, rel=1e-15)
        draws = np.array([law.sample(rng) for _ in range(20000)])
        assert abs(np.mean(draws**2) - law.second_moment) < 5 * np.std(draws**2) / np.sqrt(draws.size) + 1e-12
    with pytest.raises(ModelError):
        InitialLaw("cauchy")
    with pytest.raises(ModelError):
        InitialLaw("gaussian", 0.0, -1.0)


def test_model_invariants():
    with pytest.raises(ModelError):
        make_model(sigma0=0.0)
    with pytest.raises(ModelError):
        make_model(sigma=-1.0)
    with pytest.raises(ModelError):
        make_model(T=0.0)
    m = make_model(R=0.0)  # constructible, but the solvers refuse it
    with pytest.raises(AssumptionError, match="R > 0"):
        m.require_positive_R()


def test_model_dict_round_trip(nonconvex):
    from lqmfc.model import MfcModel

    m2 = MfcModel.from_dict(nonconvex.to_dict())
    assert m2.to_dict() == nonconvex.to_dict()
    with pytest.raises(ModelError):
        MfcModel.from_dict({**nonconvex.to_dict(), "extra": 1})


# ---- assumption validator ----------------------------------------------------


def test_all_zero_couplings_pass_with_unit_margin():
    m = make_model()
    rep = validate_assumptions(m, solve_P(m, 100))
    assert rep.all_passed
    assert rep["A3"].margin == 1.0


def test_lq_curvature_margin_is_exact():
    m = lq_model(R=1.0, Rb=0.5)
    rep = validate_assumptions(m, solve_P(m, 100))
    assert rep["A3"].margin == pytest.approx(1.5, abs=1e-15)
    # affine/quadratic couplings are unbounded, so A1 is flagged
    assert not rep["A1"].passed


def test_R_zero_is_a_hard_failure():
    m = make_model(R=0.0)
    P = solve_P(make_model(), 100)
    with pytest.raises(AssumptionError, match="implementation requires R > 0"):
        validate_assumptions(m, P)


def _constant_b(R):
    a = catalog_make("neg_logistic")
    return make_model(
        Q=0.0, G=0.0, R=R, a=a, b=catalog_make("constant", {"c": 0.5}), q_fn=catalog_make("sin"),
        r_fn=catalog_make("scaled_sum", {"terms": [(1.0, catalog_make("cos")), (1.0, a)]}),
    )


def test_constant_b_curvature_margin_against_grid_scan():
    with pytest.raises(AssumptionError):
        validate_assumptions(_constant_b(0.0), solve_P(make_model(), 100))
    m = _constant_b(1.0)
    rep = validate_assumptions(m, solve_P(m, 100))
    # independent oracle: scan |R + r''(u)/2 + y b''(u)| on a 1e-2 grid with the
    # closed-form second derivatives (b is constant so b'' = 0)
    u = np.arange(-1000, 1001) * 1e-2
    e = np.exp(u)
    r2 = -np.cos(u) + e * (1 - e) / (1 + e) ** 3
    oracle = np.min(np.abs(1.0 + 0.5 * r2))
    assert rep["A3"].margin == pytest.approx(oracle, abs=1e-12)
    assert rep["A3"].passed


def test_failed_entries_carry_violating_witness():
    # b' > 0 somewhere with P > 0 breaks the cross condition of A4
    m = make_model(b=catalog_make("tanh", {"amplitude": 0.5}), a=catalog_make("zero"))
    P = solve_P(m, 100)
    rep = validate_assumptions(m, P)
    e = rep["A4_cross"]
    assert not e.passed
    t, ua, ub = e.witness
    val = m.a.d1(ua) * P.eval(t) - m.B * m.b.d1(ub) * P.eval(t) ** 2 / m.R
    assert val < -1e-12
    assert val == pytest.approx(e.margin)

    # curvature failure: b'' large relative to R
    m3 = make_model(b=catalog_make("tanh", {"amplitude": 2.0}))
    rep3 = validate_assumptions(m3, solve_P(m3, 100))
    e3 = rep3["A3"]
    assert not e3.passed
    u, y = e3.witness
    assert abs(m3.R + 0.5 * m3.r_fn.d2(u) + y * m3.b.d2(u)) < 1e-3


def test_validator_is_deterministic(nonconvex):
    P = solve_P(nonconvex, 200)
    assert validate_assumptions(nonconvex, P).rows() == validate_assumptions(nonconvex, P).rows()

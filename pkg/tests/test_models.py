import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirnn import models as m


@pytest.fixture(scope="module")
def sg():
    return m.load_sg()


@pytest.fixture(scope="module")
def gains():
    return m.load_gfm().gains


def sg_params(**kw):
    base = dict(M=0.02, D=0.01, X_d=0.8, X_dp=0.25, X_q=0.6, X_qp=0.25, T_do_p=6.0, T_qo_p=0.5,
                R=0.003, omega_o=2 * math.pi * 50)
    base.update(kw)
    return m.SgParams(**base)


def eq4_residual(I_d, I_q, delta, theta, V, E_qp, E_dp, p):
    """Substitute currents back into the stator equations."""
    r1 = E_dp - V * math.sin(delta - theta) - p.R * I_d + p.X_q * I_q
    r2 = E_qp - V * math.cos(delta - theta) - p.R * I_q - p.X_d * I_d
    return max(abs(r1), abs(r2))


# ---------------------------------------------------------------------------
# stator currents
# ---------------------------------------------------------------------------


def test_currents_vanish_when_internal_and_terminal_voltage_agree():
    p = sg_params(R=0.0)
    I_d, I_q = m.sg_stator_currents(m.SgState(0.3, p.omega_o, 1.05, 0.0, 1.0, 0.5), m.TerminalVoltage(1.05, 0.3), p)
    assert I_d == 0 and I_q == 0


def test_currents_closed_form_decoupled_case():
    p = sg_params(R=0.0, X_d=1.0, X_q=0.5, X_dp=0.3, X_qp=0.2)
    I_d, I_q = m.sg_stator_currents(m.SgState(0.0, p.omega_o, 1.2, 0.0, 1.0, 0.5), m.TerminalVoltage(1.0, 0.0), p)
    assert I_d == pytest.approx(0.2, abs=1e-15)
    assert I_q == pytest.approx(0.0, abs=1e-15)


def test_singular_stator_system_raises():
    p = sg_params(R=0.0)
    object.__setattr__(p, "X_q", 0.0)  # bypass validation to reach the guard
    with pytest.raises(m.SingularSystemError):
        m.sg_stator_currents(m.SgState(0, 1, 1, 0, 1, 0), m.TerminalVoltage(1, 0), p)


@settings(max_examples=1000, deadline=None)
@given(
    delta=st.floats(-3, 3), theta=st.floats(-3, 3), V=st.floats(0, 1.5), E_qp=st.floats(-2, 2),
    E_dp=st.floats(-2, 2), R=st.floats(0, 0.1), X_d=st.floats(0.3, 2.0), X_q=st.floats(0.3, 2.0),
)
def test_stator_residual_below_1e12(delta, theta, V, E_qp, E_dp, R, X_d, X_q):
    p = sg_params(R=R, X_d=X_d, X_dp=0.25, X_q=X_q, X_qp=0.25)
    I_d, I_q = m.sg_stator_currents(m.SgState(delta, p.omega_o, E_qp, E_dp, 1.0, 0.5), m.TerminalVoltage(V, theta), p)
    assert eq4_residual(I_d, I_q, delta, theta, V, E_qp, E_dp, p) < 1e-12


# ---------------------------------------------------------------------------
# SG derivatives
# ---------------------------------------------------------------------------


def test_sg_equilibrium_has_vanishing_derivatives(sg):
    mdl = sg.model
    y = m.TerminalVoltage(1.02, 0.05)
    x = m.sg_equilibrium(y, sg.setpoints, mdl.sg, mdl.exciter, mdl.governor)
    dx = m.sg_derivatives(x, y, sg.setpoints, mdl.sg, mdl.exciter, mdl.governor).to_array()
    assert np.max(np.abs(dx)) < 1e-8
    assert x.omega == mdl.sg.omega_o


def test_sg_angle_and_flux_rates_cancel_without_current(sg):
    mdl = sg.model
    p = mdl.sg
    V = 1.0
    state = m.SgState(0.2, p.omega_o, V, 0.0, V, 0.37)
    dx = m.sg_derivatives(state, m.TerminalVoltage(V, 0.2), sg.setpoints, p, mdl.exciter, mdl.governor)
    assert dx.delta == 0.0
    assert dx.E_qp == 0.0


def test_sg_inertia_scales_only_speed_rate(sg):
    mdl = sg.model
    state = m.SgState(0.4, mdl.sg.omega_o + 0.3, 1.0, 0.1, 1.2, 0.6)
    y = m.TerminalVoltage(0.98, 0.1)
    a = m.sg_derivatives(state, y, sg.setpoints, mdl.sg, mdl.exciter, mdl.governor).to_array()
    p2 = m.SgParams(**{**mdl.sg.__dict__, "M": 2 * mdl.sg.M})
    b = m.sg_derivatives(state, y, sg.setpoints, p2, mdl.exciter, mdl.governor).to_array()
    assert b[1] == pytest.approx(a[1] / 2, rel=1e-14)
    np.testing.assert_array_equal(np.delete(a, 1), np.delete(b, 1))


@pytest.mark.parametrize("c", [0.5, 3.0, 10.0])
def test_sg_speed_rate_scales_with_inverse_inertia(sg, c):
    mdl = sg.model
    state = m.SgState(0.1, mdl.sg.omega_o - 0.2, 1.1, 0.05, 1.3, 0.7)
    y = m.TerminalVoltage(1.0, 0.0)
    a = m.sg_derivatives(state, y, sg.setpoints, mdl.sg, mdl.exciter, mdl.governor).omega
    pc = m.SgParams(**{**mdl.sg.__dict__, "M": c * mdl.sg.M})
    b = m.sg_derivatives(state, y, sg.setpoints, pc, mdl.exciter, mdl.governor).omega
    assert b == pytest.approx(a / c, rel=1e-13)


def test_param_invariants_rejected():
    with pytest.raises(ValueError):
        sg_params(M=0.0)
    with pytest.raises(ValueError):
        sg_params(X_dp=0.9)
    with pytest.raises(ValueError):
        m.ExciterParams(T_A=0.0, K_A=1.0)
    with pytest.raises(ValueError):
        m.GovernorParams(T_SV=0.5, R_D=0.0)
    with pytest.raises(ValueError):
        m.TerminalVoltage(-0.1, 0.0)


# ---------------------------------------------------------------------------
# GFM strategy table and f_v
# ---------------------------------------------------------------------------


def test_droop_row(gains):
    p = m.gfm_gains_from_strategy("Droop", gains)
    assert (p.tau_f, p.tau_v, p.kappa_d) == (0.0, 0.0, 0.0)
    assert p.tau_p == 1 / gains.omega_c
    assert p.kappa_f == 1 / gains.d_f and p.kappa_v == 1 / gains.d_v


def test_vsm_row(gains):
    p = m.gfm_gains_from_strategy("VSM", gains)
    assert p.tau_f == gains.m_f / gains.d_f
    assert p.kappa_d == gains.d_d / gains.d_f
    assert p.tau_p == 1 / gains.omega_c
    assert p.tau_v == 0.0


def test_dvoc_row_unit_gains():
    g = m.GfmControlGains(kappa_1=1.0, kappa_2=1.0, omega_o=1.0, V_o=1.0)
    p = m.gfm_gains_from_strategy("dVOC", g, E_star_live=1.0)
    assert (p.tau_v, p.kappa_f, p.kappa_v, p.tau_f, p.tau_p) == (1.0, 1.0, 1.0, 0.0, 0.0)


def test_dvoc_rejects_nonpositive_voltage(gains):
    with pytest.raises(ValueError):
        m.gfm_gains_from_strategy("dVOC", gains, E_star_live=0.0)


def test_unknown_strategy():
    with pytest.raises(ValueError):
        m.GfmStrategy.check("PLL")


def test_fv_values():
    assert m.fv_eval("dVOC", 1.0, 1.0) == 0.0
    assert m.fv_eval("Droop", 0.95, 1.0) == pytest.approx(0.05, abs=1e-15)
    assert m.fv_eval("dVOC", 0.5, 1.0) == 0.375


@given(st.floats(0.01, 3.0))
def test_dvoc_fv_sign_change_at_nominal(E):
    f = m.fv_eval("dVOC", E, 1.0)
    if E < 1.0:
        assert f > 0
    elif E > 1.0:
        assert f < 0


def test_dvoc_gains_follow_live_voltage(gains):
    mdl = m.load_gfm(strategy="dVOC").model
    for E in (0.8, 1.0, 1.2):
        kf, kv = mdl._gains(np.array(E))
        ref = m.gfm_gains_from_strategy("dVOC", gains, E_star_live=E)
        assert kf == pytest.approx(ref.kappa_f, rel=1e-15)
        assert kv == pytest.approx(ref.kappa_v, rel=1e-15)


# ---------------------------------------------------------------------------
# GFM derivatives
# ---------------------------------------------------------------------------


def lossless(strategy="Droop"):
    g = m.load_gfm().gains
    return m.gfm_gains_from_strategy(strategy, g, L=0.0005)


def test_gfm_d_current_rate_zero_when_aligned():
    p = lossless("VSM")
    # tau_v = 0 pins E* to its algebraic value, which is V_o when Q_m meets the set-point
    s = m.GfmState(0.2, p.omega_o, 1.0, 0.5, 0.1, 0.4, 0.0)
    dx, alg = m.gfm_derivatives(s, m.TerminalVoltage(1.0, 0.2), m.Setpoints(0.5, 0.1, "gfm"), p)
    assert alg["E_star"] == 1.0
    assert dx.I_d == 0.0


def test_gfm_q_current_rate_without_angle():
    p = lossless("VSM")
    s = m.GfmState(0.2, p.omega_o, 0.7, 0.5, 0.1, 1.0, 0.0)
    dx, _ = m.gfm_derivatives(s, m.TerminalVoltage(1.0, 0.2), m.Setpoints(0.5, 0.1, "gfm"), p)
    assert dx.I_q == pytest.approx(-p.omega_o * 1.0, rel=1e-15)


def test_droop_algebraic_frequency_is_nominal_when_balanced():
    p = lossless("Droop")
    P = 0.5
    V = 1.0
    I_d = P / (1.5 * V)
    s = m.GfmState(0.0, 123.0, 1.0, P, 0.0, I_d, 0.0)
    dx, alg = m.gfm_derivatives(s, m.TerminalVoltage(V, 0.0), m.Setpoints(P, 0.0, "gfm"), p)
    assert alg["omega"] == p.omega_o
    assert dx.delta == 0.0
    assert "E_star" in alg and dx.omega == 0.0


def test_dvoc_algebraic_power_slots():
    p = m.load_gfm(strategy="dVOC").model.p
    s = m.GfmState(0.1, p.omega_o, 1.0, 0.0, 0.0, 0.3, -0.05)
    _, alg = m.gfm_derivatives(s, m.TerminalVoltage(0.98, 0.0), m.Setpoints(0.5, 0.1, "gfm"), p)
    assert alg["P_m"] == pytest.approx(1.5 * 0.98 * 0.3, rel=1e-15)
    assert alg["Q_m"] == pytest.approx(-1.5 * 0.98 * -0.05, rel=1e-15)


def test_relaxed_power_filter_approaches_algebraic_slot():
    """Shrinking tau_p pulls the filtered power toward 1.5 V I_d monotonically."""
    g = m.load_gfm().gains
    base = m.gfm_gains_from_strategy("VSM", g, L=0.0005)
    V, I_d = 1.0, 0.4
    target = 1.5 * V * I_d
    gaps = []
    for tau in (0.02, 0.01, 0.005):
        p = m.GfmParams(**{**base.__dict__, "tau_p": tau})
        P = 0.0
        dt = 1e-5
        for _ in range(2000):  # 20 ms of the filter alone, terminal quantities frozen
            s = m.GfmState(0.0, p.omega_o, 1.0, P, 0.0, I_d, 0.0)
            dx, _ = m.gfm_derivatives(s, m.TerminalVoltage(V, 0.0), m.Setpoints(0.5, 0.0, "gfm"), p)
            P += dt * dx.P_m
        gaps.append(abs(P - target))
    assert gaps[0] > gaps[1] > gaps[2]


def test_dvoc_needs_dynamic_voltage_loop(gains):
    p = m.gfm_gains_from_strategy("dVOC", gains)
    with pytest.raises(ValueError):
        m.GfmModel(m.GfmParams(**{**p.__dict__, "tau_v": 0.0}))


# ---------------------------------------------------------------------------
# reduction and equilibria
# ---------------------------------------------------------------------------


def test_reduce_state_examples():
    assert m.reduce_state(m.SgState(0.1, 314.0, 1.1, 0.0, 1.0, 0.5)).E == 1.1
    assert m.reduce_state(m.SgState(0.1, 314.0, 4.0, 3.0, 1.0, 0.5)).E == 5.0
    r = m.reduce_state(m.GfmState(0.3, 314.0, 1.02, 0, 0, 0, 0))
    assert (r.delta, r.omega, r.E) == (0.3, 314.0, 1.02)


@given(st.floats(-10, 10), st.floats(0, 400), st.floats(-3, 3), st.floats(-3, 3))
def test_reduce_state_keeps_angle_speed_and_nonnegative_magnitude(d, w, a, b):
    r = m.reduce_state(m.SgState(d, w, a, b, 1.0, 0.5))
    assert (r.delta, r.omega) == (d, w)
    assert r.E >= 0


def test_gfm_droop_equilibrium_is_nominal_frequency():
    comp = m.load_gfm(strategy="Droop")
    p = comp.model.p
    y = m.TerminalVoltage(1.0, 0.0)
    x = m.gfm_equilibrium(y, comp.setpoints, p)
    assert x.omega == p.omega_o
    dx, _ = m.gfm_derivatives(x, y, comp.setpoints, p)
    assert np.max(np.abs(dx.to_array())) < 1e-8


@pytest.mark.parametrize("strategy", ["Droop", "VSM", "dVOC"])
def test_closed_loop_equilibrium_residual(strategy):
    comp = m.load_gfm(strategy=strategy)
    mdl = comp.model
    x = m.equilibrium(mdl, comp.setpoints.to_array(), thevenin=(1.0 + 0j, 0.3))
    y = mdl.terminal_voltage(x, 1.0 + 0j, 0.3)
    dx = mdl.derivatives(x, y, comp.setpoints.to_array())
    assert np.max(np.abs(dx)) < 1e-8
    assert x[1] == pytest.approx(mdl.omega_o, abs=1e-9)


def test_sg_equilibrium_independent_of_initial_angle(sg):
    mdl = sg.model
    y = m.TerminalVoltage(1.0, 0.0)
    ref = m.sg_equilibrium(y, sg.setpoints, mdl.sg, mdl.exciter, mdl.governor).to_array()
    for shift in (-0.1, 0.05, 0.1):
        guess = ref.copy()
        guess[0] += shift
        x = m.sg_equilibrium(y, sg.setpoints, mdl.sg, mdl.exciter, mdl.governor, guess=m.SgState.from_array(guess))
        np.testing.assert_allclose(x.to_array(), ref, atol=1e-8)


def test_equilibrium_failure_reports_residual(sg):
    mdl = sg.model
    with pytest.raises(m.EquilibriumError) as info:
        m.equilibrium(mdl, np.array([50.0, 1.0]), y=np.array([1e-6, 0.0]))
    assert info.value.residual > 0


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------


def test_parameter_files_round_trip(tmp_path):
    sg = m.load_sg()
    m.save_sg(tmp_path / "sg.ini", sg)
    again = m.load_sg(tmp_path / "sg.ini")
    assert again.model.sg == sg.model.sg and again.setpoints == sg.setpoints
    g = m.load_gfm(strategy="VSM")
    m.save_gfm(tmp_path / "gfm.ini", g)
    again = m.load_gfm(tmp_path / "gfm.ini")
    assert again.model.p == g.model.p and again.setpoints == g.setpoints


def test_parameter_file_rejects_unknown_key(tmp_path):
    text = m.default_params_path("sg").read_text().replace("[SgParams]", "[SgParams]\nX_bogus = 1.0")
    (tmp_path / "bad.ini").write_text(text)
    with pytest.raises(ValueError, match="unknown keys"):
        m.load_sg(tmp_path / "bad.ini")

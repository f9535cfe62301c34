import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from bikecross import dynamics as dyn
from bikecross import impulse as ipl
from bikecross.dynamics import BikebotParams, BikebotState
from bikecross.eic import EICController
from bikecross.errors import ForceLimit, Infeasible, PreconditionError, ZeroRate
from bikecross.impulse import ImpulseConfig, TorqueStatus
from bikecross.leg import Side
from bikecross.reference import LineReference

P = BikebotParams()
CFG = ImpulseConfig()
DEG = math.radians


def test_impulse_torque_examples():
    assert ipl.impulse_torque(0.0, 0.0) == (0.0, TorqueStatus.OK)
    tau, status = ipl.impulse_torque(-0.3, 0.0)
    assert tau == pytest.approx(-0.3 * 3.19 / 0.05, rel=1e-12)
    assert tau == pytest.approx(-19.14, abs=1e-9)
    assert status is TorqueStatus.OK
    # an uncapped -60 deg/s jump asks for about -66.8 N*m
    assert 3.19 * -1.0472 / 0.05 == pytest.approx(-66.8, abs=0.05)
    assert ipl.impulse_torque(-1.0472, 0.0) == (-30.0, TorqueStatus.CLAMPED)


def test_leg_command_force_and_side():
    narrow = ImpulseConfig(r_iy=0.12)
    # force needed for 19.14 N*m at 0.12 m lateral offset
    assert 19.14 / narrow.r_iy == pytest.approx(159.5)
    with pytest.raises(ForceLimit):
        ipl.leg_command(30.0, 0.0, 0.0, narrow)
    cmd = ipl.leg_command(19.14, 1.0, 0.0)
    assert cmd.F_z == pytest.approx(19.14 / CFG.r_iy)
    assert cmd.side is Side.LEFT
    assert cmd.t_tau_plus == pytest.approx(1.0 + CFG.kappa)
    with pytest.raises(PreconditionError):
        ipl.leg_command(0.0, 0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(tau=st.floats(-30, 30).filter(lambda x: abs(x) > 1e-3), phib=st.floats(-DEG(8), DEG(8)))
def test_side_rule_on_every_command(tau, phib):
    cmd = ipl.leg_command(tau, 0.0, phib)
    assert cmd.side is (Side.RIGHT if tau < 0 else Side.LEFT)
    assert abs(cmd.delta_tau_x) <= CFG.delta_tau_x_max
    assert cmd.F_z <= CFG.F_z_max
    # the foot force times the lateral lever gives back the roll torque
    assert math.copysign(cmd.F_z * abs(cmd.foot[1]), cmd.foot[1]) == pytest.approx(tau)


def test_roll_constants_and_bound():
    k1, k2, k3 = ipl.roll_constants(1.0)
    assert k1 == pytest.approx(math.sqrt(24 * 0.35 * 9.81 / 3.19), rel=1e-12)
    assert k2 == pytest.approx(24 * 0.35 / (3.19 * 0.87), rel=1e-12)
    assert (k1, k2, k3) == pytest.approx((5.0825, 3.0267, 0.59552), abs=5e-5)
    # |k3 tan(30 deg)| / (kappa J_t)
    assert ipl.min_impulse(0.0, 0.0, 1.0) == pytest.approx(0.34383 / 0.1595, abs=2e-4)
    assert ipl.min_impulse(0.0, 0.0, 1.0) == pytest.approx(2.156, abs=1e-3)


def test_bound_at_rest():
    assert ipl.roll_constants(0.0)[2] == 0.0
    assert ipl.min_impulse(0.1, 0.3, 0.0) == pytest.approx(0.4 / (0.05 * P.J_t))


def test_necessary_condition():
    assert ipl.check_necessary_condition(0.0, 0.5, -30.0, 1.0)
    assert not ipl.check_necessary_condition(DEG(20), DEG(100), 0.0, 1.2)
    with pytest.raises(ZeroRate):
        ipl.check_necessary_condition(0.0, 0.0, 5.0, 1.0)


def pendulum(t, y, k1, k2, phi):
    return [y[1], k1 * k1 * y[0] - k2 * math.tan(phi)]


@settings(max_examples=20, deadline=None)
@given(phib0=st.floats(-DEG(5), DEG(5)), dphib0=st.floats(-DEG(30), DEG(30)),
       phi=st.floats(-DEG(30), DEG(30)), v=st.floats(0.0, 1.5))
def test_linear_roll_closed_form(phib0, dphib0, phi, v):
    k1, k2, _ = ipl.roll_constants(v)
    t = np.linspace(0, 1, 11)
    sol = solve_ivp(pendulum, (0, 1), [phib0, dphib0], t_eval=t, args=(k1, k2, phi),
                    rtol=1e-13, atol=1e-13, method="DOP853")
    np.testing.assert_allclose(ipl.linear_roll(t, phib0, dphib0, phi, v), sol.y[0], atol=1e-6)


def test_ideal_jump():
    d_rate, d_angle = ipl.ideal_jump(19.14, 0.05)
    assert d_rate == pytest.approx(0.3)
    assert d_angle == pytest.approx(19.14 * 0.05**2 / (2 * 3.19))


def test_impulse_through_plant_matches_ideal_jump():
    X = BikebotState(v=1.2).to_array()
    for _ in range(50):
        X = dyn._rk4(X, 0.0, 0.0, 19.14, 1e-3, P, dyn.ActuatorConfig())
    d_rate, d_angle = ipl.ideal_jump(19.14, 0.05)
    assert X[dyn.IDPHIB] == pytest.approx(d_rate, rel=0.02)
    assert abs(X[dyn.IPHIB] - d_angle) < DEG(0.15)


def test_speed_box():
    assert ipl.speed_box(1.0, CFG) == pytest.approx((1.0 - 0.15, 1.15))
    assert ipl.speed_box(1.45, CFG)[1] == CFG.v_max


def test_balanced_state_needs_no_impulse():
    X = BikebotState(v=1.2).to_array()
    ref = LineReference(speed=1.2)
    d = ipl.optimize_reinit(X, 0.0, ref, EICController(), rate_box=(-0.3, 0.3))
    assert abs(d.dot_varphi_b) < 0.02
    assert d.cost <= 1.01 * d.cost_no_impulse


def test_optimizer_dominates_grid_and_no_impulse():
    X = BikebotState(v=1.1, varphi_b=DEG(-1.0), dot_varphi_b=DEG(-45)).to_array()
    d = ipl.optimize_reinit(X, 0.0, LineReference(speed=1.2), EICController())
    assert d.cost <= d.cost_no_impulse
    assert d.cost <= d.grid_min_cost
    r_lo, r_hi, v_lo, v_hi = d.box
    assert r_lo <= d.dot_varphi_b <= r_hi or d.dot_varphi_b == X[dyn.IDPHIB]
    assert v_lo <= d.v <= v_hi
    # the rate box pushes against the fall
    assert r_lo > X[dyn.IDPHIB]


def test_zero_width_box():
    X = BikebotState(v=1.2, dot_varphi_b=0.3).to_array()
    with pytest.raises(Infeasible):
        ipl.optimize_reinit(X, 0.0, LineReference(speed=1.2), EICController(),
                            rate_box=(0.3, 0.3), speed_limits=(1.2, 1.2))

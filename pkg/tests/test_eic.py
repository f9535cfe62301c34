import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bikecross import dynamics as dyn
from bikecross import eic
from bikecross.dynamics import BikebotParams, BikebotState
from bikecross.eic import ControllerGains, EICController
from bikecross.errors import HSingular, NoRoot, PreconditionError, SingularKpsi
from bikecross.reference import LineReference, RefSample

P = BikebotParams()
G = ControllerGains()
DEG = math.radians


def closed_loop(X0, ref, duration, ctrl=None):
    """Controller at 50 Hz over a 1 kHz plant; returns tick times, states and outputs."""
    ctrl = ctrl or EICController()
    X = np.array(X0, dtype=float)
    ts, xs, outs = [], [], []
    for k in range(int(round(duration / 0.02))):
        t = k * 0.02
        out = ctrl(X, ref(t))
        ts.append(t)
        xs.append(X.copy())
        outs.append(out)
        for _ in range(20):
            X = dyn._rk4(X, float(out.phi_cmd), float(out.u_v), 0.0, 1e-3, ctrl.p, ctrl.act)
    return np.array(ts), np.array(xs), outs


def straight(v=1.0):
    z = np.zeros(2)
    return RefSample(np.zeros(2), np.array([v, 0.0]), z, z)


def test_gains_polynomial_is_hurwitz():
    roots = np.roots([1.0, G.a2, G.a1, G.a0])
    assert np.all(roots.real < 0)
    assert np.all(np.roots([1.0, G.b1, G.b0]).real < 0)


def test_tracking_zero_error():
    u_v, u_psi = eic.tracking_control(BikebotState(v=1.0), straight())
    assert u_v == 0.0
    assert u_psi == 0.0


def test_tracking_lateral_offset():
    # u_r = -a0 * e_r, and with psi = 0 and v = 1 the y component is the yaw demand
    u_v, u_psi = eic.tracking_control(BikebotState(y=0.1, v=1.0), straight())
    assert u_v == pytest.approx(0.0, abs=1e-15)
    assert u_psi == pytest.approx(-1.0, rel=1e-12)


def test_tracking_singular_speed():
    with pytest.raises(SingularKpsi):
        eic.tracking_control(BikebotState(v=0.01), straight())


def test_manifold_zero_demand():
    assert eic.balance_manifold(0.0, BikebotState(v=1.0)) == 0.0


@settings(max_examples=50, deadline=None)
@given(u=st.floats(-15, 15), v=st.floats(0.3, 1.5), phi=st.floats(-0.3, 0.3))
def test_manifold_root_zeroes_roll_torque(u, v, phi):
    s = BikebotState(v=v, phi=phi)
    root = eic.balance_manifold(u, s)
    # on the manifold the gravity, centrifugal and steering torques cancel at the current yaw rate
    dpsi = dyn.yaw_rate(v, phi, 0.0)
    residual = dyn._f1(root, dpsi, v, P) + dyn._h(root, P) * u
    assert abs(residual) < 1e-9
    assert abs(root) < math.pi / 4


def test_manifold_no_root():
    with pytest.raises(NoRoot):
        eic.balance_manifold(40.0, BikebotState(v=0.3))


def test_manifold_demand_bound():
    with pytest.raises(PreconditionError):
        eic.balance_manifold(60.0, BikebotState(v=1.0))


def test_balance_control_zero_error():
    assert eic.balance_control(BikebotState(v=1.0), (0.0, 0.0, 0.0)) == 0.0


def test_balance_control_singular():
    with pytest.raises(HSingular):
        eic.balance_control(BikebotState(v=1.0, varphi_b=DEG(89.9)), (0.0, 0.0, 0.0))


@settings(max_examples=100, deadline=None)
@given(phib=st.floats(-0.6, 0.6), dphib=st.floats(-2, 2), phi=st.floats(-0.5, 0.5),
       v=st.floats(0.2, 1.5), e=st.floats(-0.3, 0.3), de=st.floats(-1, 1), dde=st.floats(-3, 3))
def test_model_matched_cancellation(phib, dphib, phi, v, e, de, dde):
    s = BikebotState(varphi_b=phib, dot_varphi_b=dphib, phi=phi, v=v)
    manifold = (phib - e, dphib - de, dde)
    ubar = eic.balance_control(s, manifold)
    # the closed roll loop must be the linear error system e'' + b1 e' + b0 e = 0
    assert dyn.roll_accel(s, ubar) - dde == pytest.approx(-G.b1 * de - G.b0 * e, abs=1e-10)


def test_controller_zero_error_ride():
    out = EICController()(BikebotState(v=1.0).to_array(), straight())
    assert float(out.u_v) == 0.0
    assert float(out.phi_cmd) == 0.0
    cmd = eic.eic_step(BikebotState(v=1.0), LineReference(speed=1.0), EICController())
    assert (cmd.u_v, cmd.phi_cmd, cmd.held) == (0.0, 0.0, False)


@settings(max_examples=100, deadline=None)
@given(y=st.floats(-2, 2), psi=st.floats(-1, 1), phib=st.floats(-1.2, 1.2), dphib=st.floats(-5, 5),
       phi=st.floats(-0.5, 0.5), v=st.floats(0.0, 1.5), dv=st.floats(-3, 3))
def test_command_clamps(y, psi, phib, dphib, phi, v, dv):
    X = BikebotState(y=y, psi=psi, varphi_b=phib, dot_varphi_b=dphib, phi=phi, v=v, dot_v=dv).to_array()
    ctrl = EICController()
    out = ctrl(X, straight(1.2))
    assert abs(float(out.phi_cmd)) <= DEG(30) + 1e-12
    assert np.isfinite(float(out.u_v))
    if v >= ctrl.act.v_max:
        assert float(out.u_v) <= 0.0


def test_batched_controller_matches_scalar():
    rng = np.random.default_rng(3)
    X = np.zeros((5, dyn.NSTATE))
    X[:, dyn.IV] = rng.uniform(0.5, 1.5, 5)
    X[:, dyn.IPHIB] = rng.uniform(-0.1, 0.1, 5)
    X[:, dyn.IY] = rng.uniform(-0.2, 0.2, 5)
    batch = EICController()(X, straight())
    for i in range(5):
        one = EICController()(X[i], straight())
        assert float(one.phi_cmd) == pytest.approx(float(batch.phi_cmd[i]), abs=1e-14)
        assert float(one.u_v) == pytest.approx(float(batch.u_v[i]), abs=1e-14)


def test_roll_regulation_from_three_degrees():
    X0 = BikebotState(v=1.0, varphi_b=DEG(3)).to_array()
    ref = LineReference(speed=1.0)
    t, X, outs = closed_loop(X0, ref, 2.0)
    assert abs(X[-1, dyn.IPHIB]) < DEG(0.5)
    assert math.hypot(X[-1, dyn.IX] - t[-1], X[-1, dyn.IY]) < 0.05
    # the manifold moves smoothly from tick to tick
    pe = np.array([float(o.phib_e) for o in outs])
    assert np.max(np.abs(np.diff(pe))) < DEG(5)


def test_exponential_tracking():
    X0 = BikebotState(y=0.2, v=1.0).to_array()
    t, X, _ = closed_loop(X0, LineReference(speed=1.0), 12.0)
    err = np.hypot(X[:, dyn.IX] - t, X[:, dyn.IY])
    # envelope of the error over one-second windows
    peaks = np.array([err[(t >= a) & (t < a + 1)].max() for a in range(12)])
    rate = -np.polyfit(np.arange(12) + 0.5, np.log(peaks), 1)[0]
    slowest = -np.max(np.roots([1.0, G.a2, G.a1, G.a0]).real)
    assert rate >= 0.8 * slowest

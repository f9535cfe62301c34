import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bikecross import impact as im
from bikecross.dynamics import BikebotParams, BikebotState
from bikecross.errors import BadHeight, PreconditionError
from bikecross.impact import Obstacle, RestitutionModel

P = BikebotParams()
DEG = math.radians


def random_event(rng):
    q = np.array([*rng.uniform(-5, 5, 2), 0.0, rng.uniform(-math.pi, math.pi), rng.uniform(-0.4, 0.4)])
    qd = np.array([*rng.uniform(-1.5, 1.5, 2), rng.uniform(-0.3, 0.3), rng.uniform(-1, 1), rng.uniform(-2, 2)])
    h = rng.uniform(0.005, P.R_w - 0.005)
    phi = rng.uniform(-DEG(30), DEG(30))
    e = tuple(rng.uniform(0, 1, 3))
    return q, qd, h, phi, RestitutionModel(e)


def schur_solve(J, D, qd, eps):
    """Impulse from the contact-space equations, then the velocity jump."""
    Dinv = np.linalg.inv(D)
    f = np.linalg.solve(J @ Dinv @ J.T, eps - J @ qd)
    return qd + Dinv @ J.T @ f, f


def test_contact_offset_examples():
    assert im.contact_offset(0.0) == 0.0
    assert im.contact_offset(P.R_w) == pytest.approx(P.R_w, rel=1e-15)
    assert im.contact_offset(0.078) == pytest.approx(math.sqrt(2 * 0.225 * 0.078 - 0.078**2), rel=1e-15)
    assert im.contact_offset(0.078) == pytest.approx(0.17034, abs=5e-6)


def test_contact_offset_bad_height():
    with pytest.raises(BadHeight):
        im.contact_offset(0.5)
    with pytest.raises(BadHeight):
        im.contact_offset(-0.01)


def test_obstacle_height_range():
    with pytest.raises(PreconditionError):
        Obstacle(1.0, 0.0)
    with pytest.raises(PreconditionError):
        Obstacle(1.0, P.R_w)


def test_restitution_range():
    with pytest.raises(PreconditionError):
        RestitutionModel((0.2, 1.2, 0.1))


def test_zero_velocity_is_fixed_point():
    r = im.post_impact(np.zeros(5), np.zeros(5), 0.05)
    np.testing.assert_array_equal(r.qdot_plus, np.zeros(5))
    np.testing.assert_array_equal(r.f_impulse, np.zeros(3))


def test_pass_through_contact():
    qd = np.array([1.0, 0.1, 0.0, 0.2, -0.3])
    r = im.post_impact([0, 0, 0, 0.1, 0.05], qd, 0.05, RestitutionModel((1.0, 1.0, 1.0)), phi=0.1)
    np.testing.assert_allclose(r.qdot_plus, qd, atol=1e-12)
    np.testing.assert_allclose(r.f_impulse, np.zeros(3), atol=1e-10)


def test_randomized_events():
    rng = np.random.default_rng(2024)
    D = im.inertia_matrix()
    for _ in range(1000):
        q, qd, h, phi, rest = random_event(rng)
        r = im.post_impact(q, qd, h, rest, phi=phi)
        J = im.impact_jacobian(q, h, phi)
        A = np.block([[D, -J.T], [J, np.zeros((3, 3))]])
        rhs = np.concatenate([D @ qd, r.eps])
        assert np.max(np.abs(A @ np.concatenate([r.qdot_plus, r.f_impulse]) - rhs)) < 1e-9
        # momentum balance and contact velocity checked on their own
        assert np.max(np.abs(D @ (r.qdot_plus - qd) - J.T @ r.f_impulse)) < 1e-9
        assert np.max(np.abs(J @ r.qdot_plus - r.eps)) < 1e-9
        # restitution acts per axis in the contact frame
        g = im.contact_geometry(h, P, q[3], phi, q[4])
        R = im.restitution_frame(J, D, g.phi_c)
        np.testing.assert_allclose(R @ J @ r.qdot_plus, np.asarray(rest.e) * (R @ J @ qd), atol=1e-9)
        assert im.kinetic_energy(r.qdot_plus) <= im.kinetic_energy(qd) + 1e-12
        # a different elimination gives the same answer
        qp, f = schur_solve(J, D, qd, r.eps)
        np.testing.assert_allclose(r.qdot_plus, qp, atol=1e-9)
        np.testing.assert_allclose(r.f_impulse, f, atol=1e-8)


def test_impact_jacobian_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        q, _, h, phi, _ = random_event(rng)
        Ja = im.impact_jacobian(q, h, phi)
        Jn = np.empty((3, 5))
        for k in range(5):
            d = np.zeros(5)
            d[k] = 1e-6
            Jn[:, k] = (im.contact_point(q + d, h, phi) - im.contact_point(q - d, h, phi)) / 2e-6
        worst = max(worst, np.linalg.norm(Ja - Jn) / np.linalg.norm(Ja))
    assert worst < 1e-6


@settings(max_examples=50, deadline=None)
@given(e=st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), v=st.floats(0.3, 1.5),
       dphib=st.floats(-1, 1), h=st.floats(0.01, 0.2))
def test_energy_never_increases(e, v, dphib, h):
    qd = np.array([v, 0.0, 0.0, 0.0, dphib])
    r = im.post_impact(np.zeros(5), qd, h, RestitutionModel(e))
    assert im.kinetic_energy(r.qdot_plus) <= im.kinetic_energy(qd) * (1 + 1e-12) + 1e-12


def test_head_on_hit_slows_the_robot():
    s = BikebotState(v=1.2)
    r = im.post_impact(im.coordinates(s), im.generalized_velocity(s), 0.078)
    v, dpsi, dphib = im.project_to_planar(r.qdot_plus, 0.0)
    assert 0 < v < 1.2
    assert dpsi == pytest.approx(0.0, abs=1e-12)
    assert dphib == pytest.approx(0.0, abs=1e-12)


def test_project_to_planar():
    assert im.project_to_planar([0.9, 0.0, 0.3, 0.0, -0.2], 0.0) == (0.9, 0.0, -0.2)
    v, _, _ = im.project_to_planar([0.0, 0.9, 0.3, 0.0, 0.0], math.pi / 2)
    assert v == pytest.approx(0.9)

import math

import numpy as np
import pytest

from bikecross import supervisor as sv
from bikecross.dynamics import BikebotState
from bikecross.eic import EICController
from bikecross.errors import IllegalTransition, PreconditionError
from bikecross.reference import LineReference
from bikecross.supervisor import FsmState, ImpactDetector, Mode, RoaSpec, SupervisorConfig

DEG = math.radians


@pytest.fixture(scope="module")
def roa_v1():
    return sv.estimate_roa(RoaSpec(speed=1.0))


def test_detect_impact_threshold():
    assert not sv.detect_impact(0.0)
    assert sv.detect_impact(5.1)
    assert sv.detect_impact(-5.1)
    assert not sv.detect_impact(4.9)
    geo = SupervisorConfig(detection="geometric")
    assert sv.detect_impact(0.0, True, geo) and not sv.detect_impact(50.0, False, geo)


def test_debounce():
    det = ImpactDetector()
    assert det.update(1.00, 6.0)
    assert not det.update(1.02, 6.0)
    assert not det.update(1.05, 0.0)
    assert det.update(1.20, 6.0)


def test_legal_cycle():
    fsm = FsmState()
    for k, m in enumerate([Mode.IMPACT_DETECTED, Mode.IMPULSE_ACTIVE, Mode.RECOVERY, Mode.TRACKING,
                           Mode.IMPACT_DETECTED, Mode.TRACKING]):
        fsm.transition(m, 0.1 * k)
    assert fsm.mode is Mode.TRACKING
    assert len(fsm.history) == 6
    fsm.transition(Mode.FAILED, 1.0)
    assert not fsm.allowed(Mode.TRACKING)


@pytest.mark.parametrize("start,target", [
    (Mode.TRACKING, Mode.IMPULSE_ACTIVE),
    (Mode.TRACKING, Mode.RECOVERY),
    (Mode.IMPACT_DETECTED, Mode.RECOVERY),
    (Mode.IMPULSE_ACTIVE, Mode.TRACKING),
    (Mode.RECOVERY, Mode.IMPULSE_ACTIVE),
])
def test_illegal_transition_leaves_state_unchanged(start, target):
    fsm = FsmState(mode=start)
    with pytest.raises(IllegalTransition):
        fsm.transition(target, 0.0)
    assert fsm.mode is start
    assert fsm.history == []


def test_transitions_are_time_ordered():
    fsm = FsmState()
    fsm.transition(Mode.IMPACT_DETECTED, 1.0)
    with pytest.raises(PreconditionError):
        fsm.transition(Mode.TRACKING, 0.5)


def test_predict_roll_balanced():
    X = BikebotState(v=1.2).to_array()
    assert sv.predict_roll(X, 0.0, LineReference(speed=1.2), EICController()) < DEG(0.1)


def test_predict_roll_post_impact_swing():
    X = BikebotState(v=0.4, dot_varphi_b=DEG(40)).to_array()
    assert sv.predict_roll(X, 0.0, LineReference(speed=0.4), EICController()) > DEG(5)


def test_predict_roll_zero_horizon_and_no_side_effects():
    X = BikebotState(v=1.0, varphi_b=DEG(2), dot_varphi_b=DEG(20)).to_array()
    ctl = EICController()
    ref = LineReference(speed=1.0)
    ctl(X, ref(0.0))
    before = ctl.memory()
    cfg0 = SupervisorConfig(delta_t=0.0)
    assert sv.predict_roll(X, 0.0, ref, ctl, cfg0) == DEG(2)
    a = sv.predict_roll(X, 0.0, ref, ctl)
    b = sv.predict_roll(X, 0.0, ref, ctl)
    assert a == b
    after = ctl.memory()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_roa_origin_and_corner(roa_v1):
    assert roa_v1.contains(0.0, 0.0)
    assert sv.in_roa(roa_v1, 0.0, 0.0)
    assert not roa_v1.contains(DEG(20), DEG(100))
    assert not roa_v1.contains(DEG(40), 0.0)


def test_roa_is_odd_symmetric(roa_v1):
    m = roa_v1.member
    assert np.array_equal(m, m[::-1, ::-1])


def test_roa_boundary_is_conservative(roa_v1):
    m = roa_v1.member
    for i in range(1, m.shape[0] - 1):
        for j in range(1, m.shape[1] - 1):
            inside = roa_v1.contains(roa_v1.varphi_b[i], roa_v1.rate[j])
            if m[i, j] and not m[i - 1:i + 2, j - 1:j + 2].all():
                assert not inside
            if inside:
                assert m[i, j]


def test_roa_members_recover_and_outsiders_do_not(roa_v1):
    A, B = np.meshgrid(roa_v1.varphi_b, roa_v1.rate, indexing="ij")
    pick_in = np.argwhere(roa_v1.member)[::17]
    pick_out = np.argwhere(~roa_v1.member)[::97]
    X = np.zeros((len(pick_in) + len(pick_out), 8))
    X[:, 6] = 1.0
    for row, (i, j) in enumerate(np.vstack([pick_in, pick_out])):
        X[row, 3], X[row, 4] = A[i, j], B[i, j]
    out = sv.simulate_loop(X, 0.0, LineReference(speed=1.0), EICController(), 5.0, 0.005,
                           EICController().p, EICController().act)
    settled = out.alive & (np.abs(out.X[:, 3]) < DEG(1))
    assert settled[:len(pick_in)].all()
    assert not settled[len(pick_in):].any()


def test_roa_csv(roa_v1, tmp_path):
    path = tmp_path / "roa.csv"
    roa_v1.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "varphi_b_deg,dot_varphi_b_deg_s,member"
    assert len(lines) == 1 + 41 * 41


def test_roa_spec_validation():
    with pytest.raises(PreconditionError):
        RoaSpec(n_varphi_b=2)

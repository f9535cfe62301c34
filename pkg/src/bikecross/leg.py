"""Kinematics and statics of the two 3-DOF assistive legs.

Foot positions are expressed in the body frame B (fixed to the bikebot) and
in the heading frame H, which shares B's origin but does not roll.  The body
to heading rotation is a rotation about x by ``-varphi_b``.  The right leg is
the exact mirror of the left leg through the x-z plane, with the hip
abduction angle negated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import JointLimit, PreconditionError, SingularPose, TorqueLimit, Unreachable

IK_DAMPING = 1e-3
IK_MAX_ITER = 200
IK_TOL = 1e-6
SINGULAR_DET = 1e-6


class Side(enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"

    @property
    def mirror(self) -> float:
        return 1.0 if self is Side.LEFT else -1.0


@dataclass(frozen=True)
class LegGeometry:
    """Link lengths, mounting offsets and actuator limits of one leg."""

    l0: float = 0.075
    l1: float = 0.212
    l2: float = 0.207
    l_x: float = 0.1
    l_y: float = 0.13
    l_b: float = -0.14
    h_b: float = 0.26
    joint_limit: float = math.radians(150.0)
    tau_max: float = 25.0

    def __post_init__(self):
        for name in ("l0", "l1", "l2", "l_x", "l_y", "h_b", "joint_limit", "tau_max"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")

    def base(self, side: Side) -> np.ndarray:
        """Foot position offset that does not depend on the joint angles (frame B)."""
        return np.array([self.l_x - self.l_b, side.mirror * self.l_y, -self.h_b])

    def reach(self) -> tuple[float, float]:
        """Inner and outer radius of the reachable shell around :meth:`base`."""
        return (math.hypot(self.l0, self.l1 - self.l2), math.hypot(self.l0, self.l1 + self.l2))


@dataclass(frozen=True)
class JointState:
    side: Side
    theta: np.ndarray
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(3))
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float).reshape(3))


def heading_rotation(varphi_b: float) -> np.ndarray:
    """Rotation taking body-frame vectors into the heading frame."""
    c, s = math.cos(varphi_b), math.sin(varphi_b)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _check_limits(theta, geom: LegGeometry):
    if np.any(np.abs(theta) > geom.joint_limit + 1e-12):
        raise JointLimit(f"joint angles {np.degrees(theta).round(2)} deg exceed limits")


def _foot_body(theta, side: Side, geom: LegGeometry) -> np.ndarray:
    t0 = side.mirror * theta[0]
    t1, t2 = theta[1], theta[2]
    s0, c0 = math.sin(t0), math.cos(t0)
    s1, c1 = math.sin(t1), math.cos(t1)
    s12, c12 = math.sin(t1 + t2), math.cos(t1 + t2)
    reach = geom.l1 * c1 + geom.l2 * c12
    x = geom.l_x - geom.l_b + geom.l2 * s12 + geom.l1 * s1
    y = geom.l_y + geom.l0 * c0 - s0 * reach
    z = -(geom.h_b + geom.l0 * s0 + c0 * reach)
    return np.array([x, side.mirror * y, z])


def foot_position_body(j: JointState, geom: LegGeometry | None = None) -> np.ndarray:
    geom = geom or LegGeometry()
    _check_limits(j.theta, geom)
    return _foot_body(j.theta, j.side, geom)


def forward_kinematics(j: JointState, varphi_b: float, geom: LegGeometry | None = None) -> np.ndarray:
    """Foot position in the heading frame."""
    return heading_rotation(varphi_b) @ foot_position_body(j, geom)


def _jacobian(theta, side: Side, geom: LegGeometry) -> np.ndarray:
    m = side.mirror
    t0 = m * theta[0]
    t1, t2 = theta[1], theta[2]
    s0, c0 = math.sin(t0), math.cos(t0)
    s1, c1 = math.sin(t1), math.cos(t1)
    s12, c12 = math.sin(t1 + t2), math.cos(t1 + t2)
    reach = geom.l1 * c1 + geom.l2 * c12
    # derivative of reach w.r.t. theta1 and theta2
    dr1 = -geom.l1 * s1 - geom.l2 * s12
    dr2 = -geom.l2 * s12
    J = np.empty((3, 3))
    J[0] = [0.0, geom.l1 * c1 + geom.l2 * c12, geom.l2 * c12]
    J[1] = [m * (-geom.l0 * s0 - c0 * reach), -s0 * dr1, -s0 * dr2]
    J[2] = [-m * (geom.l0 * c0 - s0 * reach), -c0 * dr1, -c0 * dr2]
    J[1] *= m
    return J


def jacobian(j: JointState, geom: LegGeometry | None = None) -> np.ndarray:
    """Analytic derivative of the body-frame foot position w.r.t. the joint angles."""
    geom = geom or LegGeometry()
    return _jacobian(j.theta, j.side, geom)


def _seed(side: Side) -> np.ndarray:
    # crouched pose with the shank folded back under the hip
    return np.array([side.mirror * -0.3, -1.75, -1.2])


def _closed_form(target_b, side: Side, geom: LegGeometry) -> list[np.ndarray]:
    """Every analytic branch: abduction rotates (l0, reach) in y-z, then a planar two-link arm."""
    m = side.mirror
    dx = target_b[0] - (geom.l_x - geom.l_b)
    dy = m * target_b[1] - geom.l_y
    dz = -target_b[2] - geom.h_b
    r2 = dy * dy + dz * dz - geom.l0**2
    if r2 < -1e-12:
        return []
    r2 = max(r2, 0.0)
    out = []
    for reach in (math.sqrt(r2), -math.sqrt(r2)):
        t0 = math.atan2(dz, dy) - math.atan2(reach, geom.l0)
        c2 = (dx * dx + reach * reach - geom.l1**2 - geom.l2**2) / (2 * geom.l1 * geom.l2)
        if abs(c2) > 1 + 1e-9:
            continue
        c2 = min(max(c2, -1.0), 1.0)
        for t2 in (math.acos(c2), -math.acos(c2)):
            t1 = math.atan2(dx, reach) - math.atan2(geom.l2 * math.sin(t2), geom.l1 + geom.l2 * math.cos(t2))
            theta = np.array([m * t0, t1, t2])
            out.append((theta + math.pi) % (2 * math.pi) - math.pi)
    # inside the limits first, then the mildest pose
    out.sort(key=lambda th: (bool(np.any(np.abs(th) > geom.joint_limit)), float(np.abs(th).sum())))
    return out


def inverse_kinematics(r_target, varphi_b: float, side: Side,
                       geom: LegGeometry | None = None) -> JointState:
    """Damped least-squares solve for joint angles placing the foot at ``r_target`` (frame H)."""
    geom = geom or LegGeometry()
    target_b = heading_rotation(varphi_b).T @ np.asarray(r_target, dtype=float).reshape(3)
    lo, hi = geom.reach()
    d = float(np.linalg.norm(target_b - geom.base(side)))
    if not lo - 1e-12 <= d <= hi + 1e-12:
        raise Unreachable(f"target at {d:.4f} m from the hip, reachable shell [{lo:.4f}, {hi:.4f}]")
    lim = geom.joint_limit
    seeds = [*_closed_form(target_b, side, geom), _seed(side)]
    best = None
    for seed in seeds:
        theta = seed.copy()
        for _ in range(IK_MAX_ITER):
            err = target_b - _foot_body(theta, side, geom)
            if np.linalg.norm(err) < IK_TOL * 1e-3:
                break
            J = _jacobian(theta, side, geom)
            step = J.T @ np.linalg.solve(J @ J.T + IK_DAMPING**2 * np.eye(3), err)
            theta = np.clip(theta + step, -lim, lim)
        res = float(np.linalg.norm(target_b - _foot_body(theta, side, geom)))
        if best is None or res < best[0]:
            best = (res, theta)
        if res < IK_TOL:
            return JointState(side, theta)
    raise JointLimit(f"no joint solution within limits (residual {best[0]:.2e} m)")


def _contact_map(j: JointState, varphi_b: float, geom: LegGeometry) -> np.ndarray:
    # tau = J^T R^T F with R taking body vectors to the heading frame
    return _jacobian(j.theta, j.side, geom).T @ heading_rotation(varphi_b).T


def force_from_torques(j: JointState, varphi_b: float, geom: LegGeometry | None = None) -> np.ndarray:
    """Foot contact force in H balanced by the joint torques in ``j``."""
    geom = geom or LegGeometry()
    A = _contact_map(j, varphi_b, geom)
    if abs(np.linalg.det(A)) <= SINGULAR_DET:
        raise SingularPose(f"force map singular, det={np.linalg.det(A):.2e}")
    return np.linalg.solve(A, j.tau)


def torques_from_force(F, j: JointState, varphi_b: float,
                       geom: LegGeometry | None = None) -> np.ndarray:
    """Joint torques that hold the foot force ``F`` (frame H)."""
    geom = geom or LegGeometry()
    tau = _contact_map(j, varphi_b, geom) @ np.asarray(F, dtype=float).reshape(3)
    if np.any(np.abs(tau) > geom.tau_max):
        raise TorqueLimit(f"joint torques {tau.round(2)} N*m exceed {geom.tau_max}")
    return tau


def applied_torque(r_i, F) -> np.ndarray:
    """Moment of the foot force about the heading-frame origin."""
    return np.cross(np.asarray(r_i, dtype=float), np.asarray(F, dtype=float))

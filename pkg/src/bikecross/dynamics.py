"""Continuous-time bikebot model.

Planar motion of the rear contact point follows the nonholonomic kinematics
``x' = v cos(psi)``, ``y' = v sin(psi)``; the yaw rate is slaved to speed,
steering and roll.  The roll axis is an inverted pendulum driven by the yaw
acceleration (steering) and by an optional external roll torque, which is
the port used to inject leg impulses.

All ``_``-prefixed kernels broadcast over leading array dimensions so the
same code drives single simulations and batched rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BalanceLost, LowSpeed, PreconditionError, RollSingularity

# packed state layout used by the integrator
IX, IY, IPSI, IPHIB, IDPHIB, IPHI, IV, IDV = range(8)
NSTATE = 8

MIN_SPEED = 0.05
ROLL_COS_MIN = 1e-3
MAX_DT = 0.02


@dataclass(frozen=True)
class BikebotParams:
    """Physical constants of the bikebot (SI units, angles in rad)."""

    m_b: float = 24.0
    J_b: float = 0.25
    J_z: float = 0.5
    l: float = 0.87
    R_w: float = 0.225
    l_G: float = -0.04
    h_G: float = 0.35
    epsilon: float = math.radians(17.0)
    g: float = 9.81

    def __post_init__(self):
        for name in ("m_b", "J_b", "J_z", "l", "R_w", "h_G", "g"):
            if not getattr(self, name) > 0:
                raise PreconditionError(f"{name} must be positive")
        if not 0.0 < self.epsilon < math.pi / 2:
            raise PreconditionError("caster angle must lie in (0, pi/2)")

    @property
    def J_t(self) -> float:
        """Roll inertia about the ground contact line."""
        return self.J_b + self.m_b * self.h_G**2

    @property
    def yaw_roll_coupling(self) -> float:
        """``m_b h_G (l_G + l/2)``; multiplies ``cos(roll)`` in ``h``."""
        return self.m_b * self.h_G * (self.l_G + self.l / 2.0)


@dataclass(frozen=True)
class ActuatorConfig:
    """Steering servo and drive limits used by the simulator."""

    steer_tau: float = 0.05
    steer_rate_max: float = math.radians(200.0)
    phi_max: float = math.radians(30.0)
    v_max: float = 1.5
    accel_max: float = 3.0


@dataclass(frozen=True)
class Command:
    """Zero-order-hold actuator command: drive jerk and steering set-point."""

    u_v: float = 0.0
    phi_cmd: float = 0.0


@dataclass(frozen=True)
class RollTorquePort:
    """Constant external roll torque active on ``[t_start, active_until)``."""

    delta_tau_x: float = 0.0
    t_start: float = 0.0
    active_until: float = 0.0

    def value(self, t: float) -> float:
        if self.t_start <= t < self.active_until:
            return self.delta_tau_x
        return 0.0


NO_TORQUE = RollTorquePort()


@dataclass(frozen=True)
class BikebotState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    varphi_b: float = 0.0
    phi: float = 0.0
    v: float = 0.0
    dot_v: float = 0.0
    dot_psi: float = 0.0
    dot_varphi_b: float = 0.0
    dot_phi: float = 0.0
    t: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.psi, self.varphi_b, self.dot_varphi_b,
             self.phi, self.v, self.dot_v],
            dtype=float,
        )

    @classmethod
    def from_array(cls, X, t=0.0, p: BikebotParams | None = None,
                   dot_phi: float = 0.0) -> "BikebotState":
        X = np.asarray(X, dtype=float).reshape(NSTATE)
        p = p or BikebotParams()
        dpsi = float(_yaw_rate(X[IV], X[IPHI], X[IPHIB], p))
        return cls(
            x=float(X[IX]), y=float(X[IY]), psi=float(X[IPSI]),
            varphi_b=float(X[IPHIB]), phi=float(X[IPHI]), v=float(X[IV]),
            dot_v=float(X[IDV]), dot_psi=dpsi,
            dot_varphi_b=float(X[IDPHIB]), dot_phi=float(dot_phi), t=float(t),
        )

    def with_(self, **kw) -> "BikebotState":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# broadcasting kernels


def _yaw_rate(v, phi, phib, p: BikebotParams):
    return v * math.cos(p.epsilon) * np.tan(phi) / (p.l * np.cos(phib))


def _f1(phib, dpsi, v, p: BikebotParams):
    """Gravity plus centrifugal roll torque."""
    m, h = p.m_b, p.h_G
    s, c = np.sin(phib), np.cos(phib)
    return m * h * dpsi * c * v + m * h * h * dpsi**2 * s * c + m * p.g * h * s


def _h(phib, p: BikebotParams):
    return p.yaw_roll_coupling * np.cos(phib)


def _yaw_accel(v, dv, phi, dphi, phib, dphib, p: BikebotParams):
    """Yaw acceleration implied by differentiating the yaw-rate relation."""
    k = math.cos(p.epsilon) / (p.l * np.cos(phib))
    tphi = np.tan(phi)
    return dv * tphi * k + v * k * (dphi / np.cos(phi) ** 2 + tphi * np.tan(phib) * dphib)


def _steer_rate(phi, phi_cmd, act: ActuatorConfig):
    return np.clip((phi_cmd - phi) / act.steer_tau, -act.steer_rate_max, act.steer_rate_max)


def _drive(v, dv, u_v, act: ActuatorConfig):
    """Effective longitudinal acceleration and jerk after drive saturation."""
    dv_eff = np.clip(dv, -act.accel_max, act.accel_max)
    dv_eff = np.where((v >= act.v_max) & (dv_eff > 0.0), 0.0, dv_eff)
    dv_eff = np.where((v <= 0.0) & (dv_eff < 0.0), 0.0, dv_eff)
    jerk = np.where(((dv >= act.accel_max) & (u_v > 0.0)) | ((dv <= -act.accel_max) & (u_v < 0.0)),
                    0.0, u_v)
    # bleed stored acceleration while pinned at a speed limit
    pinned = ((v >= act.v_max) & (dv > 0.0)) | ((v <= 0.0) & (dv < 0.0))
    jerk = np.where(pinned, -dv / 0.02, jerk)
    return dv_eff, jerk


def _rhs(X, phi_cmd, u_v, tau, p: BikebotParams, act: ActuatorConfig):
    psi, phib, dphib = X[..., IPSI], X[..., IPHIB], X[..., IDPHIB]
    phi, v, dv = X[..., IPHI], X[..., IV], X[..., IDV]
    dpsi = _yaw_rate(v, phi, phib, p)
    dphi = _steer_rate(phi, phi_cmd, act)
    dv_eff, jerk = _drive(v, dv, u_v, act)
    upsi = _yaw_accel(v, dv_eff, phi, dphi, phib, dphib, p)
    ddphib = (_f1(phib, dpsi, v, p) + _h(phib, p) * upsi + tau) / p.J_t
    return np.stack(
        [v * np.cos(psi), v * np.sin(psi), dpsi, dphib, ddphib, dphi, dv_eff, jerk],
        axis=-1,
    )


def _rk4(X, phi_cmd, u_v, tau, dt, p: BikebotParams, act: ActuatorConfig):
    k1 = _rhs(X, phi_cmd, u_v, tau, p, act)
    k2 = _rhs(X + 0.5 * dt * k1, phi_cmd, u_v, tau, p, act)
    k3 = _rhs(X + 0.5 * dt * k2, phi_cmd, u_v, tau, p, act)
    k4 = _rhs(X + dt * k3, phi_cmd, u_v, tau, p, act)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rhs(X, cmd: Command, tau: float = 0.0, p: BikebotParams | None = None,
        act: ActuatorConfig | None = None) -> np.ndarray:
    """Time derivative of a packed state under a held command."""
    p, act = p or BikebotParams(), act or ActuatorConfig()
    return _rhs(np.asarray(X, dtype=float), cmd.phi_cmd, cmd.u_v, tau, p, act)


# ---------------------------------------------------------------------------
# public scalar operations


def yaw_rate(v: float, phi: float, varphi_b: float, p: BikebotParams | None = None) -> float:
    p = p or BikebotParams()
    if math.cos(varphi_b) < ROLL_COS_MIN:
        raise RollSingularity(f"cos(roll) below {ROLL_COS_MIN} at roll={varphi_b:.6f} rad")
    return float(_yaw_rate(v, phi, varphi_b, p))


def roll_accel(s: BikebotState, u_psi: float, ext: RollTorquePort = NO_TORQUE,
               p: BikebotParams | None = None) -> float:
    """Roll acceleration for a given yaw acceleration input."""
    p = p or BikebotParams()
    if not math.isfinite(u_psi):
        raise PreconditionError("u_psi must be finite")
    dpsi = yaw_rate(s.v, s.phi, s.varphi_b, p)
    tau = ext.value(s.t)
    return float((_f1(s.varphi_b, dpsi, s.v, p) + _h(s.varphi_b, p) * u_psi + tau) / p.J_t)


def steering_torque(s: BikebotState, p: BikebotParams | None = None) -> float:
    """Roll torque induced by steering (the part of ``h u_psi`` collected in tan(phi))."""
    p = p or BikebotParams()
    if s.v < MIN_SPEED:
        raise LowSpeed(f"speed {s.v} below {MIN_SPEED} m/s")
    lead = p.m_b * p.h_G * math.cos(p.epsilon) * s.v / p.l
    bracket = ((p.l_G + p.l / 2.0) * s.dot_varphi_b / p.l * math.tan(s.varphi_b)
               + p.l_G * s.dot_v / s.v - s.v)
    return lead * bracket * math.tan(s.phi)


def steering_from_yawrate(psi_dot_des: float, v: float, varphi_b: float,
                          p: BikebotParams | None = None,
                          phi_max: float = ActuatorConfig.phi_max) -> float:
    """Steering angle that produces a desired yaw rate, clamped to ``phi_max``."""
    p = p or BikebotParams()
    if v < MIN_SPEED:
        raise LowSpeed(f"speed {v} below {MIN_SPEED} m/s")
    phi = math.atan(psi_dot_des * p.l * math.cos(varphi_b) / (v * math.cos(p.epsilon)))
    return min(max(phi, -phi_max), phi_max)


def step(s: BikebotState, cmd: Command, ext: RollTorquePort = NO_TORQUE, dt: float = 1e-3,
         p: BikebotParams | None = None, act: ActuatorConfig | None = None) -> BikebotState:
    """Advance one RK4 step with the command and external torque held."""
    p, act = p or BikebotParams(), act or ActuatorConfig()
    if not 0.0 < dt <= MAX_DT:
        raise PreconditionError(f"dt must lie in (0, {MAX_DT}], got {dt}")
    if abs(s.varphi_b) >= math.pi / 2:
        raise BalanceLost(f"roll {math.degrees(s.varphi_b):.1f} deg")
    X = _rk4(s.to_array(), cmd.phi_cmd, cmd.u_v, ext.value(s.t), dt, p, act)
    if not np.all(np.isfinite(X)) or abs(X[IPHIB]) >= math.pi / 2:
        raise BalanceLost(f"roll left the admissible range at t={s.t + dt:.3f}")
    dphi = float(_steer_rate(X[IPHI], cmd.phi_cmd, act))
    return BikebotState.from_array(X, t=s.t + dt, p=p, dot_phi=dphi)


def roll_energy(varphi_b, dot_varphi_b, p: BikebotParams | None = None):
    """Pendulum energy of the roll axis, conserved when steering and speed vanish."""
    p = p or BikebotParams()
    return 0.5 * p.J_t * dot_varphi_b**2 + p.m_b * p.g * p.h_G * (np.cos(varphi_b) - 1.0)

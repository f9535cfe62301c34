"""Leg impulse design.

A short constant roll torque over ``kappa`` re-initializes the roll rate (and,
through the drive, the speed).  The target pair is chosen by minimizing a
closed-loop tracking/balance cost over a prediction horizon, rolled out with
the same EIC controller that runs on the robot.  The torque is then turned
into a vertical foot force at a lateral offset and into joint commands for
the leg on the appropriate side.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import dynamics as dyn
from . import leg as legmod
from .dynamics import ActuatorConfig, BikebotParams
from .eic import EICController
from .errors import ForceLimit, Infeasible, JointLimit, PreconditionError, Unreachable, ZeroRate
from .leg import LegGeometry, Side
from .reference import ReferenceTrajectory

FALL_ANGLE = math.radians(60.0)
STEER_PENALTY = 1e3
ROA_PENALTY = 1e4


@dataclass(frozen=True)
class ImpulseConfig:
    kappa: float = 0.05
    H_t: float = 1.0
    rollout_dt: float = 0.02
    plant_dt: float = 0.01
    delta_tau_x_max: float = 30.0
    F_z_max: float = 190.0
    v_max: float = 1.5
    phi_max: float = math.radians(30.0)
    r_iy: float = 0.22
    P: tuple = (1.0, 1.0, 1.0, 1.0, 10.0, 10.0)
    Q: tuple = (10.0, 10.0)
    grid_n: int = 21
    # drive acceleration available to realize the speed target within kappa
    accel_max: float = 3.0

    def __post_init__(self):
        for k in ("kappa", "H_t", "rollout_dt", "plant_dt", "delta_tau_x_max", "F_z_max", "v_max",
                  "phi_max", "r_iy", "accel_max"):
            if not getattr(self, k) > 0:
                raise PreconditionError(f"{k} must be positive")
        if len(self.P) != 6 or len(self.Q) != 2 or min(self.P) <= 0 or min(self.Q) <= 0:
            raise PreconditionError("P must be 6 and Q 2 positive diagonal weights")
        if self.grid_n < 3:
            raise PreconditionError("grid_n must be at least 3")


@dataclass(frozen=True)
class ReinitDecision:
    dot_varphi_b: float
    v: float
    cost: float
    cost_no_impulse: float
    grid_min_cost: float
    # candidate lands inside the region of attraction when one was supplied
    in_roa: bool | None
    box: tuple


class TorqueStatus(enum.Enum):
    OK = "ok"
    CLAMPED = "clamped"


@dataclass(frozen=True)
class ImpulseCommand:
    delta_tau_x: float
    t_tau: float
    t_tau_plus: float
    side: Side
    F_z: float
    foot: np.ndarray
    theta: np.ndarray
    tau_theta: np.ndarray
    v_target: float = float("nan")
    dphib_target: float = float("nan")


# ---------------------------------------------------------------------------
# closed-loop rollouts


def rollout(X0, t0: float, ref: ReferenceTrajectory, controller: EICController,
            cfg: ImpulseConfig, p: BikebotParams, act: ActuatorConfig,
            torque=None, accel=None, rates=None, speeds=None) -> tuple[np.ndarray, np.ndarray]:
    """Horizon cost of each start state in the batch ``X0`` under the EIC loop.

    ``torque`` and ``accel`` (one per start state) are applied over the first
    ``kappa`` seconds, the drive holding ``accel`` instead of following the
    controller, exactly as the simulator realizes an impulse.  While the
    window is open the controller acts on the planned ``rates``/``speeds``.
    Returns the costs and the states at the end of that window.
    """
    X = np.array(X0, dtype=float, copy=True)
    n = X.shape[0]
    ctl = controller.tile(n)
    P, Q = np.asarray(cfg.P), np.asarray(cfg.Q)
    dt = cfg.plant_dt
    per = max(int(round(cfg.rollout_dt / dt)), 1)
    steps = int(round(cfg.H_t / dt))
    window = int(round(cfg.kappa / dt))
    torque = np.zeros(n) if torque is None else np.asarray(torque, dtype=float)
    if accel is not None:
        X[:, dyn.IDV] = accel
    cost = np.zeros(n)
    dead = np.zeros(n, bool)
    X_end = X.copy()
    for k in range(steps):
        if k == window:
            X_end = X.copy()
            if accel is not None:
                X[:, dyn.IDV] = 0.0
        if k % per == 0:
            r = ref(t0 + k * dt)
            out = ctl(planned_view(X, rates, speeds) if k < window else X, r)
            psi, v = X[:, dyn.IPSI], X[:, dyn.IV]
            e = X[:, :2] - r.r
            c, s = np.cos(psi), np.sin(psi)
            de = np.stack([v * c, v * s], axis=1) - r.r1
            eb = X[:, dyn.IPHIB] - out.phib_e
            deb = X[:, dyn.IDPHIB] - out.dphib_e
            xe = np.column_stack([e, de, eb, deb])
            u = np.column_stack([out.u_v, out.u_psi_bar])
            stage = (xe**2 @ P) + (u**2 @ Q)
            over = np.maximum(np.abs(out.phi_demand) - cfg.phi_max, 0.0)
            stage = stage + STEER_PENALTY * over**2
            cost += np.where(dead, 0.0, stage * cfg.rollout_dt)
        in_window = k < window
        u_v = np.zeros(n) if (in_window and accel is not None) else out.u_v
        X = dyn._rk4(X, out.phi_cmd, u_v, torque if in_window else 0.0, dt, p, act)
        bad = ~np.all(np.isfinite(X), axis=1) | (np.abs(X[:, dyn.IPHIB]) > FALL_ANGLE)
        X[bad] = 0.0
        dead |= bad
    if window >= steps:
        X_end = X.copy()
    cost[dead] = np.inf
    return cost, X_end


def planned_view(X, rates=None, speeds=None):
    """State seen by the controller while an impulse is being applied.

    The impulse is meant as a velocity jump, so the controller already acts
    on the planned post-impulse roll rate and speed.
    """
    if rates is None and speeds is None:
        return X
    V = np.array(X, dtype=float, copy=True)
    if rates is not None:
        V[..., dyn.IDPHIB] = rates
    if speeds is not None:
        V[..., dyn.IV] = speeds
    return V


def speed_box(v: float, cfg: ImpulseConfig) -> tuple[float, float]:
    dv = cfg.accel_max * cfg.kappa
    return max(v - dv, 0.0), min(v + dv, cfg.v_max)


def torque_bound(varphi_b: float, side: Side, cfg: ImpulseConfig,
                 geom: LegGeometry | None = None) -> float:
    """Largest roll torque the leg can deliver within force and joint-torque limits."""
    geom = geom or LegGeometry()
    bound = min(cfg.delta_tau_x_max, cfg.F_z_max * cfg.r_iy)
    try:
        js = legmod.inverse_kinematics(foot_target(varphi_b, side, cfg, geom)[1], varphi_b, side, geom)
    except (Unreachable, JointLimit):
        return 0.0
    per_newton = np.abs(legmod._contact_map(js, varphi_b, geom) @ np.array([0.0, 0.0, 1.0]))
    if per_newton.max() > 0:
        bound = min(bound, geom.tau_max / per_newton.max() * cfg.r_iy)
    return bound


def optimize_reinit(X_pre, t: float, ref: ReferenceTrajectory, controller: EICController,
                    cfg: ImpulseConfig | None = None, p: BikebotParams | None = None,
                    act: ActuatorConfig | None = None, roa=None,
                    rate_box: tuple[float, float] | None = None,
                    speed_limits: tuple[float, float] | None = None) -> ReinitDecision:
    """Roll-rate and speed targets minimizing the closed-loop horizon cost.

    Each candidate is rolled out from ``X_pre`` (the state when the impulse
    starts) with the torque and drive acceleration that realize it over
    ``kappa``.  ``rate_box``/``speed_limits`` override the default boxes
    (roll-rate change between the analytic minimum impulse and the leg limit,
    speed change limited by the drive).
    When ``roa`` is given, candidates ending the window outside it are
    penalized.
    """
    cfg = cfg or ImpulseConfig()
    p = p or BikebotParams()
    act = act or ActuatorConfig()
    X_pre = np.asarray(X_pre, dtype=float).reshape(dyn.NSTATE)
    if not np.all(np.isfinite(X_pre)):
        raise PreconditionError("state must be finite")
    phib, dphib, v = X_pre[dyn.IPHIB], X_pre[dyn.IDPHIB], X_pre[dyn.IV]
    if rate_box is None:
        side = Side.RIGHT if dphib > 0 else Side.LEFT
        dmax = torque_bound(phib, side, cfg) * cfg.kappa / p.J_t
        # a fired impulse must reach the analytic lower bound
        dmin = min(min_impulse(phib, dphib, v, cfg, p) * cfg.kappa / p.J_t, dmax)
        rate_box = (dphib - dmax, dphib - dmin) if dphib > 0 else (dphib + dmin, dphib + dmax)
    if speed_limits is None:
        speed_limits = speed_box(v, cfg)
    (r_lo, r_hi), (v_lo, v_hi) = rate_box, speed_limits
    if not (r_hi - r_lo > 1e-9 or v_hi - v_lo > 1e-9) or r_hi < r_lo or v_hi < v_lo:
        raise Infeasible("degenerate decision box")

    def batch(rates, speeds, ends=False):
        Xc = np.repeat(X_pre[None, :], len(rates), axis=0)
        torque = p.J_t * (rates - dphib) / cfg.kappa
        accel = (speeds - v) / cfg.kappa
        c, X_end = rollout(Xc, t, ref, controller, cfg, p, act, torque, accel, rates, speeds)
        if roa is not None:
            inside = np.array([roa.contains(a, b) for a, b in X_end[:, [dyn.IPHIB, dyn.IDPHIB]]])
            c = c + np.where(inside, 0.0, ROA_PENALTY)
        return (c, X_end) if ends else c

    n = cfg.grid_n
    R = np.linspace(r_lo, r_hi, n)
    V = np.linspace(v_lo, v_hi, n)
    RR, VV = np.meshgrid(R, V, indexing="ij")
    grid = batch(RR.ravel(), VV.ravel())
    no_imp = float(batch(np.array([dphib]), np.array([min(max(v, v_lo), v_hi)]))[0])
    if not np.any(np.isfinite(grid)):
        raise Infeasible("every candidate re-initialization loses balance within the horizon")
    k = int(np.argmin(grid))
    best = (float(grid[k]), float(RR.ravel()[k]), float(VV.ravel()[k]))
    grid_min = best[0]

    # zoom on the best cell
    hr = (r_hi - r_lo) / (n - 1)
    hv = (v_hi - v_lo) / (n - 1)
    Rz = np.clip(np.linspace(best[1] - hr, best[1] + hr, 11), r_lo, r_hi)
    Vz = np.clip(np.linspace(best[2] - hv, best[2] + hv, 11), v_lo, v_hi)
    RZ, VZ = np.meshgrid(Rz, Vz, indexing="ij")
    zoom = batch(RZ.ravel(), VZ.ravel())
    kz = int(np.argmin(zoom))
    if zoom[kz] < best[0]:
        best = (float(zoom[kz]), float(RZ.ravel()[kz]), float(VZ.ravel()[kz]))

    # local SQP polish in scaled variables
    sr = max(r_hi - r_lo, 1e-9)
    sv = max(v_hi - v_lo, 1e-9)

    def f(z):
        c = batch(np.array([r_lo + z[0] * sr]), np.array([v_lo + z[1] * sv]))[0]
        return float(c) if np.isfinite(c) else 1e12

    z0 = np.array([(best[1] - r_lo) / sr, (best[2] - v_lo) / sv])
    res = minimize(f, z0, method="SLSQP", bounds=[(0.0, 1.0), (0.0, 1.0)],
                   options={"maxiter": 20, "ftol": 1e-9, "eps": 1e-3})
    zr = np.clip(res.x, 0.0, 1.0)
    # SLSQP stops a hair inside an active bound; put it on the bound
    zr = np.where(zr < 1e-6, 0.0, np.where(zr > 1.0 - 1e-6, 1.0, zr))
    cr = f(zr)
    if cr < best[0]:
        best = (cr, r_lo + zr[0] * sr, v_lo + zr[1] * sv)

    if no_imp <= best[0]:
        best = (no_imp, dphib, min(max(v, v_lo), v_hi))
    _, X_end = batch(np.array([best[1]]), np.array([best[2]]), ends=True)
    inside = None if roa is None else bool(roa.contains(X_end[0, dyn.IPHIB], X_end[0, dyn.IDPHIB]))
    return ReinitDecision(best[1], best[2], best[0], no_imp, grid_min, inside,
                          (r_lo, r_hi, v_lo, v_hi))


# ---------------------------------------------------------------------------
# torque, force and leg command


def impulse_torque(dphib_target: float, dphib_minus: float, cfg: ImpulseConfig | None = None,
                   p: BikebotParams | None = None) -> tuple[float, TorqueStatus]:
    """Constant roll torque producing the rate change over ``kappa``."""
    cfg = cfg or ImpulseConfig()
    p = p or BikebotParams()
    tau = p.J_t * (dphib_target - dphib_minus) / cfg.kappa
    if abs(tau) > cfg.delta_tau_x_max:
        return math.copysign(cfg.delta_tau_x_max, tau), TorqueStatus.CLAMPED
    return tau, TorqueStatus.OK


def side_for(delta_tau_x: float) -> Side:
    return Side.RIGHT if delta_tau_x < 0 else Side.LEFT


def foot_target(varphi_b: float, side: Side, cfg: ImpulseConfig,
                geom: LegGeometry | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ground contact point relative to the roll axis, and the same point as a leg target in H.

    The foot lands directly below the hip station so the vertical force has no
    pitch lever about it.
    """
    geom = geom or LegGeometry()
    r_i = np.array([0.0, side.mirror * cfg.r_iy, 0.0])
    return r_i, r_i + np.array([geom.l_x - geom.l_b, 0.0, 0.0])


def leg_command(delta_tau_x: float, t_tau: float, varphi_b: float,
                cfg: ImpulseConfig | None = None, geom: LegGeometry | None = None) -> ImpulseCommand:
    """Foot force, pose and joint torques producing ``delta_tau_x``."""
    cfg = cfg or ImpulseConfig()
    geom = geom or LegGeometry()
    if delta_tau_x == 0 or not math.isfinite(delta_tau_x):
        raise PreconditionError("impulse torque must be non-zero and finite")
    F_z = abs(delta_tau_x) / cfg.r_iy
    if F_z > cfg.F_z_max:
        raise ForceLimit(f"F_z = {F_z:.1f} N exceeds {cfg.F_z_max} N")
    side = side_for(delta_tau_x)
    r_i, target = foot_target(varphi_b, side, cfg, geom)
    js = legmod.inverse_kinematics(target, varphi_b, side, geom)
    F = np.array([0.0, 0.0, F_z])
    tau = legmod.torques_from_force(F, js, varphi_b, geom)
    return ImpulseCommand(delta_tau_x, t_tau, t_tau + cfg.kappa, side, F_z, r_i, js.theta, tau)


# ---------------------------------------------------------------------------
# analytic bounds


def roll_constants(v: float, p: BikebotParams | None = None) -> tuple[float, float, float]:
    """Linearized roll constants ``(k1, k2, k3)`` at speed ``v``."""
    p = p or BikebotParams()
    k1 = math.sqrt(p.m_b * p.h_G * p.g / p.J_t)
    k2 = p.m_b * p.h_G * v * v / (p.J_t * p.l)
    return k1, k2, k2 / k1


def min_impulse(phib_minus: float, dphib_minus: float, v: float,
                cfg: ImpulseConfig | None = None, p: BikebotParams | None = None) -> float:
    """Lower bound on the impulse torque magnitude (taken as stated, units unreconciled)."""
    cfg = cfg or ImpulseConfig()
    p = p or BikebotParams()
    if v < 0:
        raise PreconditionError("speed must be non-negative")
    _, _, k3 = roll_constants(v, p)
    return abs(phib_minus + dphib_minus + k3 * math.tan(cfg.phi_max)) / (cfg.kappa * p.J_t)


def check_necessary_condition(phib_minus: float, dphib_minus: float, delta_tau_x: float, v: float,
                              cfg: ImpulseConfig | None = None,
                              p: BikebotParams | None = None) -> bool:
    cfg = cfg or ImpulseConfig()
    p = p or BikebotParams()
    if dphib_minus == 0:
        raise ZeroRate("roll rate is zero; the sign condition is undefined")
    _, _, k3 = roll_constants(v, p)
    total = phib_minus + dphib_minus + k3 * math.tan(cfg.phi_max) + cfg.kappa * p.J_t * delta_tau_x
    return math.copysign(1.0, dphib_minus) * total < 0


def linear_roll(t, phib0: float, dphib0: float, phi: float, v: float,
                p: BikebotParams | None = None):
    """Closed-form roll of the linearized model with a constant steering angle."""
    p = p or BikebotParams()
    k1, k2, _ = roll_constants(v, p)
    offset = k2 * math.tan(phi) / (k1 * k1)
    t = np.asarray(t, dtype=float)
    return (phib0 - offset) * np.cosh(k1 * t) + dphib0 / k1 * np.sinh(k1 * t) + offset


def ideal_jump(delta_tau_x: float, kappa: float, p: BikebotParams | None = None) -> tuple[float, float]:
    """Roll-rate and roll-angle change of a constant torque held for ``kappa`` alone."""
    p = p or BikebotParams()
    return delta_tau_x * kappa / p.J_t, delta_tau_x * kappa**2 / (2.0 * p.J_t)

"""Hybrid supervisor around the EIC controller.

The supervisor watches for wheel impacts, estimates the post-impact velocity,
predicts the roll excursion over a short horizon and, when the bikebot is
about to leave the region it can recover from on its own, designs and emits
a leg impulse.  The EIC command is produced on every tick in every mode.
"""

from __future__ import annotations

import csv
import enum
import functools
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import impact as imp
from . import impulse as ipl
from .dynamics import ActuatorConfig, BikebotParams
from .eic import ControllerGains, EICController, EICOutput, EICSettings
from .errors import BikecrossError, IllegalTransition, PreconditionError
from .impact import RestitutionModel
from .reference import LineReference, ReferenceTrajectory

# integration step used to carry a state estimate between controller ticks
PREDICT_STEP = 1e-3


@dataclass(frozen=True)
class SupervisorConfig:
    a_x_max: float = 5.0
    varphi_b_max: float = math.radians(5.0)
    delta_t: float = 0.2
    debounce: float = 0.1
    # "sensor" thresholds the longitudinal acceleration; "geometric" uses the obstacle map
    detection: str = "sensor"
    # how long after an impact the roll prediction keeps being checked
    monitor_window: float = 0.5
    recovery_max: float = 1.0
    predict_dt: float = 0.005
    # smallest torque worth sending to a leg
    min_torque: float = 0.5

    def __post_init__(self):
        for k in ("a_x_max", "varphi_b_max", "debounce", "monitor_window", "recovery_max",
                  "predict_dt", "min_torque"):
            if not getattr(self, k) > 0:
                raise PreconditionError(f"{k} must be positive")
        if self.delta_t < 0:
            raise PreconditionError("delta_t must be non-negative")
        if self.detection not in ("sensor", "geometric"):
            raise PreconditionError("detection must be 'sensor' or 'geometric'")


# ---------------------------------------------------------------------------
# finite state machine


class Mode(enum.Enum):
    TRACKING = "Tracking"
    IMPACT_DETECTED = "ImpactDetected"
    IMPULSE_ACTIVE = "ImpulseActive"
    RECOVERY = "Recovery"
    FAILED = "Failed"


LEGAL = {
    Mode.TRACKING: {Mode.IMPACT_DETECTED},
    Mode.IMPACT_DETECTED: {Mode.TRACKING, Mode.IMPULSE_ACTIVE},
    Mode.IMPULSE_ACTIVE: {Mode.RECOVERY},
    Mode.RECOVERY: {Mode.TRACKING},
    Mode.FAILED: set(),
}


@dataclass(frozen=True)
class Transition:
    t: float
    source: Mode
    target: Mode
    reason: str = ""


@dataclass
class FsmState:
    mode: Mode = Mode.TRACKING
    history: list = field(default_factory=list)

    def allowed(self, target: Mode) -> bool:
        if self.mode is Mode.FAILED:
            return False
        return target is Mode.FAILED or target in LEGAL[self.mode]

    def transition(self, target: Mode, t: float, reason: str = "") -> None:
        if not self.allowed(target):
            raise IllegalTransition(f"{self.mode.value} -> {target.value} is not allowed")
        if self.history and t < self.history[-1].t:
            raise PreconditionError("transitions must be time ordered")
        self.history.append(Transition(t, self.mode, target, reason))
        self.mode = target

    def entered(self) -> float:
        return self.history[-1].t if self.history else 0.0


# ---------------------------------------------------------------------------
# impact detection


def detect_impact(a_x: float, geometric: bool = False, cfg: SupervisorConfig | None = None) -> bool:
    """Undebounced detection test for one sample."""
    cfg = cfg or SupervisorConfig()
    if cfg.detection == "geometric":
        return bool(geometric)
    return abs(a_x) > cfg.a_x_max


class ImpactDetector:
    """Threshold detector that reports at most one event per debounce interval."""

    def __init__(self, cfg: SupervisorConfig | None = None):
        self.cfg = cfg or SupervisorConfig()
        self._last = -math.inf

    def update(self, t: float, a_x: float, geometric: bool = False) -> bool:
        if not detect_impact(a_x, geometric, self.cfg):
            return False
        if t - self._last < self.cfg.debounce:
            return False
        self._last = t
        return True


# ---------------------------------------------------------------------------
# closed-loop prediction


@dataclass(frozen=True)
class LoopOutcome:
    X: np.ndarray
    max_roll: np.ndarray
    alive: np.ndarray
    steer_violated: np.ndarray
    speed_violated: np.ndarray


def simulate_loop(X0, t0: float, ref: ReferenceTrajectory, controller: EICController,
                  duration: float, dt: float, p: BikebotParams, act: ActuatorConfig,
                  fall_angle: float = math.radians(60.0)) -> LoopOutcome:
    """Batch closed loop with the controller sampled at its own period and the plant at ``dt``."""
    X = np.array(X0, dtype=float, copy=True)
    if X.ndim == 1:
        X = X[None, :]
    n = X.shape[0]
    ctl = controller.tile(n)
    ctrl_dt = controller.settings.ctrl_dt
    per = max(int(round(ctrl_dt / dt)), 1)
    steps = int(round(duration / dt))
    max_roll = np.abs(X[:, dyn.IPHIB]).copy()
    alive = np.ones(n, bool)
    steer = np.zeros(n, bool)
    speed = np.zeros(n, bool)
    out = None
    for k in range(steps):
        if k % per == 0:
            out = ctl(X, ref(t0 + k * dt))
            steer |= alive & (np.abs(out.phi_demand) > act.phi_max + 1e-12)
        X = dyn._rk4(X, out.phi_cmd, out.u_v, 0.0, dt, p, act)
        fallen = alive & ~(np.abs(X[:, dyn.IPHIB]) < fall_angle)
        alive &= ~fallen
        if fallen.any():
            X[fallen] = np.nan_to_num(X[fallen])
            X[fallen, dyn.IPHIB] = np.sign(X[fallen, dyn.IPHIB]) * fall_angle
            X[fallen, dyn.IDPHIB] = 0.0
        max_roll = np.where(alive, np.maximum(max_roll, np.abs(X[:, dyn.IPHIB])), max_roll)
        speed |= alive & (X[:, dyn.IV] > act.v_max + 1e-9)
    max_roll[~alive] = fall_angle
    return LoopOutcome(X, max_roll, alive, steer, speed)


def predict_roll(X, t: float, ref: ReferenceTrajectory, controller: EICController,
                 cfg: SupervisorConfig | None = None, p: BikebotParams | None = None,
                 act: ActuatorConfig | None = None) -> float:
    """Largest roll magnitude over the prediction horizon under the EIC loop.

    The controller is copied, so calling this has no effect on the live loop.
    """
    cfg = cfg or SupervisorConfig()
    p = p or BikebotParams()
    act = act or ActuatorConfig()
    X = np.asarray(X, dtype=float).reshape(dyn.NSTATE)
    if not np.all(np.isfinite(X)):
        raise PreconditionError("state must be finite")
    if cfg.delta_t == 0:
        return abs(float(X[dyn.IPHIB]))
    res = simulate_loop(X, t, ref, controller, cfg.delta_t, cfg.predict_dt, p, act)
    return float(res.max_roll[0])


# ---------------------------------------------------------------------------
# region of attraction


@dataclass(frozen=True)
class RoaSpec:
    speed: float = 1.2
    varphi_b_max: float = math.radians(20.0)
    rate_max: float = math.radians(100.0)
    n_varphi_b: int = 41
    n_rate: int = 41
    duration: float = 5.0
    dt: float = 0.005
    settle: float = math.radians(1.0)

    def __post_init__(self):
        if not (self.speed > 0 and self.varphi_b_max > 0 and self.rate_max > 0
                and self.duration > 0 and self.dt > 0 and self.settle > 0):
            raise PreconditionError("ROA grid parameters must be positive")
        if self.n_varphi_b < 3 or self.n_rate < 3 or self.n_varphi_b * self.n_rate > 10_000:
            raise PreconditionError("ROA grid needs 3..10000 cells per axis product")


@dataclass(frozen=True)
class RoaGrid:
    spec: RoaSpec
    varphi_b: np.ndarray
    rate: np.ndarray
    member: np.ndarray

    def _index(self, value: float, axis: np.ndarray) -> int | None:
        step = axis[1] - axis[0]
        k = int(round((value - axis[0]) / step))
        return k if 0 <= k < len(axis) else None

    def contains(self, varphi_b: float, rate: float) -> bool:
        """Conservative membership: the cell and all its neighbours must be members."""
        i = self._index(varphi_b, self.varphi_b)
        j = self._index(rate, self.rate)
        if i is None or j is None:
            return False
        if i == 0 or j == 0 or i == len(self.varphi_b) - 1 or j == len(self.rate) - 1:
            return False
        return bool(self.member[i - 1:i + 2, j - 1:j + 2].all())

    def rows(self):
        for i, a in enumerate(self.varphi_b):
            for j, b in enumerate(self.rate):
                yield math.degrees(a), math.degrees(b), int(self.member[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["varphi_b_deg", "dot_varphi_b_deg_s", "member"])
            for a, b, m in self.rows():
                w.writerow([f"{a:.6f}", f"{b:.6f}", m])


def in_roa(grid: RoaGrid, varphi_b: float, rate: float) -> bool:
    return grid.contains(varphi_b, rate)


@functools.lru_cache(maxsize=8)
def _roa_cached(spec: RoaSpec, p: BikebotParams, gains: ControllerGains, act: ActuatorConfig,
                settings: EICSettings) -> RoaGrid:
    A = np.linspace(-spec.varphi_b_max, spec.varphi_b_max, spec.n_varphi_b)
    B = np.linspace(-spec.rate_max, spec.rate_max, spec.n_rate)
    AA, BB = np.meshgrid(A, B, indexing="ij")
    X = np.zeros((AA.size, dyn.NSTATE))
    X[:, dyn.IV] = spec.speed
    X[:, dyn.IPHIB] = AA.ravel()
    X[:, dyn.IDPHIB] = BB.ravel()
    ctl = EICController(p, gains, act, settings)
    res = simulate_loop(X, 0.0, LineReference(speed=spec.speed), ctl, spec.duration, spec.dt, p, act)
    # steering saturation is imposed by the actuator clip, so it does not exclude a cell
    member = res.alive & (np.abs(res.X[:, dyn.IPHIB]) < spec.settle) & ~res.speed_violated
    member = member.reshape(AA.shape)
    member.setflags(write=False)
    return RoaGrid(spec, A, B, member)


def estimate_roa(spec: RoaSpec | None = None, p: BikebotParams | None = None,
                 gains: ControllerGains | None = None, act: ActuatorConfig | None = None,
                 settings: EICSettings | None = None) -> RoaGrid:
    """Grid of roll states from which straight-line EIC tracking recovers unaided."""
    return _roa_cached(spec or RoaSpec(), p or BikebotParams(), gains or ControllerGains(),
                       act or ActuatorConfig(), settings or EICSettings())


# ---------------------------------------------------------------------------
# per-tick orchestration


@dataclass(frozen=True)
class ImpactEstimate:
    t: float
    h_o: float
    X_pre: np.ndarray
    qdot_nominal: np.ndarray
    qdot_star: np.ndarray
    X_est: np.ndarray


@dataclass(frozen=True)
class TickResult:
    eic: EICOutput
    impulse: ipl.ImpulseCommand | None
    mode: Mode


def estimated_state(X_pre, qdot, p: BikebotParams) -> np.ndarray:
    """Riding state carrying the estimated post-impact speed and roll rate."""
    X = np.array(X_pre, dtype=float, copy=True)
    v, _, dphib = imp.project_to_planar(qdot, X[dyn.IPSI])
    X[dyn.IV] = max(v, 0.0)
    X[dyn.IDPHIB] = dphib
    X[dyn.IDV] = 0.0
    return X


class Supervisor:
    """Owns the EIC controller and the FSM of one simulated run."""

    def __init__(self, ref: ReferenceTrajectory, controller: EICController, roa: RoaGrid,
                 obstacles=(), cfg: SupervisorConfig | None = None,
                 impulse_cfg: ipl.ImpulseConfig | None = None,
                 restitution: RestitutionModel | None = None, residual=None,
                 impulse_enabled: bool = True, window: int = 10):
        self.ref = ref
        self.controller = controller
        self.roa = roa
        self.obstacles = tuple(obstacles)
        self.cfg = cfg or SupervisorConfig()
        self.impulse_cfg = impulse_cfg or ipl.ImpulseConfig()
        self.restitution = restitution or RestitutionModel()
        self.residual = residual
        self.impulse_enabled = impulse_enabled
        self.p = controller.p
        self.act = controller.act
        self.fsm = FsmState()
        self.detector = ImpactDetector(self.cfg)
        self.features = deque(maxlen=window)
        self.log: list[dict] = []
        self._pending: float | None = None
        self._prev_X: np.ndarray | None = None
        self._prev_t = 0.0
        self._prev_out: EICOutput | None = None
        self._estimate: ImpactEstimate | None = None
        self._fresh = False
        self._active: ipl.ImpulseCommand | None = None
        self.diagnostic = ""

    @property
    def mode(self) -> Mode:
        return self.fsm.mode

    def observe(self, t: float, a_x: float, geometric: bool = False) -> bool:
        """Feed one high-rate IMU sample; returns whether an impact was detected."""
        hit = self.detector.update(t, a_x, geometric)
        if hit and self._pending is None:
            self._pending = t
        return hit

    def _height(self, X) -> float:
        s = self.ref.project(X[:2]) + self.p.l
        return min(self.obstacles, key=lambda o: abs(o.s_o - s)).h_o

    def _hold(self, X, t0: float, t1: float) -> np.ndarray:
        """Propagate ``X`` from ``t0`` to ``t1`` under the last issued command."""
        X = np.array(X, dtype=float, copy=True)
        if self._prev_out is None or t1 <= t0:
            return X
        n = max(int(math.ceil((t1 - t0) / PREDICT_STEP - 1e-9)), 1)
        h = (t1 - t0) / n
        out = self._prev_out
        for _ in range(n):
            X = dyn._rk4(X, out.phi_cmd, out.u_v, 0.0, h, self.p, self.act)
        return X

    def _estimate_impact(self, t: float, t_hit: float) -> ImpactEstimate:
        # the impact happened between ticks; estimate there, then carry the estimate to now
        t_hit = min(max(t_hit, self._prev_t), t)
        X_pre = self._hold(self._prev_X, self._prev_t, t_hit)
        h_o = self._height(X_pre)
        s = dyn.BikebotState.from_array(X_pre, p=self.p)
        q = imp.coordinates(s)
        qd = imp.generalized_velocity(s)
        nominal = imp.post_impact(q, qd, h_o, self.restitution, self.p, s.phi).qdot_plus
        star = nominal
        if self.residual is not None and len(self.features) == self.features.maxlen:
            star = self.residual.enhance(np.array(self.features), nominal)
        X_est = self._hold(estimated_state(X_pre, star, self.p), t_hit, t)
        return ImpactEstimate(t, h_o, X_pre, nominal, star, X_est)

    def _fail(self, t: float, err: Exception) -> None:
        self.diagnostic = f"{type(err).__name__}: {err}"
        self.fsm.transition(Mode.FAILED, t, self.diagnostic)
        self.log.append({"t": t, "kind": "failed", "detail": self.diagnostic})

    def tick(self, t: float, X, features=None) -> TickResult:
        X = np.asarray(X, dtype=float)
        if features is not None:
            self.features.append(np.asarray(features, dtype=float))
        snapshot = self.controller.copy()
        cmd = None
        if self.fsm.mode is not Mode.FAILED:
            try:
                cmd = self._advance(t, X, snapshot)
            except BikecrossError as err:
                self._fail(t, err)
        a = self._active
        if a is not None and a.t_tau - 1e-9 <= t < a.t_tau_plus - 1e-9:
            out = self.controller(ipl.planned_view(X, a.dphib_target, a.v_target), self.ref(t))
        else:
            out = self.controller(X, self.ref(t))
        self._prev_X = X.copy()
        self._prev_t = t
        self._prev_out = out
        return TickResult(out, cmd, self.fsm.mode)

    def _advance(self, t: float, X: np.ndarray, snapshot: EICController):
        mode = self.fsm.mode
        if self._pending is not None:
            if self._prev_X is not None and self.obstacles:
                if mode in (Mode.TRACKING, Mode.IMPACT_DETECTED):
                    self._estimate = self._estimate_impact(t, self._pending)
                    self._fresh = True
                    if mode is Mode.TRACKING:
                        self.fsm.transition(Mode.IMPACT_DETECTED, t, "impact detected")
                    else:
                        self.fsm.history.append(Transition(t, mode, mode, "impact window restarted"))
                    e = self._estimate
                    self.log.append({"t": t, "kind": "impact", "t_detect": self._pending, "h_o": e.h_o,
                                     "v_est": float(e.X_est[dyn.IV]),
                                     "dot_varphi_b_est": float(e.X_est[dyn.IDPHIB])})
                else:
                    self.log.append({"t": t, "kind": "impact_ignored", "t_detect": self._pending,
                                     "mode": mode.value})
            self._pending = None

        mode = self.fsm.mode
        if mode is Mode.IMPACT_DETECTED:
            return self._monitor(t, X, snapshot)
        if mode is Mode.IMPULSE_ACTIVE and t >= self._active.t_tau_plus - 1e-9:
            self.fsm.transition(Mode.RECOVERY, t, "impulse window closed")
        elif mode is Mode.RECOVERY:
            if self.roa.contains(X[dyn.IPHIB], X[dyn.IDPHIB]):
                self.fsm.transition(Mode.TRACKING, t, "back inside the recoverable region")
            elif t - self.fsm.entered() >= self.cfg.recovery_max:
                self.fsm.transition(Mode.TRACKING, t, "recovery time elapsed")
        return None

    def _monitor(self, t: float, X: np.ndarray, snapshot: EICController):
        Xd = self._estimate.X_est if self._fresh else X
        self._fresh = False
        peak = predict_roll(Xd, t, self.ref, snapshot, self.cfg, self.p, self.act)
        outside = not self.roa.contains(Xd[dyn.IPHIB], Xd[dyn.IDPHIB])
        if peak > self.cfg.varphi_b_max and outside:
            if not self.impulse_enabled:
                self.log.append({"t": t, "kind": "impulse_suppressed", "predicted_peak": peak})
                self.fsm.transition(Mode.TRACKING, t, "impulse disabled")
                return None
            cmd = self._design(t, Xd, snapshot, peak)
            if cmd is not None:
                self._active = cmd
                self.fsm.transition(Mode.IMPULSE_ACTIVE, t, "predicted roll beyond limit")
                return cmd
        if t - self._estimate.t >= self.cfg.monitor_window - 1e-9:
            self.fsm.transition(Mode.TRACKING, t, "no impulse needed")
        return None

    def _design(self, t: float, Xd: np.ndarray, snapshot: EICController, peak: float):
        cfg = self.impulse_cfg
        decision = ipl.optimize_reinit(Xd, t, self.ref, snapshot, cfg, self.p, self.act, roa=self.roa)
        tau, status = ipl.impulse_torque(decision.dot_varphi_b, Xd[dyn.IDPHIB], cfg, self.p)
        if abs(tau) < self.cfg.min_torque:
            return None
        leg = ipl.leg_command(tau, t, Xd[dyn.IPHIB], cfg)
        cmd = ipl.ImpulseCommand(leg.delta_tau_x, leg.t_tau, leg.t_tau_plus, leg.side, leg.F_z,
                                 leg.foot, leg.theta, leg.tau_theta, decision.v,
                                 decision.dot_varphi_b)
        self.log.append({
            "t": t, "kind": "impulse", "predicted_peak": peak, "delta_tau_x": cmd.delta_tau_x,
            "side": cmd.side.value, "F_z": cmd.F_z, "status": status.value,
            "target_dot_varphi_b": decision.dot_varphi_b, "target_v": decision.v,
            "cost": decision.cost, "cost_no_impulse": decision.cost_no_impulse,
            "varphi_b_pre": float(Xd[dyn.IPHIB]), "dot_varphi_b_pre": float(Xd[dyn.IDPHIB]),
            "v_pre": float(Xd[dyn.IV]),
            "min_impulse": ipl.min_impulse(Xd[dyn.IPHIB], Xd[dyn.IDPHIB], Xd[dyn.IV], cfg, self.p),
            "theta": cmd.theta.tolist(), "tau_theta": cmd.tau_theta.tolist(),
        })
        return cmd

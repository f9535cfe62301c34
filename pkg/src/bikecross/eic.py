"""External/internal convertible (EIC) tracking and balance control.

The external loop is a third-order output tracker on the rear contact point;
its yaw-acceleration demand defines a balance equilibrium manifold (the
roll angle at which gravity, centrifugal and yaw-acceleration torques cancel).
The internal loop replaces the yaw-acceleration demand by one that drives
the roll onto that manifold with second-order linear error dynamics.

The stateful :class:`EICController` runs on batches of packed states so the
same code serves the main simulation, optimizer rollouts and region-of-
attraction sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import ActuatorConfig, BikebotParams, BikebotState
from .errors import HSingular, NoRoot, PreconditionError, SingularKpsi
from .reference import RefSample, ReferenceTrajectory

MANIFOLD_BRACKET = math.radians(45.0)
U_PSI_MAX = 50.0
KPSI_DET_MIN = 1e-3
H_MIN = 1e-2


@dataclass(frozen=True)
class ControllerGains:
    """Tracking gains ``a0..a2`` and balance gains ``b0, b1``."""

    a0: float = 10.0
    a1: float = 6.0
    a2: float = 3.0
    b0: float = 180.0
    b1: float = 25.0

    def __post_init__(self):
        for k in ("a0", "a1", "a2", "b0", "b1"):
            if not getattr(self, k) > 0:
                raise PreconditionError(f"gain {k} must be positive")


@dataclass(frozen=True)
class EICSettings:
    """Sampling and implementation constants of the controller."""

    ctrl_dt: float = 0.02
    # low-pass cutoff for the manifold rate estimates
    filter_hz: float = 10.0
    # lead applied when turning the yaw-acceleration demand into a yaw-rate set-point
    steer_lead: float = 0.06
    jerk_max: float = 30.0
    # position error saturation inside the tracking law
    track_err_max: float = 0.5
    # manifold bound as a fraction of the steady-turn lean the steering lock can hold
    lean_margin: float = 0.8


# ---------------------------------------------------------------------------
# broadcasting kernels


def _tracking(X, dpsi, ref: RefSample, gains: ControllerGains, err_max=np.inf):
    psi, v, dv = X[..., dyn.IPSI], X[..., dyn.IV], X[..., dyn.IDV]
    c, s = np.cos(psi), np.sin(psi)
    r = np.stack([X[..., dyn.IX], X[..., dyn.IY]], axis=-1)
    r1 = np.stack([v * c, v * s], axis=-1)
    r2 = np.stack([dv * c - v * dpsi * s, dv * s + v * dpsi * c], axis=-1)
    e0 = r - ref.r
    n = np.linalg.norm(e0, axis=-1, keepdims=True)
    e0 = e0 * np.where(n > err_max, err_max / np.maximum(n, 1e-300), 1.0)
    ur = ref.r3 - gains.a2 * (r2 - ref.r2) - gains.a1 * (r1 - ref.r1) - gains.a0 * e0
    # K_psi^{-1}(R_psi dpsi + u_r); det K_psi = v
    R0 = (v * dpsi * c + 2.0 * dv * s) * dpsi
    R1 = (v * dpsi * s - 2.0 * dv * c) * dpsi
    w0, w1 = R0 + ur[..., 0], R1 + ur[..., 1]
    u_v = c * w0 + s * w1
    u_psi = (-s * w0 + c * w1) / v
    return u_v, u_psi


def _manifold_residual(phi, dpsi, v, u_psi, p: BikebotParams):
    g = dyn._f1(phi, dpsi, v, p) + dyn._h(phi, p) * u_psi
    m, h = p.m_b, p.h_G
    dg = (m * h * (-dpsi * v * np.sin(phi) + h * dpsi**2 * np.cos(2 * phi) + p.g * np.cos(phi))
          - p.yaw_roll_coupling * np.sin(phi) * u_psi)
    return g, dg


def _manifold_root(dpsi, v, u_psi, guess, p: BikebotParams, tol=1e-13, max_iter=60):
    """Safeguarded Newton/bisection on the manifold equation.

    Returns ``(root, ok)``; ``ok`` is False where the bracket has no sign change.
    """
    dpsi, v, u_psi, guess = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (dpsi, v, u_psi, guess)))
    lo = np.full(dpsi.shape, -MANIFOLD_BRACKET)
    hi = np.full(dpsi.shape, MANIFOLD_BRACKET)
    glo, _ = _manifold_residual(lo, dpsi, v, u_psi, p)
    ghi, _ = _manifold_residual(hi, dpsi, v, u_psi, p)
    ok = np.sign(glo) * np.sign(ghi) <= 0
    x = np.clip(guess, lo, hi)
    for _ in range(max_iter):
        g, dg = _manifold_residual(x, dpsi, v, u_psi, p)
        neg = np.sign(g) == np.sign(glo)
        lo = np.where(neg, x, lo)
        hi = np.where(neg, hi, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - g / dg
        bad = ~np.isfinite(xn) | (xn <= lo) | (xn >= hi)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        done = (np.abs(g) < tol) | (np.abs(xn - x) < 1e-15)
        x = np.where(done, x, xn)
        if np.all(done | ~ok):
            break
    return x, ok


def lock_lean(v, phi_max: float, p: BikebotParams):
    """Steady-turn roll angle sustained at speed ``v`` with the steering at ``phi_max``."""
    s = np.asarray(v, dtype=float) ** 2 * math.tan(phi_max) * math.cos(p.epsilon) / (p.g * p.l)
    return np.arcsin(np.minimum(s, 1.0))


def _balance(X, dpsi, phib_e, dphib_e, ddphib_e, p: BikebotParams, gains: ControllerGains):
    phib, dphib, v = X[..., dyn.IPHIB], X[..., dyn.IDPHIB], X[..., dyn.IV]
    e, de = phib - phib_e, dphib - dphib_e
    u_b = ddphib_e - gains.b1 * de - gains.b0 * e
    hh = dyn._h(phib, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ubar = (p.J_t * u_b - dyn._f1(phib, dpsi, v, p)) / hh
    return ubar, np.abs(hh) > H_MIN


# ---------------------------------------------------------------------------
# scalar operations


def tracking_control(s: BikebotState, ref: RefSample, gains: ControllerGains | None = None,
                     p: BikebotParams | None = None) -> tuple[float, float]:
    """Drive jerk and yaw acceleration that give third-order error decay."""
    gains, p = gains or ControllerGains(), p or BikebotParams()
    if abs(s.v) < KPSI_DET_MIN or s.v < dyn.MIN_SPEED:
        raise SingularKpsi(f"det K_psi = v = {s.v} too small")
    dpsi = dyn.yaw_rate(s.v, s.phi, s.varphi_b, p)
    u_v, u_psi = _tracking(s.to_array(), dpsi, ref, gains)
    return float(u_v), float(u_psi)


def balance_manifold(u_psi: float, s: BikebotState, p: BikebotParams | None = None,
                     guess: float = 0.0) -> float:
    """Equilibrium roll angle for a yaw-acceleration demand at the current speed and yaw rate."""
    p = p or BikebotParams()
    if not abs(u_psi) <= U_PSI_MAX:
        raise PreconditionError(f"|u_psi| must not exceed {U_PSI_MAX}")
    dpsi = dyn.yaw_rate(s.v, s.phi, s.varphi_b, p)
    root, ok = _manifold_root(dpsi, s.v, u_psi, guess, p)
    if not bool(ok):
        raise NoRoot("manifold equation has no sign change in (-45, 45) deg")
    return float(root)


def balance_control(s: BikebotState, manifold: tuple[float, float, float],
                    p: BikebotParams | None = None, gains: ControllerGains | None = None) -> float:
    """Yaw-acceleration command placing the roll error on ``e'' + b1 e' + b0 e = 0``."""
    p, gains = p or BikebotParams(), gains or ControllerGains()
    dpsi = dyn.yaw_rate(s.v, s.phi, s.varphi_b, p)
    ubar, ok = _balance(s.to_array(), dpsi, *manifold, p, gains)
    if not bool(ok):
        raise HSingular(f"h(roll) vanishes at roll={math.degrees(s.varphi_b):.2f} deg")
    return float(ubar)


# ---------------------------------------------------------------------------
# stateful batch controller


@dataclass
class EICOutput:
    u_v: np.ndarray
    phi_cmd: np.ndarray
    u_psi: np.ndarray
    u_psi_bar: np.ndarray
    phib_e: np.ndarray
    dphib_e: np.ndarray
    # steering demand before clamping; used for constraint bookkeeping
    phi_demand: np.ndarray
    held: np.ndarray


@dataclass
class EICController:
    """EIC law with the manifold-rate filter and fail-safe command hold."""

    p: BikebotParams = field(default_factory=BikebotParams)
    gains: ControllerGains = field(default_factory=ControllerGains)
    act: ActuatorConfig = field(default_factory=ActuatorConfig)
    settings: EICSettings = field(default_factory=EICSettings)

    def __post_init__(self):
        self._mem = None

    def reset(self):
        self._mem = None

    def copy(self) -> "EICController":
        c = EICController(self.p, self.gains, self.act, self.settings)
        if self._mem is not None:
            c._mem = {k: np.array(v, copy=True) for k, v in self._mem.items()}
        return c

    def memory(self) -> dict | None:
        return None if self._mem is None else {k: np.array(v) for k, v in self._mem.items()}

    def tile(self, n: int) -> "EICController":
        """Copy whose filter memory is broadcast to a batch of ``n``."""
        c = self.copy()
        if c._mem is not None:
            c._mem = {k: np.broadcast_to(v.reshape(-1)[:1] if v.size == 1 else v, (n,)).copy()
                      for k, v in c._mem.items()}
        return c

    def __call__(self, X, ref: RefSample) -> EICOutput:
        p, gains, act, st = self.p, self.gains, self.act, self.settings
        X = np.asarray(X, dtype=float)
        shape = X.shape[:-1]
        phib, v = X[..., dyn.IPHIB], X[..., dyn.IV]
        cosb = np.cos(phib)
        fine = (v >= dyn.MIN_SPEED) & (cosb > dyn.ROLL_COS_MIN)
        vs = np.where(fine, v, 1.0)
        Xs = X.copy()
        Xs[..., dyn.IV] = vs
        dpsi = dyn._yaw_rate(vs, X[..., dyn.IPHI], phib, p)

        u_v, u_psi = _tracking(Xs, dpsi, ref, gains, st.track_err_max)
        u_psi = np.clip(u_psi, -U_PSI_MAX, U_PSI_MAX)
        u_v = np.clip(u_v, -st.jerk_max, st.jerk_max)

        mem = self._mem
        guess = np.zeros(shape) if mem is None else mem["phib_e"]
        phib_e, ok = _manifold_root(dpsi, vs, u_psi, guess, p)
        phib_e = np.where(ok, phib_e, guess)
        # manifold rate along the external flow: yaw rate advanced by the tracking
        # demand rather than by the balance command, so the estimate does not feed
        # the balance loop back into itself
        h = 1e-3
        ahead, ok2 = _manifold_root(dpsi + h * u_psi, vs + h * X[..., dyn.IDV], u_psi, phib_e, p)
        raw_d = np.where(ok & ok2, (ahead - phib_e) / h, 0.0)
        # a target beyond what the saturated steering can hold only winds the loop up
        lean = st.lean_margin * lock_lean(vs, act.phi_max, p)
        held_out = np.abs(phib_e) > lean
        phib_e = np.clip(phib_e, -lean, lean)
        raw_d = np.where(held_out, 0.0, raw_d)
        if mem is None:
            dphib_e = raw_d
            ddphib_e = np.zeros(shape)
        else:
            alpha = st.ctrl_dt / (st.ctrl_dt + 1.0 / (2.0 * math.pi * st.filter_hz))
            dphib_e = mem["dphib_e"] + alpha * (raw_d - mem["dphib_e"])
            raw_dd = (dphib_e - mem["dphib_e"]) / st.ctrl_dt
            ddphib_e = mem["ddphib_e"] + alpha * (raw_dd - mem["ddphib_e"])

        ubar, hok = _balance(Xs, dpsi, phib_e, dphib_e, ddphib_e, p, gains)
        ubar = np.clip(ubar, -U_PSI_MAX, U_PSI_MAX)
        dpsi_des = dpsi + ubar * st.steer_lead
        phi_demand = np.arctan(dpsi_des * p.l * cosb / (vs * math.cos(p.epsilon)))
        phi_cmd = np.clip(phi_demand, -act.phi_max, act.phi_max)

        good = fine & ok & hok & np.isfinite(phi_cmd) & np.isfinite(u_v)
        if mem is None:
            prev_u_v, prev_phi = np.zeros(shape), X[..., dyn.IPHI].copy()
        else:
            prev_u_v, prev_phi = mem["u_v"], mem["phi_cmd"]
        u_v = np.where(good, u_v, prev_u_v)
        phi_cmd = np.where(good, phi_cmd, prev_phi)
        # never accelerate past the speed limit
        u_v = np.where((v >= act.v_max) & (u_v > 0.0), 0.0, u_v)

        self._mem = {
            "phib_e": np.where(good, phib_e, guess),
            "dphib_e": dphib_e,
            "ddphib_e": ddphib_e,
            "u_v": u_v,
            "phi_cmd": phi_cmd,
        }
        return EICOutput(u_v, phi_cmd, u_psi, ubar, phib_e, dphib_e,
                         phi_demand, ~good)


@dataclass(frozen=True)
class EICCommand:
    u_v: float
    phi_cmd: float
    u_psi: float
    u_psi_bar: float
    phib_e: float
    held: bool


def eic_step(s: BikebotState, ref: ReferenceTrajectory, controller: EICController) -> EICCommand:
    """One controller tick for a single bikebot; clamps and fail-safe hold included."""
    out = controller(s.to_array(), ref(s.t))
    return EICCommand(float(out.u_v), float(out.phi_cmd), float(out.u_psi),
                      float(out.u_psi_bar), float(out.phib_e), bool(out.held))

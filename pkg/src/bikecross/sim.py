"""Closed-loop crossing simulation, metrics and file export.

The plant is integrated at 1 kHz with RK4.  The supervisor (and through it the
EIC controller) runs every 20 ms on the true state; the impact detector sees
a noisy 1 kHz longitudinal accelerometer.  Obstacle impacts come from the
truth impact model, and a fired impulse applies its constant roll torque over
``kappa`` while the drive realizes the speed target.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from .eic import EICController
from .plant import truth_impact
from .residual import ResidualModel, imu_features, load_model
from .scenario import Scenario
from .supervisor import Mode, RoaGrid, Supervisor, estimate_roa

PLANT_DT = 1e-3
FALL_ANGLE = math.radians(45.0)
SETTLE_ANGLE = math.radians(2.0)
DEFAULT_MODEL = "residual_default.bkrs"

STATE_COLUMNS = ("t", "x", "y", "psi", "varphi_b", "phi", "v", "dot_varphi_b", "mode")
EVENT_COLUMNS = ("t", "kind", "source", "scenario", "seed", "obstacle", "h_o", "skew_deg",
                 "v_pre", "v_post", "varphi_b_pre_deg", "dot_varphi_b_pre_deg_s",
                 "varphi_b_post_deg", "dot_varphi_b_post_deg_s", "delta_tau_x", "F_z", "side",
                 "min_impulse", "in_roa_pre", "in_roa_post", "detail")


@dataclass
class TrajectoryLog:
    scenario: str
    seed: int
    t: np.ndarray
    X: np.ndarray
    modes: list
    ref_xy: np.ndarray
    events: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    verdict: str = "Balanced"
    diagnostic: str = ""
    impacts: int = 0


@dataclass(frozen=True)
class RunMetrics:
    max_abs_varphi_b_deg: float
    tracking_rmse: float
    crossings_attempted: int
    crossings_succeeded: int
    impulses: int
    impulse_records: list
    settle_time_after_impulse: float | None
    verdict: str

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "max_abs_varphi_b_deg": self.max_abs_varphi_b_deg,
            "tracking_rmse": self.tracking_rmse,
            "crossings_attempted": self.crossings_attempted,
            "crossings_succeeded": self.crossings_succeeded,
            "impulses": self.impulses,
            "impulse_records": self.impulse_records,
            "settle_time_after_impulse": self.settle_time_after_impulse,
        }


@functools.lru_cache(maxsize=4)
def _load_cached(path: str) -> ResidualModel:
    return load_model(path)


def default_model_path() -> Path:
    return Path(str(resources.files("bikecross") / "data" / DEFAULT_MODEL))


def residual_for(sc: Scenario) -> ResidualModel | None:
    if not sc.modes.residual:
        return None
    path = sc.modes.residual_model or str(default_model_path())
    return _load_cached(str(path))


def roa_for(sc: Scenario) -> RoaGrid:
    return estimate_roa(sc.roa, sc.params, sc.gains, sc.actuator, sc.eic)


def _front_arc(X, sc: Scenario) -> float:
    psi = X[dyn.IPSI]
    front = X[:2] + sc.params.l * np.array([math.cos(psi), math.sin(psi)])
    return sc.reference.project(front)


def run(sc: Scenario, roa: RoaGrid | None = None) -> TrajectoryLog:
    """Simulate one scenario; errors end the run with a Failed verdict instead of raising."""
    p, act = sc.params, sc.actuator
    rng = np.random.default_rng(sc.seed)
    roa = roa or roa_for(sc)
    ctl = EICController(p, sc.gains, act, sc.eic)
    sup = Supervisor(sc.reference, ctl, roa, sc.obstacles, sc.supervisor, sc.impulse,
                     sc.restitution, residual_for(sc), sc.modes.impulse)
    per = int(round(sc.eic.ctrl_dt / PLANT_DT))
    steps = int(round(sc.duration / PLANT_DT))
    X = sc.initial.copy()
    ts, Xs, modes, refs = [], [], [], []
    events = []
    nxt = 0
    out = None
    X_tick = X.copy()
    dz_tick = 0.0
    v_prev = X[dyn.IV]
    active = None
    pending_post = None
    verdict, diagnostic = "Balanced", ""
    impacts = 0

    def record(t):
        ts.append(t)
        Xs.append(X.copy())
        modes.append(sup.mode.value)
        refs.append(sc.reference(t).r)

    for k in range(steps + 1):
        t = k * PLANT_DT
        geometric = False
        if nxt < len(sc.obstacles) and _front_arc(X, sc) >= sc.obstacles[nxt].s_o:
            ob = sc.obstacles[nxt]
            pre = X.copy()
            try:
                hit = truth_impact(X, ob.h_o, ob.skew, p, sc.truth)
            except Exception as err:
                verdict, diagnostic = "Failed", f"{type(err).__name__}: {err}"
                record(t)
                break
            X[dyn.IV] = hit.v
            X[dyn.IDPHIB] = hit.dot_varphi_b
            X[dyn.IDV] = 0.0
            dz_tick += hit.dot_z
            geometric = True
            impacts += 1
            events.append({"t": t, "kind": "impact", "source": "plant", "obstacle": nxt, "h_o": ob.h_o,
                           "skew_deg": math.degrees(ob.skew), "v_pre": pre[dyn.IV], "v_post": X[dyn.IV],
                           "varphi_b_pre_deg": math.degrees(pre[dyn.IPHIB]),
                           "dot_varphi_b_pre_deg_s": math.degrees(pre[dyn.IDPHIB]),
                           "varphi_b_post_deg": math.degrees(X[dyn.IPHIB]),
                           "dot_varphi_b_post_deg_s": math.degrees(X[dyn.IDPHIB])})
            nxt += 1

        a_x = (X[dyn.IV] - v_prev) / PLANT_DT + rng.normal() * sc.noise.accel
        v_prev = X[dyn.IV]
        sup.observe(t, a_x, geometric)

        if pending_post is not None and t >= pending_post["t_end"] - 1e-9:
            ev = pending_post["event"]
            ev["varphi_b_post_deg"] = math.degrees(X[dyn.IPHIB])
            ev["dot_varphi_b_post_deg_s"] = math.degrees(X[dyn.IDPHIB])
            ev["v_post"] = X[dyn.IV]
            ev["in_roa_post"] = int(roa.contains(X[dyn.IPHIB], X[dyn.IDPHIB]))
            pending_post = None
            X[dyn.IDV] = 0.0
            active = None

        if k % per == 0:
            feats = imu_features(X_tick, X, dz_tick, p, rng, sc.noise)
            res = sup.tick(t, X, feats)
            out = res.eic
            X_tick = X.copy()
            dz_tick = 0.0
            if sup.mode is Mode.FAILED:
                verdict, diagnostic = "Failed", sup.diagnostic
                record(t)
                break
            if res.impulse is not None:
                cmd = res.impulse
                active = cmd
                dv = np.clip((cmd.v_target - X[dyn.IV]) / sc.impulse.kappa, -act.accel_max, act.accel_max)
                X[dyn.IDV] = dv
                ev = {"t": t, "kind": "impulse", "source": "supervisor", "obstacle": nxt - 1,
                      "h_o": sc.obstacles[nxt - 1].h_o if nxt else float("nan"),
                      "v_pre": X[dyn.IV], "varphi_b_pre_deg": math.degrees(X[dyn.IPHIB]),
                      "dot_varphi_b_pre_deg_s": math.degrees(X[dyn.IDPHIB]),
                      "delta_tau_x": cmd.delta_tau_x, "F_z": cmd.F_z, "side": cmd.side.value,
                      "min_impulse": sup.log[-1]["min_impulse"],
                      "in_roa_pre": int(roa.contains(X[dyn.IPHIB], X[dyn.IDPHIB])),
                      "detail": "target_rate_deg_s=%.4f target_v=%.4f" % (
                          math.degrees(cmd.dphib_target), cmd.v_target)}
                events.append(ev)
                pending_post = {"t_end": cmd.t_tau_plus, "event": ev}

        record(t)
        if abs(X[dyn.IPHIB]) > FALL_ANGLE or not np.all(np.isfinite(X)):
            verdict, diagnostic = "BalanceLost", f"roll {math.degrees(X[dyn.IPHIB]):.1f} deg at t={t:.3f}"
            break
        if k == steps:
            break
        in_window = active is not None and active.t_tau <= t < active.t_tau_plus
        tau = active.delta_tau_x if in_window else 0.0
        u_v = 0.0 if in_window else out.u_v
        X = dyn._rk4(X, out.phi_cmd, u_v, tau, PLANT_DT, p, act)

    for entry in sup.log:
        if entry["kind"] in ("impact_ignored", "impulse_suppressed", "failed"):
            events.append({"t": entry["t"], "kind": entry["kind"], "source": "supervisor",
                           "detail": entry.get("detail", entry.get("mode", ""))})
    events.sort(key=lambda e: (e["t"], e["kind"]))
    for e in events:
        e.setdefault("scenario", sc.name)
        e.setdefault("seed", sc.seed)
    return TrajectoryLog(sc.name, sc.seed, np.array(ts), np.array(Xs), modes, np.array(refs), events,
                         list(sup.fsm.history), verdict, diagnostic, impacts)


def metrics(log: TrajectoryLog) -> RunMetrics:
    roll = np.abs(log.X[:, dyn.IPHIB])
    err = np.linalg.norm(log.X[:, :2] - log.ref_xy, axis=1)
    impulses = [e for e in log.events if e["kind"] == "impulse"]
    records = [{"t": e["t"], "delta_tau_x": e["delta_tau_x"], "F_z": e["F_z"], "side": e["side"],
                "delta_dot_varphi_b_deg_s": e.get("dot_varphi_b_post_deg_s", float("nan"))
                - e["dot_varphi_b_pre_deg_s"]} for e in impulses]
    settle = None
    if impulses and log.verdict == "Balanced":
        last = impulses[-1]["t"]
        above = np.nonzero((log.t >= last) & (roll >= SETTLE_ANGLE))[0]
        settle = 0.0 if len(above) == 0 else float(log.t[above[-1]] + (log.t[1] - log.t[0]) - last)
    attempted = log.impacts
    succeeded = attempted if log.verdict == "Balanced" else max(attempted - 1, 0)
    return RunMetrics(float(np.degrees(roll.max())) if len(roll) else 0.0,
                      float(np.sqrt(np.mean(err**2))) if len(err) else 0.0,
                      attempted, succeeded, len(impulses), records, settle, log.verdict)


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "" if math.isnan(value) else repr(round(value, 9))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def export(log: TrajectoryLog, out_dir, roa: RoaGrid | None = None) -> list[Path]:
    """Write state.csv, events.csv, metrics.json (and roa.csv when a grid is given)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out / "state.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATE_COLUMNS)
        for t, X, mode in zip(log.t, log.X, log.modes):
            w.writerow([f"{t:.3f}"] + [f"{X[i]:.9g}" for i in (dyn.IX, dyn.IY, dyn.IPSI, dyn.IPHIB,
                                                              dyn.IPHI, dyn.IV, dyn.IDPHIB)] + [mode])
    paths.append(out / "state.csv")
    with open(out / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for e in log.events:
            w.writerow([format_cell(e.get(c, "")) for c in EVENT_COLUMNS])
    paths.append(out / "events.csv")
    m = metrics(log).as_dict()
    m["scenario"] = log.scenario
    m["seed"] = log.seed
    m["diagnostic"] = log.diagnostic
    m["transitions"] = [{"t": tr.t, "from": tr.source.value, "to": tr.target.value, "reason": tr.reason}
                        for tr in log.transitions]
    with open(out / "metrics.json", "w") as fh:
        json.dump(m, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    paths.append(out / "metrics.json")
    if roa is not None:
        roa.to_csv(out / "roa.csv")
        paths.append(out / "roa.csv")
    return paths

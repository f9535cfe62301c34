"""Declarative experiment files.

A scenario is a TOML document with a required ``schema = 1`` key.  Sections
mirror the configuration dataclasses; any key that is not recognized is an
error so typos never silently fall back to defaults.  Angles in the
``initial`` and ``obstacles`` sections are in degrees (``*_deg`` keys);
override sections use the SI units of the corresponding dataclass field.
"""

from __future__ import annotations

import copy
import dataclasses
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import dynamics as dyn
from .dynamics import ActuatorConfig, BikebotParams
from .eic import ControllerGains, EICSettings
from .errors import ParseError, PreconditionError, ValidationError
from .impact import Obstacle, RestitutionModel
from .impulse import ImpulseConfig
from .plant import TruthImpactModel
from .reference import ArcReference, LineReference, ReferenceTrajectory, SplineReference
from .residual import ImuNoise
from .supervisor import RoaSpec, SupervisorConfig

SCHEMA = 1

TOP_KEYS = {"schema", "name", "duration", "seed", "reference", "initial", "obstacles", "modes",
            "params", "actuator", "gains", "eic", "impulse", "supervisor", "restitution",
            "truth", "roa", "noise"}
REFERENCE_KEYS = {"kind", "speed", "x0", "y0", "heading_deg", "radius", "waypoints"}
INITIAL_KEYS = {"x", "y", "psi_deg", "varphi_b_deg", "dot_varphi_b_deg_s", "phi_deg", "v"}
OBSTACLE_KEYS = {"s_o", "h_o", "width", "skew_deg"}
MODE_KEYS = {"impulse", "residual", "detection", "residual_model"}

OVERRIDES = {
    "params": BikebotParams,
    "actuator": ActuatorConfig,
    "gains": ControllerGains,
    "eic": EICSettings,
    "impulse": ImpulseConfig,
    "restitution": RestitutionModel,
    "truth": TruthImpactModel,
    "noise": ImuNoise,
}


@dataclass(frozen=True)
class Modes:
    impulse: bool = True
    residual: bool = True
    detection: str = "sensor"
    # path of a trained residual model; the packaged default is used when empty
    residual_model: str = ""


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: float
    seed: int
    reference: ReferenceTrajectory
    initial: np.ndarray
    obstacles: tuple
    modes: Modes = Modes()
    params: BikebotParams = BikebotParams()
    actuator: ActuatorConfig = ActuatorConfig()
    gains: ControllerGains = ControllerGains()
    eic: EICSettings = EICSettings()
    impulse: ImpulseConfig = ImpulseConfig()
    supervisor: SupervisorConfig = SupervisorConfig()
    restitution: RestitutionModel = RestitutionModel()
    truth: TruthImpactModel = TruthImpactModel()
    roa: RoaSpec = RoaSpec()
    noise: ImuNoise = ImuNoise()
    source: dict = field(default_factory=dict, compare=False)


def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf"^\s*\[*\s*{re.escape(key)}\b")
    for n, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return n
    return None


def _check_keys(section: dict, allowed: set, where: str, text: str) -> None:
    for key in section:
        if key not in allowed:
            raise ParseError(f"unknown key '{key}' in {where}", key=key, line=_line_of(text, key))


def _number(value, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"'{key}' must be a number")
    return float(value)


def build_section(cls, section: dict, where: str, text: str, extra: dict | None = None):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    _check_keys(section, set(types), where, text)
    kw = dict(extra or {})
    for k, v in section.items():
        if isinstance(v, list):
            kw[k] = tuple(_number(x, k) for x in v)
        elif isinstance(v, str):
            kw[k] = v
        else:
            kw[k] = _number(v, k) if not isinstance(v, bool) else v
        if types[k] in ("int", int) and isinstance(kw[k], float):
            if kw[k] != int(kw[k]):
                raise ValidationError(f"'{k}' must be an integer")
            kw[k] = int(kw[k])
    try:
        return cls(**kw)
    except (PreconditionError, TypeError, ValueError) as err:
        raise ValidationError(f"[{where}] {err}") from err


def _reference(sec: dict, text: str) -> ReferenceTrajectory:
    _check_keys(sec, REFERENCE_KEYS, "reference", text)
    kind = sec.get("kind", "line")
    speed = _number(sec.get("speed", 1.2), "speed")
    x0, y0 = _number(sec.get("x0", 0.0), "x0"), _number(sec.get("y0", 0.0), "y0")
    heading = math.radians(_number(sec.get("heading_deg", 0.0), "heading_deg"))
    try:
        if kind == "line":
            return LineReference(x0, y0, heading, speed)
        if kind == "arc":
            if "radius" not in sec:
                raise ValidationError("arc reference needs 'radius'")
            return ArcReference(x0=x0, y0=y0, heading0=heading, radius=_number(sec["radius"], "radius"),
                                speed=speed)
        if kind == "spline":
            pts = np.asarray(sec.get("waypoints", []), dtype=float)
            return SplineReference(pts, speed=speed)
    except PreconditionError as err:
        raise ValidationError(f"[reference] {err}") from err
    raise ValidationError(f"unknown reference kind '{kind}' (line, arc or spline)")


def _initial(sec: dict, ref: ReferenceTrajectory, text: str) -> np.ndarray:
    _check_keys(sec, INITIAL_KEYS, "initial", text)
    r0 = ref(0.0)
    X = np.zeros(dyn.NSTATE)
    X[dyn.IX] = _number(sec.get("x", r0.r[0]), "x")
    X[dyn.IY] = _number(sec.get("y", r0.r[1]), "y")
    X[dyn.IPSI] = math.radians(_number(sec.get("psi_deg", math.degrees(math.atan2(r0.r1[1], r0.r1[0]))),
                                       "psi_deg"))
    X[dyn.IPHIB] = math.radians(_number(sec.get("varphi_b_deg", 0.0), "varphi_b_deg"))
    X[dyn.IDPHIB] = math.radians(_number(sec.get("dot_varphi_b_deg_s", 0.0), "dot_varphi_b_deg_s"))
    X[dyn.IPHI] = math.radians(_number(sec.get("phi_deg", 0.0), "phi_deg"))
    X[dyn.IV] = _number(sec.get("v", ref.speed), "v")
    if not 0.0 <= X[dyn.IV] <= 1.5 or abs(X[dyn.IPHIB]) >= math.pi / 2:
        raise ValidationError("initial speed must lie in [0, 1.5] m/s and roll within +-90 deg")
    return X


def _obstacles(items: list, text: str, p: BikebotParams) -> tuple:
    obs = []
    for k, sec in enumerate(items):
        if not isinstance(sec, dict):
            raise ParseError("obstacles must be a list of tables", key="obstacles")
        _check_keys(sec, OBSTACLE_KEYS, f"obstacles[{k}]", text)
        for req in ("s_o", "h_o"):
            if req not in sec:
                raise ValidationError(f"obstacles[{k}] needs '{req}'")
        h = _number(sec["h_o"], "h_o")
        if not 0.0 < h < p.R_w:
            raise ValidationError(f"obstacles[{k}] height {h} outside (0, R_w)")
        try:
            obs.append(Obstacle(_number(sec["s_o"], "s_o"), h, _number(sec.get("width", 0.3), "width"),
                                math.radians(_number(sec.get("skew_deg", 0.0), "skew_deg"))))
        except PreconditionError as err:
            raise ValidationError(f"obstacles[{k}] {err}") from err
    for a, b in zip(obs, obs[1:]):
        if b.s_o < a.s_o:
            raise ValidationError("obstacles must be sorted by s_o")
        if b.s_o < a.s_o + a.width:
            raise ValidationError(f"obstacles at s_o={a.s_o} and s_o={b.s_o} overlap")
    return tuple(obs)


def parse_scenario(data: dict, text: str = "", name: str = "scenario") -> Scenario:
    """Validate a parsed TOML document."""
    _check_keys(data, TOP_KEYS, "top level", text)
    if "schema" not in data:
        raise ParseError("missing required key 'schema'", key="schema")
    if data["schema"] != SCHEMA:
        raise ParseError(f"unsupported schema {data['schema']!r}, expected {SCHEMA}", key="schema",
                         line=_line_of(text, "schema"))
    for key, value in data.items():
        if key in OVERRIDES or key in ("reference", "initial", "modes", "supervisor", "roa"):
            if not isinstance(value, dict):
                raise ParseError(f"'{key}' must be a table", key=key, line=_line_of(text, key))

    kw = {}
    for key, cls in OVERRIDES.items():
        kw[key] = build_section(cls, data.get(key, {}), key, text)
    p = kw["params"]
    ref = _reference(data.get("reference", {}), text)
    modes_sec = data.get("modes", {})
    _check_keys(modes_sec, MODE_KEYS, "modes", text)
    modes = build_section(Modes, modes_sec, "modes", text)
    sup = build_section(SupervisorConfig, data.get("supervisor", {}), "supervisor", text,
                        {"detection": modes.detection})
    roa = build_section(RoaSpec, data.get("roa", {}), "roa", text, {"speed": ref.speed})
    duration = _number(data.get("duration", 5.0), "duration")
    if not duration > 0:
        raise ValidationError("duration must be positive")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ValidationError("seed must be a non-negative integer")
    return Scenario(
        name=str(data.get("name", name)), duration=duration, seed=seed, reference=ref,
        initial=_initial(data.get("initial", {}), ref, text),
        obstacles=_obstacles(data.get("obstacles", []), text, p),
        modes=modes, supervisor=sup, roa=roa, source=copy.deepcopy(data), **kw)


def loads_scenario(text: str, name: str = "scenario") -> Scenario:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        m = re.search(r"line (\d+)", str(err))
        raise ParseError(f"malformed scenario: {err}", line=int(m.group(1)) if m else None) from err
    return parse_scenario(data, text, name)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ParseError(f"cannot read {path}: {err}") from err
    return loads_scenario(text, path.stem)


def with_value(data: dict, dotted: str, value) -> dict:
    """Copy of a raw scenario document with one dotted key replaced (``obstacles.0.h_o``)."""
    out = copy.deepcopy(data)
    parts = dotted.split(".")
    node = out
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return out

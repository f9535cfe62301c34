"""Reference trajectories with analytic derivatives up to third order."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import PreconditionError


@dataclass(frozen=True)
class RefSample:
    r: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray


class ReferenceTrajectory:
    """Planar path traversed at constant speed ``speed``, starting at ``t0``."""

    speed: float
    t0: float

    def point(self, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Path point and its first three arc-length derivatives."""
        raise NotImplementedError

    def project(self, xy) -> float:
        """Arc length of the path point closest to ``xy``."""
        raise NotImplementedError

    def __call__(self, t: float) -> RefSample:
        s = self.speed * (t - self.t0)
        c0, c1, c2, c3 = self.point(s)
        v = self.speed
        return RefSample(c0, v * c1, v * v * c2, v**3 * c3)

    def heading(self, s: float) -> float:
        d = self.point(s)[1]
        return math.atan2(d[1], d[0])


def _check_speed(speed):
    if not 0.1 <= speed <= 1.5:
        raise PreconditionError(f"reference speed {speed} outside [0.1, 1.5] m/s")


@dataclass(frozen=True)
class LineReference(ReferenceTrajectory):
    x0: float = 0.0
    y0: float = 0.0
    heading0: float = 0.0
    speed: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        _check_speed(self.speed)

    def point(self, s):
        d = np.array([math.cos(self.heading0), math.sin(self.heading0)])
        z = np.zeros(2)
        return np.array([self.x0, self.y0]) + s * d, d, z, z

    def project(self, xy):
        d = np.array([math.cos(self.heading0), math.sin(self.heading0)])
        return float(np.dot(np.asarray(xy, dtype=float) - [self.x0, self.y0], d))


@dataclass(frozen=True)
class ArcReference(ReferenceTrajectory):
    """Circular arc starting at ``(x0, y0)`` with initial heading; positive radius turns left."""

    x0: float = 0.0
    y0: float = 0.0
    heading0: float = 0.0
    radius: float = 5.0
    speed: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        _check_speed(self.speed)
        if self.radius == 0:
            raise PreconditionError("arc radius must be non-zero")

    def _center(self):
        R = self.radius
        return np.array([self.x0 - R * math.sin(self.heading0), self.y0 + R * math.cos(self.heading0)])

    def point(self, s):
        R = self.radius
        a = self.heading0 + s / R
        t = np.array([math.cos(a), math.sin(a)])
        n = np.array([-math.sin(a), math.cos(a)])
        return self._center() + R * np.array([math.sin(a), -math.cos(a)]), t, n / R, -t / R**2

    def project(self, xy):
        d = np.asarray(xy, dtype=float) - self._center()
        R = self.radius
        a = math.atan2(d[1], d[0]) + math.copysign(math.pi / 2, R)
        da = (a - self.heading0 + math.pi) % (2 * math.pi) - math.pi
        return float(da * R)


class SplineReference(ReferenceTrajectory):
    """Quintic spline through waypoints, parameterized by chord length."""

    def __init__(self, waypoints, speed=1.0, t0=0.0):
        _check_speed(speed)
        P = np.asarray(waypoints, dtype=float)
        if P.ndim != 2 or P.shape[1] != 2 or len(P) < 6:
            raise PreconditionError("spline reference needs at least 6 planar waypoints")
        chord = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))]
        if np.any(np.diff(chord) <= 0):
            raise PreconditionError("waypoints must be distinct")
        self.waypoints = P
        self.speed = float(speed)
        self.t0 = float(t0)
        self.length = float(chord[-1])
        self._spl = make_interp_spline(chord, P, k=5)
        self._d = [self._spl.derivative(k) for k in (1, 2, 3)]
        self._grid = np.linspace(0.0, self.length, 2001)
        self._grid_pts = self._spl(self._grid)

    def point(self, s):
        s = min(max(s, 0.0), self.length)
        return (np.asarray(self._spl(s)), *(np.asarray(d(s)) for d in self._d))

    def project(self, xy):
        xy = np.asarray(xy, dtype=float)
        i = int(np.argmin(np.sum((self._grid_pts - xy) ** 2, axis=1)))
        lo = self._grid[max(i - 1, 0)]
        hi = self._grid[min(i + 1, len(self._grid) - 1)]
        ss = np.linspace(lo, hi, 41)
        j = int(np.argmin(np.sum((self._spl(ss) - xy) ** 2, axis=1)))
        return float(ss[j])

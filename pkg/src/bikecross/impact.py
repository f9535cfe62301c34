"""Front-wheel / step-edge impact map.

The bikebot is treated as a rigid body with generalized coordinates
``q = (x, y, z, psi, varphi_b)`` and block-diagonal inertia
``D = diag(m_b, m_b, m_b, J_z, J_t)``.  At impact the velocity of the contact
point C is prescribed by a restitution law and the impulsive contact force
follows from the bordered linear system

    [ D    -J_C^T ] [ qd+ ]   [ D qd- ]
    [ J_C    0    ] [ f   ] = [ eps   ]

Restitution coefficients act per axis in the principal frame of the contact
mobility matrix ``J_C D^-1 J_C^T`` (first axis closest to the wheel plane).
In that frame the effective contact mass is diagonal, so any coefficients in
[0, 1] dissipate energy.  For a hit with straight steering the frame is the
heading frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import BikebotParams, BikebotState
from .errors import BadHeight, PreconditionError, SingularSystem

COND_MAX = 1e12


@dataclass(frozen=True)
class RestitutionModel:
    """Per-axis coefficients (along-wheel, lateral, vertical)."""

    e: tuple[float, float, float] = (0.2, 1.0, 0.1)

    def __post_init__(self):
        if len(self.e) != 3 or not all(0.0 <= float(c) <= 1.0 for c in self.e):
            raise PreconditionError("restitution coefficients must lie in [0, 1]")


@dataclass(frozen=True)
class Obstacle:
    """Step of height ``h_o`` whose face sits at arc length ``s_o`` of the path.

    ``skew`` rotates the face normal away from the path tangent (rad).
    """

    s_o: float
    h_o: float
    width: float = 0.3
    skew: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.h_o < BikebotParams().R_w:
            raise PreconditionError("obstacle height must lie in (0, R_w)")
        if not self.width > 0:
            raise PreconditionError("obstacle width must be positive")


@dataclass(frozen=True)
class ContactGeometry:
    L: float
    phi_g: float
    phi_c: float
    # d phi_g / d varphi_b
    dphi_g: float


@dataclass(frozen=True)
class ImpactResult:
    qdot_plus: np.ndarray
    f_impulse: np.ndarray
    eps: np.ndarray
    cond: float


@dataclass(frozen=True)
class ImpactEvent:
    t_f: float
    q: np.ndarray
    qdot_minus: np.ndarray
    qdot_plus: np.ndarray
    qdot_star: np.ndarray
    f_impulse: np.ndarray
    h_o: float


def contact_offset(h_o: float, p: BikebotParams | None = None) -> float:
    """Horizontal distance from the wheel's ground contact to the edge contact."""
    p = p or BikebotParams()
    if not 0.0 <= h_o <= 2.0 * p.R_w:
        raise BadHeight(f"height {h_o} outside [0, 2 R_w]")
    return math.sqrt(max(2.0 * p.R_w * h_o - h_o * h_o, 0.0))


def contact_geometry(h_o: float, p: BikebotParams | None = None, psi: float = 0.0,
                     phi: float = 0.0, varphi_b: float = 0.0) -> ContactGeometry:
    """Edge-contact offset and impact angle for the current yaw, steering and roll."""
    p = p or BikebotParams()
    L = contact_offset(h_o, p)
    ratio = math.cos(p.epsilon) / math.cos(varphi_b)
    tphi = math.tan(phi)
    phi_g = math.atan(ratio * tphi)
    arg = ratio * tphi
    dphi_g = ratio * math.tan(varphi_b) * tphi / (1.0 + arg * arg)
    return ContactGeometry(L, phi_g, phi_g + psi, dphi_g)


def contact_point(q, h_o: float, phi: float, p: BikebotParams | None = None) -> np.ndarray:
    """Edge contact point for coordinates ``q`` (used for finite-difference checks)."""
    p = p or BikebotParams()
    x, y, z, psi, phib = np.asarray(q, dtype=float)
    g = contact_geometry(h_o, p, psi, phi, phib)
    return np.array([x + p.l * math.cos(psi) + g.L * math.cos(g.phi_c),
                     y + p.l * math.sin(psi) + g.L * math.sin(g.phi_c),
                     z + h_o])


def impact_jacobian(q, h_o: float, phi: float, p: BikebotParams | None = None) -> np.ndarray:
    """Analytic 3x5 derivative of the contact point w.r.t. ``q``."""
    p = p or BikebotParams()
    _, _, _, psi, phib = np.asarray(q, dtype=float)
    g = contact_geometry(h_o, p, psi, phi, phib)
    sc, cc = math.sin(g.phi_c), math.cos(g.phi_c)
    J = np.zeros((3, 5))
    J[0, 0] = J[1, 1] = J[2, 2] = 1.0
    J[0, 3] = -p.l * math.sin(psi) - g.L * sc
    J[1, 3] = p.l * math.cos(psi) + g.L * cc
    J[0, 4] = -g.L * sc * g.dphi_g
    J[1, 4] = g.L * cc * g.dphi_g
    return J


def inertia_matrix(p: BikebotParams | None = None) -> np.ndarray:
    p = p or BikebotParams()
    return np.diag([p.m_b, p.m_b, p.m_b, p.J_z, p.J_t])


def restitution_frame(J: np.ndarray, D: np.ndarray, phi_c: float) -> np.ndarray:
    """Orthonormal frame (rows) diagonalizing the contact mobility; row 0 near the wheel plane."""
    W = J @ np.linalg.solve(D, J.T)
    _, vecs = np.linalg.eigh(W[:2, :2])
    wheel = np.array([math.cos(phi_c), math.sin(phi_c)])
    k = int(np.argmax(np.abs(vecs.T @ wheel)))
    a = vecs[:, k] * (1.0 if vecs[:, k] @ wheel >= 0 else -1.0)
    b = np.array([-a[1], a[0]])
    return np.array([[a[0], a[1], 0.0], [b[0], b[1], 0.0], [0.0, 0.0, 1.0]])


def post_impact(q, qdot_minus, h_o: float, rest: RestitutionModel | None = None,
                p: BikebotParams | None = None, phi: float = 0.0) -> ImpactResult:
    """Post-impact generalized velocity and contact impulse."""
    p = p or BikebotParams()
    rest = rest or RestitutionModel()
    q = np.asarray(q, dtype=float).reshape(5)
    qd = np.asarray(qdot_minus, dtype=float).reshape(5)
    if not np.all(np.isfinite(qd)):
        raise PreconditionError("pre-impact velocity must be finite")
    J = impact_jacobian(q, h_o, phi, p)
    D = inertia_matrix(p)
    g = contact_geometry(h_o, p, q[3], phi, q[4])
    R = restitution_frame(J, D, g.phi_c)
    eps = R.T @ (np.asarray(rest.e) * (R @ (J @ qd)))
    A = np.block([[D, -J.T], [J, np.zeros((3, 3))]])
    cond = float(np.linalg.cond(A))
    if not cond < COND_MAX:
        raise SingularSystem(f"impact system ill-conditioned (cond={cond:.3g})")
    sol = np.linalg.solve(A, np.concatenate([D @ qd, eps]))
    return ImpactResult(sol[:5], sol[5:], eps, cond)


def generalized_velocity(s: BikebotState) -> np.ndarray:
    """``qdot`` of a riding state (no vertical motion, rear contact obeys the rolling constraint)."""
    return np.array([s.v * math.cos(s.psi), s.v * math.sin(s.psi), 0.0, s.dot_psi, s.dot_varphi_b])


def coordinates(s: BikebotState) -> np.ndarray:
    return np.array([s.x, s.y, 0.0, s.psi, s.varphi_b])


def project_to_planar(qdot_plus, psi: float) -> tuple[float, float, float]:
    """Speed along the heading, yaw rate and roll rate; vertical velocity is dropped."""
    qd = np.asarray(qdot_plus, dtype=float).reshape(5)
    v = qd[0] * math.cos(psi) + qd[1] * math.sin(psi)
    return float(v), float(qd[3]), float(qd[4])


def kinetic_energy(qdot, p: BikebotParams | None = None) -> float:
    qd = np.asarray(qdot, dtype=float)
    return 0.5 * float(qd @ inertia_matrix(p) @ qd)

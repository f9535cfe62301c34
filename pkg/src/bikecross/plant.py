"""Ground-truth wheel/step impact used by the simulator.

The controller's impact map (:mod:`bikecross.impact`) is a nominal model.  The
simulated robot instead hits the edge through a frictionless pivot: the
impulse acts along the line from the edge to the wheel hub, optionally
tilted sideways when the step face is skewed against the path.  The body is
described by forward speed, yaw rate, front-end lift and roll rate, with the
rear wheel rolling without side slip and the yaw/roll inertial coupling
``m_b h_G (l_G + l/2) cos(roll)`` of the riding model.  The lift degree of
freedom carries the share of the mass felt at the front axle when the body
pitches about the rear contact.

After the impact the steering servo keeps its angle, so the yaw rate is again
slaved to speed and steering; the roll rate and speed jumps are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics as dyn
from .dynamics import BikebotParams
from .errors import PreconditionError
from .impact import contact_geometry


@dataclass(frozen=True)
class TruthImpactModel:
    """Edge restitution and plant mismatch factors of the simulated robot."""

    e_n: float = 0.2
    mass_scale: float = 1.0
    h_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.e_n <= 1.0:
            raise PreconditionError("edge restitution must lie in [0, 1]")
        if not (self.mass_scale > 0 and self.h_scale > 0):
            raise PreconditionError("mismatch scales must be positive")

    def plant_params(self, p: BikebotParams) -> BikebotParams:
        return replace(p, m_b=p.m_b * self.mass_scale, h_G=p.h_G * self.h_scale)


@dataclass(frozen=True)
class TruthImpact:
    v: float
    dot_varphi_b: float
    dot_z: float
    # yaw rate right after the impact, before the steering servo re-imposes the kinematic one
    dot_psi_free: float
    impulse: float
    # applied generalized velocity (x, y, z, psi, varphi_b)
    qdot: np.ndarray


def truth_impact(X, h_o: float, skew: float, p: BikebotParams | None = None,
                 model: TruthImpactModel | None = None) -> TruthImpact:
    """Velocity jump of a packed riding state hitting a step of height ``h_o``."""
    p = p or BikebotParams()
    model = model or TruthImpactModel()
    pt = model.plant_params(p)
    X = np.asarray(X, dtype=float)
    psi, phib, dphib = X[dyn.IPSI], X[dyn.IPHIB], X[dyn.IDPHIB]
    phi, v = X[dyn.IPHI], X[dyn.IV]
    dpsi = float(dyn._yaw_rate(v, phi, phib, pt))
    g = contact_geometry(h_o, pt, psi, phi, phib)
    R = pt.R_w
    arm = pt.l_G + pt.l / 2.0
    coupling = pt.m_b * pt.h_G * arm * math.cos(phib)
    M = np.array([
        [pt.m_b, 0.0, 0.0, 0.0],
        [0.0, pt.J_z + pt.m_b * arm * arm, 0.0, -coupling],
        [0.0, 0.0, pt.m_b * (arm / pt.l) ** 2, 0.0],
        [0.0, -coupling, 0.0, pt.J_t],
    ])
    lateral = np.array([-math.sin(psi), math.cos(psi), 0.0])
    wheel = np.array([-math.sin(g.phi_c), math.cos(g.phi_c), 0.0])
    # contact velocity per unit of (v, dpsi, dz, dphib)
    J = np.column_stack([
        [math.cos(psi), math.sin(psi), 0.0],
        pt.l * lateral + g.L * wheel,
        [0.0, 0.0, 1.0],
        g.L * g.dphi_g * wheel - h_o * math.cos(phib) * lateral,
    ])
    face = psi + skew
    normal = np.array([-g.L / R * math.cos(face), -g.L / R * math.sin(face), (R - h_o) / R])
    nu = np.array([v, dpsi, 0.0, dphib])
    w = J.T @ normal
    approach = float(w @ nu)
    if approach >= 0.0:
        lam = 0.0
    else:
        lam = -(1.0 + model.e_n) * approach / float(w @ np.linalg.solve(M, w))
    nu_plus = nu + np.linalg.solve(M, w) * lam
    v_plus = max(float(nu_plus[0]), 0.0)
    dpsi_kin = float(dyn._yaw_rate(v_plus, phi, phib, pt))
    qdot = np.array([v_plus * math.cos(psi), v_plus * math.sin(psi), nu_plus[2], dpsi_kin, nu_plus[3]])
    return TruthImpact(v_plus, float(nu_plus[3]), float(nu_plus[2]), float(nu_plus[1]), lam, qdot)

"""Nonlinear viscoelastic reference material.

A linear spring in parallel with a Maxwell element whose viscosity
decays with the magnitude of the overstress carried by the Maxwell
spring:

    psi  = 1/2 eps : C_eq : eps + 1/2 eps_el : C_ov : eps_el
    phi  = 1/2 qdot : V(eps_el) : qdot
    V    = [(1 - o) exp(-(|sig_ov| / a)^b) + o] * V0

with isotropic C_eq, C_ov, V0 and ``sig_ov = C_ov : eps_el``.  The decay
factor stays in [o, 1], so V remains positive definite and the material
is a genuine instance of the two-potential framework.

The class exposes the same three potential callbacks as the network
model, so the implicit solver and every structural property test treat
them interchangeably; module-level wrappers provide the user-facing
operations on tensors.  This material is the ground truth behind all
synthetic datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import mandel, solver
from .mandel import IsoStiffness, SymTensor2


@dataclass(frozen=True)
class RefMaterialParams:
    """Moduli in MPa, viscosities in MPa s.

    ``a`` is the overstress magnitude (MPa) governing the viscosity
    decay, ``b`` the decay exponent, and ``o`` the residual viscosity
    fraction retained under large overstress.  The viscosity factor is
    smooth at zero overstress for b >= 2 (the default).
    """

    k_eq: float = 500.0
    g_eq: float = 300.0
    k_ov: float = 1000.0
    g_ov: float = 700.0
    eta_k: float = 400.0
    eta_d: float = 200.0
    a: float = 10.0
    b: float = 2.0
    o: float = 0.1

    def __post_init__(self):
        for f in ("k_eq", "g_eq", "k_ov", "g_ov", "eta_k", "eta_d", "a", "b"):
            if not getattr(self, f) > 0.0:
                raise ValueError(f"reference material parameter {f} must be positive")
        if not 0.0 < self.o <= 1.0:
            raise ValueError("residual viscosity fraction o must lie in (0, 1]")

    @classmethod
    def from_mapping(cls, d) -> "RefMaterialParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown reference material parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def _iso_quadratic(bulk, shear, t6):
    """1/2 t : (3 bulk K + 2 shear D) : t for a Mandel payload."""
    tr = mandel.trace6(t6)
    dev = mandel.deviator6(t6)
    return ((tr * tr) * bulk + ad.vdot(dev, dev) * (2.0 * shear)) * 0.5


class ReferenceMaterial:
    """Potential callbacks over Mandel payloads (solver-facing)."""

    def __init__(self, params: RefMaterialParams | None = None):
        self.params = params if params is not None else RefMaterialParams()

    def free_energy_eq(self, eps6):
        p = self.params
        return _iso_quadratic(p.k_eq, p.g_eq, eps6)

    def free_energy_ov(self, epsel6):
        p = self.params
        return _iso_quadratic(p.k_ov, p.g_ov, epsel6)

    def overstress(self, epsel6):
        p = self.params
        vol = mandel.volumetric6(epsel6)
        return vol * (3.0 * p.k_ov) + (epsel6 - vol) * (2.0 * p.g_ov)

    def viscosity_factor(self, epsel6):
        p = self.params
        s = self.overstress(epsel6)
        u = ad.vdot(s, s) * (1.0 / (p.a * p.a))
        return ad.exp(-ad.power(u, 0.5 * p.b)) * (1.0 - p.o) + p.o

    def dissipation(self, qdot6, epsel6):
        p = self.params
        return self.viscosity_factor(epsel6) * _iso_quadratic(p.eta_k, p.eta_d, qdot6)


# ---------------------------------------------------------------------------
# user-facing operations
# ---------------------------------------------------------------------------


def ref_free_energy(p: RefMaterialParams, eps: SymTensor2, eps_in: SymTensor2) -> float:
    mat = ReferenceMaterial(p)
    return float(
        ad.val_of(mat.free_energy_eq(eps.m)) + ad.val_of(mat.free_energy_ov(eps.m - eps_in.m))
    )


def ref_viscosity(p: RefMaterialParams, eps: SymTensor2, eps_in: SymTensor2) -> IsoStiffness:
    factor = float(ad.val_of(ReferenceMaterial(p).viscosity_factor(eps.m - eps_in.m)))
    return IsoStiffness(bulk=factor * p.eta_k, shear=factor * p.eta_d)


def ref_dissipation_potential(
    p: RefMaterialParams, qdot: SymTensor2, eps: SymTensor2, eps_in: SymTensor2
) -> float:
    return float(ad.val_of(ReferenceMaterial(p).dissipation(qdot.m, eps.m - eps_in.m)))


def ref_step(
    p: RefMaterialParams,
    prev: solver.MaterialState,
    eps_new: SymTensor2,
    dt: float,
    cfg: solver.SolverConfig | None = None,
) -> solver.StepResult:
    return solver.step(ReferenceMaterial(p), prev, eps_new, dt, cfg)


def ref_predict_sequence(
    p: RefMaterialParams, t, eps, cfg: solver.SolverConfig | None = None
) -> list[solver.MaterialState]:
    return solver.predict_sequence(ReferenceMaterial(p), t, eps, cfg)

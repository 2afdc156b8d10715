"""Two-potential constitutive model built from input-convex networks.

The free energy splits into an equilibrium part in the total strain and
a non-equilibrium part in the elastic strain ``eps_el = eps - q``, with
a convex dissipation potential in the internal-variable rate ``qdot``:

    psi(eps, q)    = psi_eq(eps) + psi_ov(eps_el)
    phi(qdot; eps_el)  convex in qdot, minimum 0 at qdot = 0

Each branch is a raw network value plus structural correction terms
that pin the value and the first derivative at the rest state, so the
model is physically meaningful at any parameter values:

    psi branch:  s * [ N(x) - N(0) - (dN/dx_1 at 0) * x_1 ]
    phi:         s * [ N(xc, xn) - N(0, xn) - (dN/dxc at (0, xn)) . xc ]

In invariant mode the branch inputs are convex invariants of the scaled
tensor, `(tr, tr^2, tr^4)` for the convex arguments and the signed set
`(tr, tr^2, tr^3)` for the non-convex conditioning argument of phi; the
networks are the non-decreasing variants, which makes both potentials
isotropic and convex in their tensor arguments.  In coordinate mode the
scaled Mandel coordinates feed plain convex networks directly.  Because
the trace is the only invariant with a non-vanishing gradient at the
origin, correcting the first input channel suffices in invariant mode;
coordinate mode subtracts the full gradient at the origin.

All evaluators are payload-generic: tensor arguments may be arrays with
a trailing Mandel axis (leading axes batch), reverse-mode ``Var`` nodes
or forward-mode duals, and the network parameters may be ``Var`` leaves
during training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import mandel
from . import networks as nn
from .mandel import SymTensor2

MODES = ("invariant", "coordinate")

_ZERO3 = np.zeros(3)
_ZERO6 = np.zeros(6)
_E1_COL3 = np.array([[1.0], [0.0], [0.0]])  # seed on the first invariant only


@dataclass
class PotentialModel:
    mode: str
    seed: int
    psi_eq: nn.FicnnParams
    psi_ov: nn.FicnnParams
    phi: nn.PicnnParams
    normalizer: nn.Normalizer

    # payload-generic surface shared with the reference material -------------

    def free_energy_eq(self, eps6):
        norm = self.normalizer
        return _convex_branch(self.psi_eq, self.mode, norm.s_eps, norm.s_psi, eps6)

    def free_energy_ov(self, epsel6):
        norm = self.normalizer
        return _convex_branch(self.psi_ov, self.mode, norm.s_eps, norm.s_psi, epsel6)

    def dissipation(self, qdot6, epsel6):
        norm = self.normalizer
        xc_t = qdot6 * (1.0 / norm.s_qdot)
        xn_t = epsel6 * (1.0 / norm.s_eps)
        if self.mode == "invariant":
            xc = ad.stack_last(mandel.invariants_convex(xc_t))
            xn = ad.stack_last(mandel.invariants_signed(xn_t))
            zero_c = _ZERO3
        else:
            xc, xn = xc_t, xn_t
            zero_c = _ZERO6
        raw = nn.picnn_forward(self.phi, xc, xn)
        # the probe's value channel is the network at zero rate, so one
        # dual sweep yields both correction terms
        lvl = ad.fresh_level()
        if self.mode == "invariant":
            probe = ad.Dual(zero_c, _E1_COL3, lvl)
            out = nn.picnn_forward(self.phi, probe, xn)
            lin = out.tangent(0) * ad.take_last(xc, 0)
        else:
            probe = ad.Dual(zero_c, np.eye(6), lvl)
            out = nn.picnn_forward(self.phi, probe, xn)
            lin = ad.vdot(xc, out.tan)
        return (raw - out.val - lin) * self.normalizer.s_phi


def _convex_branch(params, mode, s_in, s_out, t6):
    """One free-energy branch: corrected network value, in physical units."""
    x = t6 * (1.0 / s_in)
    # the probe's value channel is the network at the origin, so one
    # dual sweep yields both correction terms
    lvl = ad.fresh_level()
    if mode == "invariant":
        feats = ad.stack_last(mandel.invariants_convex(x))
        raw = nn.ficnn_forward(params, feats)
        out = nn.ficnn_forward(params, ad.Dual(_ZERO3, _E1_COL3, lvl))
        lin = out.tangent(0) * ad.take_last(feats, 0)
    else:
        raw = nn.ficnn_forward(params, x)
        out = nn.ficnn_forward(params, ad.Dual(_ZERO6, np.eye(6), lvl))
        lin = ad.vdot(x, out.tan)
    return (raw - out.val - lin) * s_out


# ---------------------------------------------------------------------------
# construction and validation
# ---------------------------------------------------------------------------


def build_model(mode: str, normalizer: nn.Normalizer, seed: int) -> PotentialModel:
    """Assemble a fresh model with the standard architecture for ``mode``."""
    if mode == "invariant":
        ficnn = nn.FicnnArch(n_in=3, widths=(10, 1), non_decreasing=True)
        picnn = nn.PicnnArch(
            n_convex=3, n_nonconvex=3, u_widths=(10, 1), v_widths=(10,),
            non_decreasing_convex=True,
        )
    elif mode == "coordinate":
        ficnn = nn.FicnnArch(n_in=6, widths=(20, 1))
        picnn = nn.PicnnArch(
            n_convex=6, n_nonconvex=6, u_widths=(20, 1), v_widths=(20,),
        )
    else:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    eq_seed, ov_seed, phi_seed = np.random.SeedSequence(seed).generate_state(3)
    model = PotentialModel(
        mode=mode,
        seed=seed,
        psi_eq=nn.init(ficnn, int(eq_seed)),
        psi_ov=nn.init(ficnn, int(ov_seed)),
        phi=nn.init(picnn, int(phi_seed)),
        normalizer=normalizer,
    )
    validate_model(model)
    return model


def validate_model(model: PotentialModel) -> None:
    if model.mode not in MODES:
        raise ValueError(f"unknown mode {model.mode!r}; expected one of {MODES}")
    invariant = model.mode == "invariant"
    width = 3 if invariant else 6
    for name, p in (("psi_eq", model.psi_eq), ("psi_ov", model.psi_ov)):
        if p.arch.n_in != width or p.arch.non_decreasing != invariant:
            raise ValueError(f"{name} architecture inconsistent with {model.mode} mode")
    phi = model.phi.arch
    if (
        phi.n_convex != width
        or phi.n_nonconvex != width
        or phi.non_decreasing_convex != invariant
    ):
        raise ValueError(f"phi architecture inconsistent with {model.mode} mode")


# ---------------------------------------------------------------------------
# tensor-level operations
# ---------------------------------------------------------------------------


def free_energy(model: PotentialModel, eps: SymTensor2, q: SymTensor2) -> float:
    """psi(eps, q) in MPa; exactly zero at the rest state."""
    total = model.free_energy_eq(eps.m) + model.free_energy_ov(eps.m - q.m)
    return float(ad.val_of(total))


def stress(model: PotentialModel, eps: SymTensor2, q: SymTensor2) -> SymTensor2:
    """sigma = d psi / d eps."""
    g = ad.grad_input(
        lambda e6: model.free_energy_eq(e6) + model.free_energy_ov(e6 - q.m), eps.m
    )
    return SymTensor2(g)


def internal_force_psi(
    model: PotentialModel, eps: SymTensor2, q: SymTensor2
) -> SymTensor2:
    """pi = -d psi / d q = d psi_ov / d eps_el."""
    return SymTensor2(ad.grad_input(model.free_energy_ov, eps.m - q.m))


def dissipation_potential(
    model: PotentialModel, qdot: SymTensor2, eps: SymTensor2, q: SymTensor2
) -> float:
    """phi(qdot; eps, q) in MPa/s; zero with zero gradient at qdot = 0."""
    return float(ad.val_of(model.dissipation(qdot.m, eps.m - q.m)))


def internal_force_phi(
    model: PotentialModel, qdot: SymTensor2, eps: SymTensor2, q: SymTensor2
) -> SymTensor2:
    """pi_hat = d phi / d qdot."""
    epsel = eps.m - q.m
    return SymTensor2(ad.grad_input(lambda r: model.dissipation(r, epsel), qdot.m))


# ---------------------------------------------------------------------------
# checkpoint serialization ("gsmnet-ckpt-v1")
# ---------------------------------------------------------------------------


def model_to_payload(model: PotentialModel) -> dict:
    return {
        "schema": nn.CKPT_SCHEMA,
        "mode": model.mode,
        "seed": model.seed,
        "psi_eq": nn.ficnn_to_payload(model.psi_eq),
        "psi_ov": nn.ficnn_to_payload(model.psi_ov),
        "phi": nn.picnn_to_payload(model.phi),
        "normalizer": nn.normalizer_to_payload(model.normalizer),
    }


def model_from_payload(d: dict) -> PotentialModel:
    if d.get("schema") != nn.CKPT_SCHEMA:
        raise ValueError(
            f"unsupported checkpoint schema {d.get('schema')!r}; "
            f"expected {nn.CKPT_SCHEMA!r}"
        )
    model = PotentialModel(
        mode=d["mode"],
        seed=int(d["seed"]),
        psi_eq=nn.ficnn_from_payload(d["psi_eq"]),
        psi_ov=nn.ficnn_from_payload(d["psi_ov"]),
        phi=nn.picnn_from_payload(d["phi"]),
        normalizer=nn.normalizer_from_payload(d["normalizer"]),
    )
    validate_model(model)
    return model


def save_checkpoint(model: PotentialModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_payload(model), indent=1) + "\n")


def load_checkpoint(path) -> PotentialModel:
    return model_from_payload(json.loads(Path(path).read_text()))

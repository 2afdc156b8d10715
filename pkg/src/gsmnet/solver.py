"""Implicit time integration of the two-potential constitutive response.

Each step advances the internal variable with an implicit Euler scheme,
solving the force balance between the two potentials for the unknown
rate ``qdot``:

    R(qdot) = pi(eps_new, q_prev + dt qdot) - pihat(qdot, ...) = 0

where ``pi = d psi_ov / d eps_el`` and ``pihat = d phi / d qdot``.  The
root is found with a damped Newton iteration whose 6x6 Jacobian couples
the Hessians of both potentials, including the chain terms through
``q = q_prev + dt qdot``.  Forces and Jacobians come from one
second-order forward sweep per potential.

The solver works on any model exposing ``free_energy_eq``,
``free_energy_ov`` and ``dissipation`` over Mandel payloads — the
network-based model and the closed-form reference material alike.  All
arithmetic stays payload-generic, so a training loop may run the solver
with parameters wrapped as reverse-mode variables and differentiate
through the unrolled iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mandel import SymTensor2

_EYE6 = np.eye(6)


@dataclass(frozen=True)
class MaterialState:
    t: float
    eps: SymTensor2
    sig: SymTensor2
    q: SymTensor2

    @classmethod
    def rest(cls, t: float = 0.0) -> "MaterialState":
        zero = SymTensor2.zero()
        return cls(t=t, eps=zero, sig=zero, q=zero)


@dataclass(frozen=True)
class SolverConfig:
    """Newton controls.

    ``tolerance`` is the residual norm bound in MPa; None resolves to
    1e-8 times the model's stress scale (its normalizer's stress
    half-range when present, else 1 MPa).
    """

    tolerance: float | None = None
    max_iterations: int = 20
    shrink: float = 0.5
    max_backtracks: int = 10

    def __post_init__(self):
        if self.tolerance is not None and not self.tolerance > 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink factor must lie in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be non-negative")


@dataclass(frozen=True)
class StepResult:
    state: MaterialState
    iterations: int
    residual_norm: float
    converged: bool


class SolverError(RuntimeError):
    """Newton failed; carries the best iterate seen."""

    def __init__(self, message, *, iterations, residual_norm, best_qdot,
                 step_index=None):
        where = "" if step_index is None else f" (step {step_index})"
        super().__init__(
            f"{message}{where}: residual {residual_norm:.3e} MPa "
            f"after {iterations} iterations"
        )
        self.iterations = iterations
        self.residual_norm = residual_norm
        self.best_qdot = best_qdot
        self.step_index = step_index

    def with_step(self, index) -> "SolverError":
        return SolverError(
            "time step failed",
            iterations=self.iterations,
            residual_norm=self.residual_norm,
            best_qdot=self.best_qdot,
            step_index=index,
        )


@dataclass
class RawStep:
    """Payload-level step outcome (entries may be live ``Var`` expressions)."""

    qdot: object
    q: object
    sig: object
    iterations: int
    residual_norm: float
    converged: bool


def resolve_tolerance(model, cfg: SolverConfig) -> float:
    if cfg.tolerance is not None:
        return cfg.tolerance
    norm = getattr(model, "normalizer", None)
    scale = norm.s_sig if norm is not None else 1.0
    return 1e-8 * scale


def _forces_and_jacobian(model, eps_new, q_prev, dt, qd):
    """Residual R, Newton matrix J = dR/dqdot, and pi at the iterate."""
    e_el = eps_new - q_prev - dt * qd
    lvl = ad.fresh_level()
    out = model.free_energy_ov(ad.Dual2(e_el, _EYE6, (-dt) * _EYE6, 0.0, lvl))
    pi, dpi = out.t1, out.t12
    lvl = ad.fresh_level()
    out = model.dissipation(
        ad.Dual2(qd, _EYE6, _EYE6, 0.0, lvl),
        ad.Dual2(e_el, 0.0, (-dt) * _EYE6, 0.0, lvl),
    )
    pihat, dpihat = out.t1, out.t12
    jac = dpi - dpihat
    if np.ndim(ad.val_of(jac)) != 2:
        # a potential with vanishing curvature leaves a scalar zero sentinel
        jac = jac + np.zeros((6, 6))
    return pi - pihat, jac, pi


def _residual_only(model, eps_new, q_prev, dt, qd):
    e_el = eps_new - q_prev - dt * qd
    lvl = ad.fresh_level()
    pi = model.free_energy_ov(ad.Dual(e_el, _EYE6, lvl)).tan
    lvl = ad.fresh_level()
    pihat = model.dissipation(ad.Dual(qd, _EYE6, lvl), e_el).tan
    return pi - pihat


def _equilibrium_stress(model, eps_new):
    lvl = ad.fresh_level()
    return model.free_energy_eq(ad.Dual(eps_new, _EYE6, lvl)).tan


def _norm(payload) -> float:
    return float(np.linalg.norm(ad.val_of(payload)))


def _solve_newton_system(j, r):
    """delta solving J delta = -R, with one regularized retry."""
    try:
        delta = ad.solve_square(j, -r)
        if np.all(np.isfinite(ad.val_of(delta))):
            return delta
    except np.linalg.LinAlgError:
        pass
    lam = 1e-8 * float(np.linalg.norm(ad.val_of(j)))
    lam = lam if lam > 0.0 else 1e-12
    delta = ad.solve_square(j + lam * _EYE6, -r)
    if not np.all(np.isfinite(ad.val_of(delta))):
        raise np.linalg.LinAlgError("Newton system remains singular")
    return delta


def step_raw(
    model,
    eps_new,
    q_prev,
    dt: float,
    cfg: SolverConfig | None = None,
    qdot0=None,
) -> RawStep:
    """One implicit Euler step on raw Mandel payloads.

    ``qdot0`` is an optional Newton starting guess (the rest rate by
    default); along a smooth path the previous step's rate typically
    converges in far fewer iterations.
    """
    cfg = cfg if cfg is not None else SolverConfig()
    if not dt > 0.0:
        raise ValueError("time increment must be positive")
    tol = resolve_tolerance(model, cfg)
    qd = np.zeros(6) if qdot0 is None else qdot0
    res, jac, pi = _forces_and_jacobian(model, eps_new, q_prev, dt, qd)
    rnorm = _norm(res)
    best_rnorm, best_qd, iterations = rnorm, qd, 0
    while rnorm > tol and iterations < cfg.max_iterations:
        try:
            delta = _solve_newton_system(jac, res)
        except np.linalg.LinAlgError:
            raise SolverError(
                "singular Newton matrix",
                iterations=iterations,
                residual_norm=best_rnorm,
                best_qdot=np.asarray(ad.val_of(best_qd)),
            ) from None
        # optimistic full step: evaluate forces and Jacobian together so an
        # accepted step carries its Jacobian into the next iteration for free
        cand = qd + delta
        c_res, c_jac, c_pi = _forces_and_jacobian(model, eps_new, q_prev, dt, cand)
        c_norm = _norm(c_res)
        if not (np.isfinite(c_norm) and c_norm < rnorm):
            cand, alpha = None, cfg.shrink
            for _ in range(cfg.max_backtracks):
                probe = qd + alpha * delta
                p_norm = _norm(_residual_only(model, eps_new, q_prev, dt, probe))
                if np.isfinite(p_norm) and p_norm < rnorm:
                    cand = probe
                    break
                alpha *= cfg.shrink
            if cand is None:
                raise SolverError(
                    "line search stalled",
                    iterations=iterations,
                    residual_norm=best_rnorm,
                    best_qdot=np.asarray(ad.val_of(best_qd)),
                )
            c_res, c_jac, c_pi = _forces_and_jacobian(model, eps_new, q_prev, dt, cand)
            c_norm = _norm(c_res)
        qd, res, jac, pi, rnorm = cand, c_res, c_jac, c_pi, c_norm
        iterations += 1
        if rnorm < best_rnorm:
            best_rnorm, best_qd = rnorm, qd
    if rnorm > tol:
        raise SolverError(
            "no convergence",
            iterations=iterations,
            residual_norm=best_rnorm,
            best_qdot=np.asarray(ad.val_of(best_qd)),
        )
    q_new = q_prev + dt * qd
    sig = _equilibrium_stress(model, eps_new) + pi
    return RawStep(
        qdot=qd,
        q=q_new,
        sig=sig,
        iterations=iterations,
        residual_norm=rnorm,
        converged=True,
    )


def step(
    model,
    prev: MaterialState,
    eps_new: SymTensor2,
    dt: float,
    cfg: SolverConfig | None = None,
) -> StepResult:
    """One implicit Euler step between material states."""
    raw = step_raw(model, eps_new.m, prev.q.m, dt, cfg)
    state = MaterialState(
        t=prev.t + dt,
        eps=eps_new,
        sig=SymTensor2(np.asarray(ad.val_of(raw.sig))),
        q=SymTensor2(np.asarray(ad.val_of(raw.q))),
    )
    return StepResult(
        state=state,
        iterations=raw.iterations,
        residual_norm=raw.residual_norm,
        converged=raw.converged,
    )


def predict_sequence(model, t, eps, cfg: SolverConfig | None = None) -> list[MaterialState]:
    """Integrate a strain path given as arrays ``t`` (N+1,) and ``eps``
    (N+1, 6); row 0 is the rest state.  Returns one state per row."""
    t = np.asarray(t, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if t.ndim != 1 or eps.shape != (t.size, 6):
        raise ValueError("expected t of shape (N+1,) and eps of shape (N+1, 6)")
    if t.size < 1:
        raise ValueError("path must contain at least the initial state")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("times must be strictly increasing")
    if np.any(np.abs(eps[0]) > 1e-12):
        raise ValueError("path must start at the unstrained rest state")
    states = [MaterialState.rest(t=float(t[0]))]
    q = np.zeros(6)
    for n in range(1, t.size):
        try:
            raw = step_raw(model, eps[n], q, float(t[n] - t[n - 1]), cfg)
        except SolverError as err:
            raise err.with_step(n) from None
        q = np.asarray(ad.val_of(raw.q))
        states.append(
            MaterialState(
                t=float(t[n]),
                eps=SymTensor2(eps[n]),
                sig=SymTensor2(np.asarray(ad.val_of(raw.sig))),
                q=SymTensor2(q),
            )
        )
    return states


def stresses_of(states: list[MaterialState]) -> np.ndarray:
    """Stack the stresses of a predicted sequence into an (N+1, 6) array."""
    return np.stack([s.sig.m for s in states])

"""Symmetric second-order tensors in Mandel notation.

A symmetric 3x3 tensor is stored as the 6-vector

    (T11, T22, T33, sqrt(2) T23, sqrt(2) T13, sqrt(2) T12)

The sqrt(2) weights make the representation orthonormal: Frobenius inner
products and norms of tensors are plain dot products of their 6-vectors, which
the Newton solver and the loss functions rely on directly.  This ordering is
also the canonical serialization order for every 6-vector in dataset files.

Two layers live here:

* :class:`SymTensor2` / :class:`IsoStiffness` — user-facing values with
  validation and the documented operations (matrix round-trip, the convex
  invariant basis (tr t, tr t^2, tr t^4) and its closed-form gradients,
  isotropic rank-4 application).

* payload-generic helpers (``trace6``, ``mandel_symprod``, ``deviator6``,
  ``invariants_convex``, ...) operating on anything shaped (..., 6) whose
  elements support the autodiff package's generic operations — raw arrays,
  tape nodes, forward duals.  The potentials and the solver are written
  against these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SQRT2 = float(np.sqrt(2.0))

# Mandel image of the identity tensor; doubles as d(tr t)/dt.
IDENTITY6 = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# payload-generic algebra on (..., 6) Mandel stacks
# ---------------------------------------------------------------------------


def trace6(m):
    """tr t for a Mandel stack."""
    return ad.vdot(m, IDENTITY6)


def volumetric6(m):
    """Spherical projection (tr t / 3) * identity, as a Mandel stack."""
    return ad.vexpand(trace6(m) * (1.0 / 3.0)) * IDENTITY6


def deviator6(m):
    """Deviatoric projection t - (tr t / 3) identity."""
    return m + (-volumetric6(m))


def mandel_symprod(a, b):
    """Mandel image of the symmetrized product (A B + B A) / 2.

    Bilinear and self-adjoint in each argument under the Frobenius product;
    ``mandel_symprod(m, m)`` is the Mandel image of the matrix square.
    """
    da, db = isinstance(a, (ad.Dual, ad.Dual2)), isinstance(b, (ad.Dual, ad.Dual2))
    if da or db:
        la, lb = _lvl(a), _lvl(b)
        if la != lb:
            hi, lo = (a, b) if la > lb else (b, a)
            return _symprod_dual_const(hi, lo)
        return _symprod_dual_dual(a, b)
    if isinstance(a, ad.Var) or isinstance(b, ad.Var):
        return _symprod_var(a, b)
    return _symprod_raw(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def mandel_square(m):
    """Mandel image of the matrix square t^2 (one symmetrized product)."""
    return mandel_symprod(m, m)


def _lvl(x):
    return x.lvl if isinstance(x, (ad.Dual, ad.Dual2)) else 0


def _symprod_raw(a, b):
    if a.shape != b.shape:
        a, b = np.broadcast_arrays(a, b)
    a0, a1, a2, a3, a4, a5 = (a[..., i] for i in range(6))
    b0, b1, b2, b3, b4, b5 = (b[..., i] for i in range(6))
    h = 0.5
    r = 0.5 / SQRT2
    out = np.empty(a.shape)
    out[..., 0] = a0 * b0 + h * (a4 * b4 + a5 * b5)
    out[..., 1] = a1 * b1 + h * (a3 * b3 + a5 * b5)
    out[..., 2] = a2 * b2 + h * (a3 * b3 + a4 * b4)
    out[..., 3] = r * (a4 * b5 + a5 * b4) + h * (a3 * (b1 + b2) + b3 * (a1 + a2))
    out[..., 4] = r * (a3 * b5 + a5 * b3) + h * (a4 * (b0 + b2) + b4 * (a0 + a2))
    out[..., 5] = r * (a3 * b4 + a4 * b3) + h * (a5 * (b0 + b1) + b5 * (a0 + a1))
    return out


def _symprod_var(a, b):
    ad_ = a.data if isinstance(a, ad.Var) else np.asarray(a, dtype=np.float64)
    bd = b.data if isinstance(b, ad.Var) else np.asarray(b, dtype=np.float64)
    data = _symprod_raw(ad_, bd)

    def vjp(g, a=a, b=b, ad_=ad_, bd=bd):
        g = np.asarray(g)
        if isinstance(a, ad.Var):
            a._acc(_unb(_symprod_raw(g, bd), ad_.shape))
        if isinstance(b, ad.Var):
            b._acc(_unb(_symprod_raw(g, ad_), bd.shape))

    return ad.Var(data, vjp)


def _unb(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _sp_tan(t, v):
    """symprod between a tangent payload (..., 6, D) and a value (..., 6)."""
    if _is0(t):
        return 0.0
    out = mandel_symprod(ad.vmove(t, -2, -1), ad.vexpand(v, -2))
    return ad.vmove(out, -1, -2)


def _sp_tan2(t, v):
    """symprod between (..., 6, D1, D2) and (..., 6)."""
    if _is0(t):
        return 0.0
    out = mandel_symprod(ad.vmove(t, -3, -1), ad.vexpand(ad.vexpand(v, -2), -2))
    return ad.vmove(out, -1, -3)


def _sp_cross(t1, t2):
    """symprod between tangents (..., 6, D1) and (..., 6, D2) -> (..., 6, D1, D2)."""
    if _is0(t1) or _is0(t2):
        return 0.0
    u = ad.vmove(ad.vexpand(t1), -3, -1)          # (..., D1, 1, 6)
    v = ad.vmove(ad.vexpand(t2, -2), -3, -1)      # (..., 1, D2, 6)
    return ad.vmove(mandel_symprod(u, v), -1, -3)  # (..., 6, D1, D2)


def _is0(t):
    return isinstance(t, float) and t == 0.0


def _symprod_dual_const(x, c):
    if isinstance(x, ad.Dual):
        return ad.Dual(mandel_symprod(x.val, c), _sp_tan(x.tan, c), x.lvl)
    return ad.Dual2(
        mandel_symprod(x.val, c),
        _sp_tan(x.t1, c),
        _sp_tan(x.t2, c),
        _sp_tan2(x.t12, c),
        x.lvl,
    )


def _symprod_dual_dual(a, b):
    if isinstance(a, ad.Dual) != isinstance(b, ad.Dual):
        raise TypeError("mixed Dual/Dual2 at one level")
    if isinstance(a, ad.Dual):
        tan = _add(_sp_tan(a.tan, b.val), _sp_tan(b.tan, a.val))
        return ad.Dual(mandel_symprod(a.val, b.val), tan, a.lvl)
    t12 = _add(
        _add(_sp_tan2(a.t12, b.val), _sp_tan2(b.t12, a.val)),
        _add(_sp_cross(a.t1, b.t2), _sp_cross(b.t1, a.t2)),
    )
    return ad.Dual2(
        mandel_symprod(a.val, b.val),
        _add(_sp_tan(a.t1, b.val), _sp_tan(b.t1, a.val)),
        _add(_sp_tan(a.t2, b.val), _sp_tan(b.t2, a.val)),
        t12,
        a.lvl,
    )


def _add(a, b):
    if _is0(a):
        return b
    if _is0(b):
        return a
    return a + b


def invariants_convex(m):
    """(tr t, tr t^2, tr t^4): each convex in t, the last two non-negative.

    tr t^4 is evaluated as the squared Frobenius norm of t^2 — one matrix
    square instead of a fourth power.
    """
    sq = mandel_square(m)
    return trace6(m), ad.vdot(m, m), ad.vdot(sq, sq)


def invariants_signed(m):
    """(tr t, tr t^2, tr t^3): the unconstrained feature set.

    tr t^3 is the Frobenius product of t with t^2 (both symmetric).
    """
    sq = mandel_square(m)
    return trace6(m), ad.vdot(m, m), ad.vdot(m, sq)


# ---------------------------------------------------------------------------
# user-facing values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymTensor2:
    """A symmetric second-order tensor as a Mandel 6-vector."""

    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        if self.m.shape != (6,):
            raise ValueError(f"Mandel vector must have shape (6,), got {self.m.shape}")

    @staticmethod
    def zero():
        return SymTensor2(np.zeros(6))

    @staticmethod
    def identity():
        return SymTensor2(IDENTITY6.copy())

    @staticmethod
    def from_matrix(mat, tol=1e-12):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {mat.shape}")
        scale = max(float(np.max(np.abs(mat))), 1.0)
        if np.max(np.abs(mat - mat.T)) > tol * scale:
            raise ValueError("matrix is not symmetric within tolerance")
        sym = 0.5 * (mat + mat.T)
        return SymTensor2(
            np.array(
                [
                    sym[0, 0],
                    sym[1, 1],
                    sym[2, 2],
                    SQRT2 * sym[1, 2],
                    SQRT2 * sym[0, 2],
                    SQRT2 * sym[0, 1],
                ]
            )
        )

    def to_matrix(self):
        m = self.m
        r = 1.0 / SQRT2
        return np.array(
            [
                [m[0], r * m[5], r * m[4]],
                [r * m[5], m[1], r * m[3]],
                [r * m[4], r * m[3], m[2]],
            ]
        )

    # -- algebra -------------------------------------------------------------

    def __add__(self, other):
        return SymTensor2(self.m + other.m)

    def __sub__(self, other):
        return SymTensor2(self.m - other.m)

    def __mul__(self, c):
        return SymTensor2(self.m * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return SymTensor2(-self.m)

    def dot(self, other):
        """Frobenius inner product (a plain dot product in Mandel form)."""
        return float(self.m @ other.m)

    def norm(self):
        return float(np.linalg.norm(self.m))

    def trace(self):
        return float(self.m[:3].sum())

    def dev(self):
        return SymTensor2(deviator6(self.m))


@dataclass(frozen=True)
class IsoStiffness:
    """Isotropic rank-4 tensor 3K * vol-projector + 2G * dev-projector.

    ``bulk`` and ``shear`` are moduli in MPa for elastic use or viscosities in
    MPa s for viscous use; both must be >= 0 so the represented tensor is
    positive semidefinite.
    """

    bulk: float
    shear: float

    def __post_init__(self):
        if self.bulk < 0 or self.shear < 0:
            raise ValueError("isotropic stiffness moduli must be non-negative")


def apply_iso(c: IsoStiffness, t: SymTensor2) -> SymTensor2:
    """(3K K + 2G D) : t — spherical and deviatoric parts scale independently."""
    vol = volumetric6(t.m)
    return SymTensor2(3.0 * c.bulk * vol + 2.0 * c.shear * (t.m - vol))


def invariant_basis(t: SymTensor2):
    """The convex invariant basis (tr t, tr t^2, tr t^4) as floats."""
    i1, i2, i4 = invariants_convex(t.m)
    return float(i1), float(i2), float(i4)


def invariant_basis_gradients(t: SymTensor2):
    """Closed-form gradients d(tr t)/dt = 1, d(tr t^2)/dt = 2t, d(tr t^4)/dt = 4 t^3."""
    sq = mandel_square(t.m)
    cube = mandel_symprod(t.m, sq)
    return (
        SymTensor2(IDENTITY6.copy()),
        SymTensor2(2.0 * t.m),
        SymTensor2(4.0 * cube),
    )

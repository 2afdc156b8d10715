"""Differentiation engine: reverse-mode parameter gradients, forward-mode input
derivatives, and their nesting.

The networks in this package are scalar-valued potentials whose *derivatives*
(stresses, thermodynamic forces) are the actual model outputs, and the training
losses differentiate those derivatives once more with respect to the network
parameters.  The engine therefore has two cooperating halves:

* ``Var`` — a reverse-mode tape node holding a numpy array.  Parameters are
  wrapped in ``Var`` leaves inside a ``tape()`` context; ``backward`` replays
  the tape once and accumulates ``grad`` on every leaf.  Suited to the ~1e2-1e4
  parameters of the networks.

* ``Dual`` / ``Dual2`` — forward-mode numbers carrying first (and for ``Dual2``
  also second) directional derivatives with respect to a handful of seed
  directions.  Input dimension is at most 13, so forward sweeps are cheap.
  Tangents live in *trailing* axes of the payload so that duals nest: a
  ``Dual`` may ride on top of plain arrays, on ``Var`` (giving parameter
  gradients of input-derivatives), or on another dual level.  Every dual
  carries a nesting level tag; mixing levels resolves to "outer differentiates,
  inner is payload".

All arithmetic is plain float64 numpy under the hood: evaluation is
deterministic, and no derivative computation mutates its operands.
"""

from __future__ import annotations

import dataclasses
import itertools
import threading

import numpy as np

__all__ = [
    "Var",
    "Dual",
    "Dual2",
    "tape",
    "backward",
    "grad_input",
    "hessian_input",
    "grad_params",
    "NonFiniteLossError",
    "fresh_level",
    "val_of",
    "softplus",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "power",
    "mean_all",
    "vdot",
    "linear",
    "stack_last",
    "take_last",
    "slice_last",
    "vexpand",
    "vmove",
    "solve_square",
    "tree_leaves",
    "tree_map",
]


class NonFiniteLossError(RuntimeError):
    """A loss evaluation produced NaN/inf; carries the offending context."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context or {}


# ---------------------------------------------------------------------------
# reverse mode: tape and Var
# ---------------------------------------------------------------------------

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


class tape:
    """Context manager recording every ``Var`` created inside it, in order.

    Creation order is a topological order of the expression graph, so
    ``backward`` is a single reverse sweep over a list — no recursion, no
    visited sets, safe for graphs with 1e5+ nodes (unrolled time loops).
    """

    def __enter__(self):
        self.nodes = []
        _tape_stack().append(self.nodes)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Var:
    """Reverse-mode node: a float64 numpy payload plus a VJP closure."""

    __slots__ = ("data", "grad", "_vjp")
    __array_ufunc__ = None  # keep numpy from broadcasting over us

    def __init__(self, data, _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._vjp = _vjp
        stack = _tape_stack()
        if not stack:
            raise RuntimeError("Var created outside an active tape() context")
        stack[-1].append(self)

    @property
    def shape(self):
        return self.data.shape

    def _acc(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # -- operator plumbing ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (Dual, Dual2)):
            return NotImplemented
        return _var_add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (Dual, Dual2)):
            return NotImplemented
        return _var_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _var_scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (Dual, Dual2)):
            return NotImplemented
        return _var_add(self, -other if isinstance(other, Var) else np.negative(other))

    def __rsub__(self, other):
        if isinstance(other, (Dual, Dual2)):
            return NotImplemented
        return _var_add(_var_scale(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, (Dual, Dual2)):
            return NotImplemented
        if isinstance(other, Var):
            return _var_mul(self, _var_recip(other))
        return _var_scale(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        if isinstance(other, (Dual, Dual2)):
            return NotImplemented
        return _var_mul(_var_recip(self), other)

    def __pow__(self, p):
        return _var_pow(self, p)

    def __getitem__(self, key):
        return _var_getitem(self, key)

    def __repr__(self):
        return f"Var(shape={self.data.shape})"


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _var_add(a, b):
    if isinstance(b, Var):
        data = a.data + b.data

        def vjp(g, a=a, b=b):
            a._acc(_unbroadcast(g, a.data.shape))
            b._acc(_unbroadcast(g, b.data.shape))

        return Var(data, vjp)
    bb = np.asarray(b, dtype=np.float64)
    return Var(a.data + bb, lambda g, a=a: a._acc(_unbroadcast(g, a.data.shape)))


def _var_mul(a, b):
    if isinstance(b, Var):
        data = a.data * b.data

        def vjp(g, a=a, b=b):
            a._acc(_unbroadcast(g * b.data, a.data.shape))
            b._acc(_unbroadcast(g * a.data, b.data.shape))

        return Var(data, vjp)
    bb = np.asarray(b, dtype=np.float64)
    return Var(a.data * bb, lambda g, a=a, bb=bb: a._acc(_unbroadcast(g * bb, a.data.shape)))


def _var_scale(a, c):
    return Var(a.data * c, lambda g, a=a, c=c: a._acc(_unbroadcast(g * c, a.data.shape)))


def _var_recip(a):
    inv = 1.0 / a.data
    return Var(inv, lambda g, a=a, inv=inv: a._acc(-g * inv * inv))


def _var_pow(a, p):
    data = a.data**p
    return Var(data, lambda g, a=a, p=p: a._acc(g * p * a.data ** (p - 1)))


def _var_getitem(a, key):
    data = a.data[key]

    def vjp(g, a=a, key=key, shape=a.data.shape):
        full = np.zeros(shape)
        full[key] = g
        a._acc(full)

    return Var(data, vjp)


def _var_unary(a, out, d):
    """out = f(a.data) already computed, d = f'(a.data)."""
    return Var(out, lambda g, a=a, d=d: a._acc(g * d))


# ---------------------------------------------------------------------------
# forward mode: levels, Dual, Dual2
# ---------------------------------------------------------------------------

_LEVELS = itertools.count(1)


def fresh_level():
    """Allocate a new, globally unique forward-mode nesting level."""
    return next(_LEVELS)


def _lvl(x):
    return x.lvl if isinstance(x, (Dual, Dual2)) else 0


def val_of(x):
    """Strip all derivative decoration, returning the base numpy payload."""
    while True:
        if isinstance(x, (Dual, Dual2)):
            x = x.val
        elif isinstance(x, Var):
            x = x.data
        else:
            return np.asarray(x)


def _zeros_like_payload(p, extra):
    """A zero tangent for payload ``p`` with trailing axes ``extra``."""
    return np.zeros(np.shape(val_of(p)) + extra)


class Dual:
    """First-order forward number: tangents in one trailing axis of ``tan``."""

    __slots__ = ("val", "tan", "lvl")
    __array_ufunc__ = None

    def __init__(self, val, tan, lvl):
        self.val = val
        self.tan = tan
        self.lvl = lvl

    def tangent(self, i):
        """Directional derivative along seed direction ``i`` (a payload)."""
        return take_last(self.tan, i)

    # ``other`` is a payload constant unless it is a dual at the same level;
    # duals at a *higher* level own the operation instead.
    def _coerce(self, other):
        ol = _lvl(other)
        if ol > self.lvl:
            return None
        if ol == self.lvl:
            if not isinstance(other, Dual):
                raise TypeError("mixed Dual/Dual2 at one level")
            return other
        return Dual(other, 0.0, self.lvl)  # scalar zero tangent broadcasts

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return Dual(self.val + o.val, _tan_add(self.tan, o.tan), self.lvl)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, _tan_neg(self.tan), self.lvl)

    def __sub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return Dual(self.val - o.val, _tan_add(self.tan, _tan_neg(o.tan)), self.lvl)

    def __rsub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o.__sub__(self)

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        tan = _tan_add(
            _tan_scale(self.tan, o.val),
            _tan_scale(o.tan, self.val),
        )
        return Dual(self.val * o.val, tan, self.lvl)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self * _recip(o)

    def __rtruediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o * _recip(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, i):
        if not isinstance(i, int):
            raise TypeError("Dual indexing supports a trailing int index only")
        return take_last(self, i)

    def __repr__(self):
        return f"Dual(lvl={self.lvl}, val={self.val!r})"


class Dual2:
    """Second-order forward number.

    ``t1``/``t2`` carry one trailing tangent axis each (widths D1, D2); ``t12``
    carries both, in that order, holding the mixed second derivatives.
    """

    __slots__ = ("val", "t1", "t2", "t12", "lvl")
    __array_ufunc__ = None

    def __init__(self, val, t1, t2, t12, lvl):
        self.val = val
        self.t1 = t1
        self.t2 = t2
        self.t12 = t12
        self.lvl = lvl

    def _coerce(self, other):
        ol = _lvl(other)
        if ol > self.lvl:
            return None
        if ol == self.lvl:
            if not isinstance(other, Dual2):
                raise TypeError("mixed Dual/Dual2 at one level")
            return other
        return Dual2(other, 0.0, 0.0, 0.0, self.lvl)

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return Dual2(
            self.val + o.val,
            _tan_add(self.t1, o.t1),
            _tan_add(self.t2, o.t2),
            _tan_add(self.t12, o.t12),
            self.lvl,
        )

    __radd__ = __add__

    def __neg__(self):
        return Dual2(-self.val, _tan_neg(self.t1), _tan_neg(self.t2), _tan_neg(self.t12), self.lvl)

    def __sub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self + (-o)

    def __rsub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o + (-self)

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        a, b = self, o
        t12 = _tan_add(
            _tan_add(_tan_scale2(b.t12, a.val), _tan_scale2(a.t12, b.val)),
            _tan_add(_outer(a.t1, b.t2), _outer(b.t1, a.t2)),
        )
        return Dual2(
            a.val * b.val,
            _tan_add(_tan_scale(a.t1, b.val), _tan_scale(b.t1, a.val)),
            _tan_add(_tan_scale(a.t2, b.val), _tan_scale(b.t2, a.val)),
            t12,
            self.lvl,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self * _recip(o)

    def __rtruediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o * _recip(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, i):
        if not isinstance(i, int):
            raise TypeError("Dual2 indexing supports a trailing int index only")
        return take_last(self, i)

    def __repr__(self):
        return f"Dual2(lvl={self.lvl}, val={self.val!r})"


# -- tangent-payload helpers -------------------------------------------------
#
# Tangents are ordinary payloads one (or two) trailing axes wider than the
# value.  The scalar 0.0 stands in for an all-zero tangent of any width; these
# helpers keep that sentinel from materializing until it has to.


def _is0(t):
    return isinstance(t, float) and t == 0.0


def _tan_add(a, b):
    if _is0(a):
        return b
    if _is0(b):
        return a
    return a + b


def _tan_neg(a):
    return a if _is0(a) else -a


def _tan_scale(t, v):
    """t * v with v a value-shaped payload: v gains one trailing axis."""
    if _is0(t):
        return 0.0
    return t * vexpand(v)


def _tan_scale2(t, v):
    if _is0(t):
        return 0.0
    return t * vexpand(vexpand(v))


def _outer(t1, t2):
    """(..., D1) x (..., D2) -> (..., D1, D2)."""
    if _is0(t1) or _is0(t2):
        return 0.0
    return vexpand(t1) * vexpand(t2, -2)


# ---------------------------------------------------------------------------
# generic operations
# ---------------------------------------------------------------------------
#
# Each function dispatches on the *outermost* wrapper: Dual/Dual2 first (their
# rules recurse into payload arithmetic), then Var (tape primitive), then raw
# numpy.  Binary generic ops lean on the operators, which already handle
# level precedence via NotImplemented.


def _recip(x):
    if isinstance(x, Dual):
        inv = _recip(x.val)
        return Dual(inv, _tan_scale(x.tan, -(inv * inv)), x.lvl)
    if isinstance(x, Dual2):
        inv = _recip(x.val)
        d1 = -(inv * inv)
        return _chain2(x, inv, d1, 2.0 * inv * inv * inv)
    if isinstance(x, Var):
        return _var_recip(x)
    return 1.0 / x


def _chain2(x, fv, d1, d2):
    """Second-order chain rule for a unary elementwise f applied to Dual2 x."""
    t12 = _tan_add(_tan_scale2(x.t12, d1), _tan_scale2(_outer(x.t1, x.t2), d2))
    return Dual2(fv, _tan_scale(x.t1, d1), _tan_scale(x.t2, d1), t12, x.lvl)


def softplus(x):
    """ln(1 + e^x), overflow-safe; derivative is the logistic function."""
    if isinstance(x, Dual):
        return Dual(softplus(x.val), _tan_scale(x.tan, sigmoid(x.val)), x.lvl)
    if isinstance(x, Dual2):
        s = sigmoid(x.val)
        return _chain2(x, softplus(x.val), s, s * (1.0 - s))
    if isinstance(x, Var):
        out = np.logaddexp(0.0, x.data)
        return _var_unary(x, out, _expit(x.data))
    return np.logaddexp(0.0, x)


def _expit(z):
    # stable logistic on raw arrays
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    if isinstance(x, Dual):
        s = sigmoid(x.val)
        return Dual(s, _tan_scale(x.tan, s * (1.0 - s)), x.lvl)
    if isinstance(x, Dual2):
        s = sigmoid(x.val)
        d1 = s * (1.0 - s)
        return _chain2(x, s, d1, d1 * (1.0 - 2.0 * s))
    if isinstance(x, Var):
        s = _expit(x.data)
        return _var_unary(x, s, s * (1.0 - s))
    return _expit(np.asarray(x, dtype=np.float64))


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.val)
        return Dual(t, _tan_scale(x.tan, 1.0 - t * t), x.lvl)
    if isinstance(x, Dual2):
        t = tanh(x.val)
        return _chain2(x, t, 1.0 - t * t, -2.0 * t * (1.0 - t * t))
    if isinstance(x, Var):
        t = np.tanh(x.data)
        return _var_unary(x, t, 1.0 - t * t)
    return np.tanh(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(e, _tan_scale(x.tan, e), x.lvl)
    if isinstance(x, Dual2):
        e = exp(x.val)
        return _chain2(x, e, e, e)
    if isinstance(x, Var):
        e = np.exp(x.data)
        return _var_unary(x, e, e)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), _tan_scale(x.tan, _recip(x.val)), x.lvl)
    if isinstance(x, Dual2):
        inv = _recip(x.val)
        return _chain2(x, log(x.val), inv, -(inv * inv))
    if isinstance(x, Var):
        return _var_unary(x, np.log(x.data), 1.0 / x.data)
    return np.log(x)


def sqrt(x):
    return power(x, 0.5)


def power(x, p):
    """x**p for a constant real exponent p."""
    if p == 1:
        return x
    if isinstance(x, Dual):
        return Dual(power(x.val, p), _tan_scale(x.tan, power(x.val, p - 1) * p), x.lvl)
    if isinstance(x, Dual2):
        return _chain2(
            x,
            power(x.val, p),
            power(x.val, p - 1) * p,
            power(x.val, p - 2) * (p * (p - 1)),
        )
    if isinstance(x, Var):
        return _var_pow(x, p)
    return np.asarray(x, dtype=np.float64) ** p


def absolute(x):
    """|x|; subgradient 0 at the kink.  Reverse mode and raw arrays only."""
    if isinstance(x, (Dual, Dual2)):
        raise TypeError("absolute() is not smooth; not supported on forward duals")
    if isinstance(x, Var):
        return _var_unary(x, np.abs(x.data), np.sign(x.data))
    return np.abs(x)


def mean_all(x):
    """Mean over every value element (scalar output)."""
    if isinstance(x, Dual):
        size = val_of(x.val).size
        tan = x.tan if _is0(x.tan) else x.tan + _zeros_like_payload(x.val, _tan_width(x.tan))
        return Dual(mean_all(x.val), _mean_keep_last(tan, 1, size), x.lvl)
    if isinstance(x, Dual2):
        size = val_of(x.val).size

        def full(t, axes):
            return t if _is0(t) else t + _zeros_like_payload(x.val, _tan_width(t, axes))

        return Dual2(
            mean_all(x.val),
            _mean_keep_last(full(x.t1, 1), 1, size),
            _mean_keep_last(full(x.t2, 1), 1, size),
            _mean_keep_last(full(x.t12, 2), 2, size),
            x.lvl,
        )
    if isinstance(x, Var):
        n = x.data.size
        data = x.data.mean()

        def vjp(g, x=x, n=n, shape=x.data.shape):
            x._acc(np.broadcast_to(np.asarray(g) / n, shape))

        return Var(data, vjp)
    return np.mean(x)


def _mean_keep_last(t, keep, size):
    """Mean of a tangent payload over the value axes (``keep`` trailing tangent
    axes survive).  ``size`` is the number of value elements averaged, which
    the tangent may have broadcast away."""
    if _is0(t):
        return 0.0
    if isinstance(t, (Dual, Dual2)):
        raise TypeError("mean over more than two nesting levels is not supported")
    if isinstance(t, Var):
        ndim = t.data.ndim
        axes = tuple(range(ndim - keep))
        if not axes:
            return t
        data = t.data.sum(axis=axes) / size

        def vjp(g, t=t, axes=axes, size=size, shape=t.data.shape):
            g = np.asarray(g) / size
            g = np.expand_dims(g, tuple(range(len(axes))))
            t._acc(np.broadcast_to(g, shape))

        return Var(data, vjp)
    t = np.asarray(t)
    axes = tuple(range(t.ndim - keep))
    return t.sum(axis=axes) / size if axes else t


def vdot(a, b):
    """Sum-product over the last value axis (Frobenius product for Mandel 6-vectors)."""
    da, db = isinstance(a, (Dual, Dual2)), isinstance(b, (Dual, Dual2))
    if da or db:
        la, lb = _lvl(a), _lvl(b)
        if la > lb:
            return _vdot_dual(a, b)
        if lb > la:
            return _vdot_dual(b, a)
        # same level
        if isinstance(a, Dual):
            tan = _tan_add(_vdot_tan(a.tan, b.val), _vdot_tan(b.tan, a.val))
            return Dual(vdot(a.val, b.val), tan, a.lvl)
        t12 = _tan_add(
            _tan_add(_vdot_tan2(a.t12, b.val), _vdot_tan2(b.t12, a.val)),
            _tan_add(_outer_vdot(a.t1, b.t2), _outer_vdot(b.t1, a.t2)),
        )
        return Dual2(
            vdot(a.val, b.val),
            _tan_add(_vdot_tan(a.t1, b.val), _vdot_tan(b.t1, a.val)),
            _tan_add(_vdot_tan(a.t2, b.val), _vdot_tan(b.t2, a.val)),
            t12,
            a.lvl,
        )
    if isinstance(a, Var) or isinstance(b, Var):
        return _var_vdot(a, b)
    return np.matmul(np.asarray(a)[..., None, :], np.asarray(b)[..., :, None])[..., 0, 0]


def _vdot_dual(a, b):
    """vdot where ``a`` is the (strictly) outermost dual and ``b`` is payload."""
    if isinstance(a, Dual):
        return Dual(vdot(a.val, b), _vdot_tan_mixed(a.tan, b), a.lvl)
    return Dual2(
        vdot(a.val, b),
        _vdot_tan_mixed(a.t1, b),
        _vdot_tan_mixed(a.t2, b),
        _vdot_tan2_mixed(a.t12, b),
        a.lvl,
    )


def _vdot_tan(t, v):
    # t: (..., n, D), v: (..., n) -> (..., D)
    if _is0(t):
        return 0.0
    return vdot(vmove(t, -2, -1), vexpand(v, -2))


def _vdot_tan_mixed(t, v):
    if _is0(t):
        return 0.0
    return vdot(vmove(t, -2, -1), vexpand(v, -2))


def _vdot_tan2(t, v):
    # t: (..., n, D1, D2), v: (..., n) -> (..., D1, D2)
    if _is0(t):
        return 0.0
    return vdot(vmove(t, -3, -1), vexpand(vexpand(v, -2), -2))


_vdot_tan2_mixed = _vdot_tan2


def _outer_vdot(t1, t2):
    # t1: (..., n, D1), t2: (..., n, D2) -> (..., D1, D2)
    if _is0(t1) or _is0(t2):
        return 0.0
    return vdot(vmove(vexpand(t1), -3, -1), vmove(vexpand(t2, -2), -3, -1))


def _var_vdot(a, b):
    if isinstance(a, Var) and isinstance(b, Var):
        data = np.matmul(a.data[..., None, :], b.data[..., :, None])[..., 0, 0]

        def vjp(g, a=a, b=b):
            gg = np.asarray(g)[..., None]
            a._acc(_unbroadcast(gg * b.data, a.data.shape))
            b._acc(_unbroadcast(gg * a.data, b.data.shape))

        return Var(data, vjp)
    if isinstance(b, Var):
        a, b = b, a
    bb = np.asarray(b, dtype=np.float64)
    data = np.matmul(a.data[..., None, :], bb[..., :, None])[..., 0, 0]

    def vjp(g, a=a, bb=bb):
        a._acc(_unbroadcast(np.asarray(g)[..., None] * bb, a.data.shape))

    return Var(data, vjp)


def linear(x, w, b=None):
    """Affine map on the last value axis: x(...,i), w(o,i) -> (...,o).

    ``w`` and ``b`` are base payloads (arrays or Var parameters), never duals.
    """
    if isinstance(x, Dual):
        tan = 0.0 if _is0(x.tan) else vmove(linear(vmove(x.tan, -2, -1), w), -1, -2)
        return Dual(linear(x.val, w, b), tan, x.lvl)
    if isinstance(x, Dual2):
        def lt(t):
            return 0.0 if _is0(t) else vmove(linear(vmove(t, -2, -1), w), -1, -2)

        t12 = (
            0.0
            if _is0(x.t12)
            else vmove(linear(vmove(x.t12, -3, -1), w), -1, -3)
        )
        return Dual2(linear(x.val, w, b), lt(x.t1), lt(x.t2), t12, x.lvl)
    if isinstance(x, Var) or isinstance(w, Var) or isinstance(b, Var):
        return _var_linear(x, w, b)
    out = np.matmul(x, np.swapaxes(np.asarray(w), -1, -2))
    return out if b is None else out + b


def _var_linear(x, w, b):
    xd = x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    wd = w.data if isinstance(w, Var) else np.asarray(w, dtype=np.float64)
    data = np.matmul(xd, wd.T)
    if b is not None:
        bd = b.data if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
        data = data + bd

    def vjp(g, x=x, w=w, b=b, xd=xd, wd=wd):
        g = np.asarray(g)
        if isinstance(x, Var):
            x._acc(_unbroadcast(np.matmul(g, wd), xd.shape))
        if isinstance(w, Var):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = np.broadcast_to(xd, g.shape[:-1] + xd.shape[-1:]).reshape(
                -1, xd.shape[-1]
            )
            w._acc(np.matmul(g2.T, x2))
        if b is not None and isinstance(b, Var):
            b._acc(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Var(data, vjp)


# Cached axis bookkeeping: these run in every dual/Var structural op, and
# numpy's own argument normalization dominates at our tiny array sizes.
_MOVE_ORDERS: dict = {}


def _np_expand(a, pos):
    p = pos % (a.ndim + 1)
    sh = a.shape
    return a.reshape(sh[:p] + (1,) + sh[p:])


def _np_squeeze(a, pos):
    p = pos % a.ndim
    sh = a.shape
    return a.reshape(sh[:p] + sh[p + 1 :])


def _np_move(a, src, dst):
    order = _MOVE_ORDERS.get((a.ndim, src, dst))
    if order is None:
        s, d = src % a.ndim, dst % a.ndim
        order = [n for n in range(a.ndim) if n != s]
        order.insert(d, s)
        order = _MOVE_ORDERS.setdefault((a.ndim, src, dst), tuple(order))
    return a.transpose(order)


def vexpand(x, pos=-1):
    """Insert a size-1 axis at value position ``pos`` (negative, from the end)."""
    if isinstance(x, Dual):
        return Dual(vexpand(x.val, pos), vexpand(x.tan, pos - 1) if not _is0(x.tan) else 0.0, x.lvl)
    if isinstance(x, Dual2):
        return Dual2(
            vexpand(x.val, pos),
            vexpand(x.t1, pos - 1) if not _is0(x.t1) else 0.0,
            vexpand(x.t2, pos - 1) if not _is0(x.t2) else 0.0,
            vexpand(x.t12, pos - 2) if not _is0(x.t12) else 0.0,
            x.lvl,
        )
    if isinstance(x, Var):
        data = _np_expand(x.data, pos)
        return Var(data, lambda g, x=x, pos=pos: x._acc(_np_squeeze(np.asarray(g), pos)))
    return _np_expand(np.asarray(x, dtype=np.float64), pos)


def vmove(x, src, dst):
    """Move a value axis; ``src``/``dst`` are negative value-axis positions."""
    if src == dst:
        return x
    if isinstance(x, Dual):
        return Dual(
            vmove(x.val, src, dst),
            vmove(x.tan, src - 1, dst - 1) if not _is0(x.tan) else 0.0,
            x.lvl,
        )
    if isinstance(x, Dual2):
        return Dual2(
            vmove(x.val, src, dst),
            vmove(x.t1, src - 1, dst - 1) if not _is0(x.t1) else 0.0,
            vmove(x.t2, src - 1, dst - 1) if not _is0(x.t2) else 0.0,
            vmove(x.t12, src - 2, dst - 2) if not _is0(x.t12) else 0.0,
            x.lvl,
        )
    if isinstance(x, Var):
        data = _np_move(x.data, src, dst)
        return Var(data, lambda g, x=x: x._acc(_np_move(np.asarray(g), dst, src)))
    return _np_move(np.asarray(x, dtype=np.float64), src, dst)


def take_last(x, i):
    """Index the last value axis with int ``i`` (axis removed)."""
    if isinstance(x, Dual):
        tan = 0.0 if _is0(x.tan) else take_last(vmove(x.tan, -2, -1), i)
        return Dual(take_last(x.val, i), tan, x.lvl)
    if isinstance(x, Dual2):
        def tk(t):
            return 0.0 if _is0(t) else take_last(vmove(t, -2, -1), i)

        t12 = 0.0 if _is0(x.t12) else take_last(vmove(x.t12, -3, -1), i)
        return Dual2(take_last(x.val, i), tk(x.t1), tk(x.t2), t12, x.lvl)
    if isinstance(x, Var):
        data = x.data[..., i]

        def vjp(g, x=x, i=i, shape=x.data.shape):
            full = np.zeros(shape)
            full[..., i] = g
            x._acc(full)

        return Var(data, vjp)
    return np.asarray(x)[..., i]


def slice_last(x, a, b):
    """Slice the last value axis: x[..., a:b]."""
    if isinstance(x, Dual):
        tan = 0.0 if _is0(x.tan) else vmove(slice_last(vmove(x.tan, -2, -1), a, b), -1, -2)
        return Dual(slice_last(x.val, a, b), tan, x.lvl)
    if isinstance(x, Dual2):
        def sl(t):
            return 0.0 if _is0(t) else vmove(slice_last(vmove(t, -2, -1), a, b), -1, -2)

        t12 = (
            0.0
            if _is0(x.t12)
            else vmove(slice_last(vmove(x.t12, -3, -1), a, b), -1, -3)
        )
        return Dual2(slice_last(x.val, a, b), sl(x.t1), sl(x.t2), t12, x.lvl)
    if isinstance(x, Var):
        data = x.data[..., a:b]

        def vjp(g, x=x, a=a, b=b, shape=x.data.shape):
            full = np.zeros(shape)
            full[..., a:b] = g
            x._acc(full)

        return Var(data, vjp)
    return np.asarray(x)[..., a:b]


def stack_last(xs):
    """Stack equal-shaped payloads along a new last value axis."""
    top = max(_lvl(x) for x in xs)
    if top > 0:
        first = next(x for x in xs if _lvl(x) == top)
        if isinstance(first, Dual):
            xs = [x if _lvl(x) == top else Dual(x, 0.0, top) for x in xs]
            vals = stack_last([x.val for x in xs])
            tans = [x.tan for x in xs]
            if all(_is0(t) for t in tans):
                tan = 0.0
            else:
                proto = next(t for t in tans if not _is0(t))
                tans = [
                    _zeros_like_payload(x.val, _tan_width(proto)) if _is0(t) else t
                    for x, t in zip(xs, tans)
                ]
                tan = vmove(stack_last(tans), -1, -2)
            return Dual(vals, tan, top)
        xs = [x if _lvl(x) == top else Dual2(x, 0.0, 0.0, 0.0, top) for x in xs]
        vals = stack_last([x.val for x in xs])

        def stk(ts, getv, width_axes):
            if all(_is0(t) for t in ts):
                return 0.0
            proto = next(t for t in ts if not _is0(t))
            full = [
                _zeros_like_payload(getv(x), _tan_width(proto, width_axes))
                if _is0(t)
                else t
                for x, t in zip(xs, ts)
            ]
            out = stack_last(full)
            return vmove(out, -1, -1 - width_axes)

        t1 = stk([x.t1 for x in xs], lambda x: x.val, 1)
        t2 = stk([x.t2 for x in xs], lambda x: x.val, 1)
        t12 = stk([x.t12 for x in xs], lambda x: x.val, 2)
        return Dual2(vals, t1, t2, t12, top)
    if any(isinstance(x, Var) for x in xs):
        datas = [x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in xs]
        datas = list(np.broadcast_arrays(*datas))
        data = np.stack(datas, axis=-1)

        def vjp(g, xs=xs, shapes=[d.shape for d in datas]):
            g = np.asarray(g)
            for k, x in enumerate(xs):
                if isinstance(x, Var):
                    x._acc(_unbroadcast(g[..., k], x.data.shape))

        return Var(data, vjp)
    return np.stack(np.broadcast_arrays(*[np.asarray(x, dtype=np.float64) for x in xs]), axis=-1)


def _tan_width(t, axes=1):
    """Trailing tangent-axis sizes of a tangent payload."""
    shape = np.shape(val_of(t))
    return shape[len(shape) - axes :]


def solve_square(a, b):
    """Solve the small dense system a @ x = b (last-axis vectors).

    Differentiable in reverse mode: with w = a^-T g, the adjoints are
    b_bar = w and a_bar = -w x^T.
    """
    if isinstance(a, (Dual, Dual2)) or isinstance(b, (Dual, Dual2)):
        raise TypeError("solve_square supports base payloads (arrays / Var) only")
    if isinstance(a, Var) or isinstance(b, Var):
        ad = a.data if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
        bd = b.data if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
        x = np.linalg.solve(ad, bd)

        def vjp(g, a=a, b=b, ad=ad, x=x):
            w = np.linalg.solve(ad.T, np.asarray(g))
            if isinstance(b, Var):
                b._acc(w)
            if isinstance(a, Var):
                a._acc(-np.outer(w, x))

        return Var(x, vjp)
    return np.linalg.solve(a, b)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def grad_input(f, x):
    """Gradient of scalar ``f`` with respect to its n-vector input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    lvl = fresh_level()
    xd = Dual(x, np.eye(n), lvl)
    y = f(xd)
    if not (isinstance(y, Dual) and y.lvl == lvl):
        return np.zeros(x.shape)  # constant in x
    return np.asarray(val_of(y.tan))


def grad_input_payload(f, x):
    """Gradient of ``f`` along the last axis of ``x``, as a live payload.

    Unlike :func:`grad_input` the result is not stripped to a plain
    array: if ``f`` closes over ``Var`` parameters (or lower-level
    duals), the returned gradient keeps that linkage, so it can appear
    inside a further-differentiated expression.  ``x`` itself is a
    constant array; leading axes of ``x`` are batch axes.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    lvl = fresh_level()
    y = f(Dual(x, np.eye(n), lvl))
    if not (isinstance(y, Dual) and y.lvl == lvl) or _is0(y.tan):
        return np.zeros(np.shape(val_of(y)) + (n,))
    return y.tan


def hessian_input(f, x):
    """Hessian of scalar ``f`` at ``x`` (n x n), via one second-order sweep."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    lvl = fresh_level()
    xd = Dual2(x, np.eye(n), np.eye(n), 0.0, lvl)
    y = f(xd)
    if not (isinstance(y, Dual2) and y.lvl == lvl):
        return np.zeros(x.shape + (n,))
    if _is0(y.t12):
        return np.zeros(x.shape + (n,))
    return np.asarray(val_of(y.t12))


def grad_params(loss_fn, params):
    """Value and gradient of ``loss_fn`` over a pytree of float64 arrays.

    ``loss_fn`` receives a structurally identical pytree whose leaves are
    ``Var`` nodes; it may evaluate forward-mode input derivatives internally.
    Raises :class:`NonFiniteLossError` if the loss or any gradient is not
    finite.
    """
    with tape():
        pvars = tree_map(lambda a: Var(a), params)
        out = loss_fn(pvars)
        if isinstance(out, (Dual, Dual2)):
            raise TypeError("loss must be a plain scalar (Var or float), got a dual")
        if isinstance(out, Var):
            value = float(out.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    "loss evaluated to a non-finite value", {"loss": value}
                )
            out.grad = np.ones(())
            backward(out)
            grads = tree_map(
                lambda v: v.grad if v.grad is not None else np.zeros(v.data.shape),
                pvars,
            )
        else:
            value = float(out)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    "loss evaluated to a non-finite value", {"loss": value}
                )
            grads = tree_map(lambda v: np.zeros(v.data.shape), pvars)
    bad = [g for g in tree_leaves(grads) if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteLossError(
            "non-finite parameter gradient", {"loss": value, "bad_leaves": len(bad)}
        )
    return value, grads


def backward(root):
    """Reverse sweep from ``root`` over the innermost active tape."""
    nodes = _tape_stack()[-1]
    for node in reversed(nodes):
        if node.grad is not None and node._vjp is not None:
            g = node.grad
            if not isinstance(g, np.ndarray) or g.shape != node.data.shape:
                g = np.broadcast_to(np.asarray(g, dtype=np.float64), node.data.shape)
            node._vjp(g)


# ---------------------------------------------------------------------------
# pytree utilities (dataclasses, dicts, lists of arrays)
# ---------------------------------------------------------------------------


def tree_map(fn, tree):
    if isinstance(tree, (np.ndarray, Var)):
        return fn(tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        return type(tree)(
            **{
                f.name: tree_map(fn, getattr(tree, f.name))
                for f in dataclasses.fields(tree)
            }
        )
    if isinstance(tree, dict):
        return {k: tree_map(fn, v) for k, v in sorted(tree.items())}
    if isinstance(tree, (list, tuple)):
        return type(tree)(tree_map(fn, v) for v in tree)
    return tree  # static leaf (ints, strings, None)


def tree_zip(fn, *trees):
    """Map ``fn`` over corresponding leaves of structurally equal pytrees."""
    t0 = trees[0]
    if isinstance(t0, (np.ndarray, Var)):
        return fn(*trees)
    if dataclasses.is_dataclass(t0) and not isinstance(t0, type):
        return type(t0)(
            **{
                f.name: tree_zip(fn, *(getattr(t, f.name) for t in trees))
                for f in dataclasses.fields(t0)
            }
        )
    if isinstance(t0, dict):
        return {k: tree_zip(fn, *(t[k] for t in trees)) for k in sorted(t0)}
    if isinstance(t0, (list, tuple)):
        return type(t0)(tree_zip(fn, *vs) for vs in zip(*trees))
    return t0  # static leaf (ints, strings, None)


def tree_leaves(tree):
    out = []

    def walk(t):
        if isinstance(t, (np.ndarray, Var)):
            out.append(t)
        elif dataclasses.is_dataclass(t) and not isinstance(t, type):
            for f in dataclasses.fields(t):
                walk(getattr(t, f.name))
        elif isinstance(t, dict):
            for k in sorted(t):
                walk(t[k])
        elif isinstance(t, (list, tuple)):
            for v in t:
                walk(v)

    walk(tree)
    return out

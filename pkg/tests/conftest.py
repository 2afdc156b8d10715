"""Shared test helpers: finite-difference oracles and tolerances.

Step sizes follow the package convention: h = 1e-5 for first-order central
differences, h = 1e-4 for second-order stencils (balanced truncation/rounding
for magnitude-1 normalized inputs).
"""

import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at x (1-D array)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jac(f, x, h=1e-5):
    """Central-difference Jacobian of vector-valued f at x."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_hess(f, x, h=1e-4):
    """Central-difference Hessian of scalar f at x."""
    return fd_jac(lambda y: fd_grad(f, y, h), x, h)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


def iso_matrix(bulk, shear):
    """6x6 Mandel matrix of the isotropic tensor 3*bulk*K + 2*shear*D."""
    ident = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    kproj = np.outer(ident, ident) / 3.0
    return 3.0 * bulk * kproj + 2.0 * shear * (np.eye(6) - kproj)


def tree_randn_like(tree, rng, scale=1.0):
    """Pytree of normal draws with the shapes of the array leaves of ``tree``."""
    from gsmnet import autodiff as ad

    return ad.tree_map(lambda a: rng.normal(0.0, scale, np.shape(a)), tree)


def tree_axpy(h, d, p):
    """Leafwise ``p + h * d`` over structurally equal pytrees."""
    from gsmnet import autodiff as ad

    return ad.tree_zip(lambda pp, dd: pp + h * dd, p, d)


def tree_dot(a, b):
    """Sum of elementwise products over the array leaves of two pytrees."""
    from gsmnet import autodiff as ad

    total = 0.0
    for x, y in zip(ad.tree_leaves(a), ad.tree_leaves(b)):
        total += float(np.sum(np.asarray(ad.val_of(x)) * np.asarray(ad.val_of(y))))
    return total

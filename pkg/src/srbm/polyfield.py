"""Sparse multivariate polynomials and polynomial vector fields.

A polynomial is a ``dict`` mapping exponent tuples to float coefficients.
A vector field is a tuple of ``n`` such polynomials, one per chart
coordinate. Everything here is exact arithmetic on coefficient tables; the
fast batched evaluator lives in :class:`CompiledFrame`.
"""

from __future__ import annotations

import itertools

import numpy as np

_ZERO_TOL = 1e-14


def clean(poly):
    return {e: c for e, c in poly.items() if abs(c) > _ZERO_TOL}


def add(a, b, scale=1.0):
    out = dict(a)
    for e, c in b.items():
        out[e] = out.get(e, 0.0) + scale * c
    return clean(out)


def mul(a, b):
    out = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(i + j for i, j in zip(ea, eb))
            out[e] = out.get(e, 0.0) + ca * cb
    return clean(out)


def diff(poly, var):
    out = {}
    for e, c in poly.items():
        if e[var] == 0:
            continue
        e2 = list(e)
        e2[var] -= 1
        e2 = tuple(e2)
        out[e2] = out.get(e2, 0.0) + c * e[var]
    return clean(out)


def degree(poly):
    return max((sum(e) for e in poly), default=0)


def evaluate(poly, x):
    """Evaluate at points ``x`` of shape (..., n)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for e, c in poly.items():
        out = out + c * np.prod(x ** np.array(e), axis=-1)
    return out


def bracket(X, Y):
    """Lie bracket [X, Y]^a = sum_b X^b d_b Y^a - Y^b d_b X^a."""
    n = len(X)
    out = []
    for a in range(n):
        comp = {}
        for b in range(n):
            comp = add(comp, mul(X[b], diff(Y[a], b)))
            comp = add(comp, mul(Y[b], diff(X[a], b)), scale=-1.0)
        out.append(comp)
    return tuple(out)


def is_zero_field(X):
    return all(len(c) == 0 for c in X)


def field_degree(X):
    return max(degree(c) for c in X)


def independent_fields(fields, tol=1e-10):
    """Greedy selection of an R-linearly independent subfamily.

    Fields are compared as coefficient vectors, so the result spans the same
    real vector space of polynomial fields as the input.
    """
    keys = sorted({(a, e) for X in fields for a, comp in enumerate(X) for e in comp})
    if not keys:
        return []
    index = {k: i for i, k in enumerate(keys)}
    basis_vecs = []
    kept = []
    for X in fields:
        v = np.zeros(len(keys))
        for a, comp in enumerate(X):
            for e, c in comp.items():
                v[index[(a, e)]] = c
        w = v.copy()
        for q in basis_vecs:
            w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm > tol * max(1.0, np.linalg.norm(v)):
            basis_vecs.append(w / norm)
            kept.append(X)
    return kept


class CompiledFrame:
    """Batched evaluator for a frame, its Jacobians and Hessians.

    Every field component and its first and second partial derivatives are
    expanded on one shared monomial list, so that evaluation at ``B`` points
    is a gather of coordinate powers followed by a single matrix product.
    Points are laid out as (n, B) arrays.
    """

    def __init__(self, fields, n):
        self.n = n
        self.k = len(fields)
        comps0 = [X[a] for X in fields for a in range(n)]
        comps1 = [diff(X[a], c) for X in fields for a in range(n) for c in range(n)]
        comps2 = [
            diff(diff(X[a], c), d)
            for X in fields
            for a in range(n)
            for c in range(n)
            for d in range(n)
        ]
        monos = sorted({e for comp in comps0 + comps1 + comps2 for e in comp})
        if not monos:
            monos = [(0,) * n]
        self.exponents = np.array(monos, dtype=int).reshape(-1, n)
        self.max_degree = int(self.exponents.max(initial=0))
        col = {e: i for i, e in enumerate(monos)}

        def table(comps):
            C = np.zeros((len(comps), len(monos)))
            for r, comp in enumerate(comps):
                for e, c in comp.items():
                    C[r, col[e]] = c
            return C

        self.C0 = table(comps0)
        self.C1 = table(comps1)
        self.C2 = table(comps2)
        self.C01 = np.vstack([self.C0, self.C1])
        self._all_constant = self.max_degree == 0

    def monomials(self, xT):
        B = xT.shape[1]
        if self._all_constant:
            return np.ones((1, B))
        pw = np.empty((self.n, self.max_degree + 1, B))
        pw[:, 0] = 1.0
        for d in range(1, self.max_degree + 1):
            pw[:, d] = pw[:, d - 1] * xT
        m = pw[0, self.exponents[:, 0]]
        for j in range(1, self.n):
            m = m * pw[j, self.exponents[:, j]]
        return m

    def values(self, xT):
        m = self.monomials(xT)
        return (self.C0 @ m).reshape(self.k, self.n, -1)

    def values_and_jacobians(self, xT):
        m = self.monomials(xT)
        v = self.C01 @ m
        kn = self.k * self.n
        B = xT.shape[1]
        return v[:kn].reshape(self.k, self.n, B), v[kn:].reshape(self.k, self.n, self.n, B)

    def all_derivatives(self, xT):
        m = self.monomials(xT)
        v = self.C01 @ m
        kn = self.k * self.n
        B = xT.shape[1]
        X = v[:kn].reshape(self.k, self.n, B)
        DX = v[kn:].reshape(self.k, self.n, self.n, B)
        D2X = (self.C2 @ m).reshape(self.k, self.n, self.n, self.n, B)
        return X, DX, D2X


def interval_bounds(poly, lo, hi):
    """Enclosure of a polynomial's range on the box [lo, hi] by interval arithmetic."""
    total_lo, total_hi = 0.0, 0.0
    for e, c in poly.items():
        mlo, mhi = 1.0, 1.0
        for j, k in enumerate(e):
            if k == 0:
                continue
            a, b = lo[j] ** k, hi[j] ** k
            plo, phi = min(a, b), max(a, b)
            if k % 2 == 0 and lo[j] < 0.0 < hi[j]:
                plo = 0.0
            cands = [mlo * plo, mlo * phi, mhi * plo, mhi * phi]
            mlo, mhi = min(cands), max(cands)
        if c >= 0:
            total_lo += c * mlo
            total_hi += c * mhi
        else:
            total_lo += c * mhi
            total_hi += c * mlo
    return total_lo, total_hi


def grid_points(bounds, per_axis):
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in bounds]
    return np.array(list(itertools.product(*axes)))

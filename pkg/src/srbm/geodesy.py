"""Geodesic segments, shooting, mid point and inverse geodesic maps.

Jacobians of the mid point map y -> M(x, y, t) and of the inverse geodesic
map y -> I_m^t(y) are assembled from exponential differentials and the chain
rule; finite differences never enter here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import hamiltonian as ham
from .errors import InvalidRatio, NoConvergence, SingularJacobian
from .hamiltonian import DEFAULT, exp_differential, exp_map, hamiltonian_value, integrate

SUBMERSION_RTOL = 1e-8


@dataclass
class GeodesicSegment:
    """The normal geodesic t -> E_x(t p) restricted to [t0, t1]."""

    structure: object
    x: np.ndarray
    p: np.ndarray
    t0: float = 0.0
    t1: float = 1.0
    cfg: ham.IntegratorConfig = DEFAULT
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if not self.t0 < self.t1:
            raise ValueError("empty time interval")

    @property
    def speed(self):
        return math.sqrt(2.0 * float(hamiltonian_value(self.structure, self.x, self.p)))

    @property
    def length(self):
        return self.speed * (self.t1 - self.t0)

    def state(self, t):
        """(point, covector) at time t of the underlying extremal."""
        if t == 0:
            return self.x.copy(), self.p.copy()
        xt, pt, _, _ = integrate(self.structure, self.x, self.p, t, self.cfg)
        return xt[0], pt[0]

    def point(self, t):
        return self.state(t)[0]

    def samples(self, num=33):
        """Points on a uniform time grid of [t0, t1], cached per grid size."""
        if num not in self._cache:
            times = np.linspace(self.t0, self.t1, num)
            pts = np.tile(self.x, (num, 1))
            for side in (times[times > 0], times[times < 0]):
                if len(side) == 0:
                    continue
                far = side[np.argmax(np.abs(side))]
                xf, _, _, marked = integrate(self.structure, self.x, self.p, far, self.cfg, marks=side)
                for t in side:
                    i = int(np.nonzero(times == t)[0][0])
                    pts[i] = xf[0] if t == far else marked[float(t)][0][0]
            self._cache[num] = (times, pts)
        return self._cache[num]

    def reversed(self):
        """Same trace run backwards: based at gamma(t1), time origin there."""
        y, q = self.state(self.t1)
        return GeodesicSegment(self.structure, y, -q, 0.0, self.t1 - self.t0, self.cfg)


@dataclass(frozen=True)
class SmoothPairCertificate:
    x: tuple
    y: tuple
    covector: tuple
    determinant: float
    min_singular: float
    max_singular: float
    submersion: bool
    uniqueness: str = "assumed-by-short-segment"
    conjugate_bound_ok: bool | None = None

    def as_dict(self):
        return dict(self.__dict__)


def first_conjugate_time(s, x, p):
    """Closed-form first conjugate time for Heisenberg-tagged structures, else None.

    Along t -> E_x(t p) it is 2 pi / |p_z| (infinite for horizontal lines).
    """
    if s.tag != "heisenberg":
        return None
    pz = abs(float(np.asarray(p)[2]))
    return math.inf if pz == 0 else 2 * math.pi / pz


def shoot(s, x, y, p_guess, cfg=DEFAULT, tol=1e-10, max_iter=50):
    """Covector p with E_x(p) = y by damped Newton with Armijo backtracking.

    A leading batch axis is allowed; each pair then runs its own Newton
    iteration with its own Jacobian and step length.
    """
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    P = np.atleast_2d(np.array(p_guess, dtype=float))
    n = s.dim
    r = integrate(s, X, P, 1.0, cfg)[0] - Y
    norm = np.linalg.norm(r, axis=1)
    for _ in range(max_iter):
        idx = np.nonzero(norm >= tol)[0]
        if len(idx) == 0:
            break
        _, _, S, _ = integrate(s, X[idx], P[idx], 1.0, cfg, sensitivity=True)
        A = S[:, :n, n:]
        sv = np.linalg.svd(A, compute_uv=False)
        bad = sv[:, -1] <= 1e-14 * np.maximum(sv[:, 0], 1e-300)
        if bad.any():
            raise SingularJacobian(f"exp differential singular at p={P[idx[bad][0]].tolist()}")
        step = np.linalg.solve(A, -r[idx][..., None])[..., 0]
        lam = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        while pending.any():
            j = np.nonzero(pending)[0]
            rows = idx[j]
            cand = P[rows] + lam[j, None] * step[j]
            rc = integrate(s, X[rows], cand, 1.0, cfg, escape="mask")[0] - Y[rows]
            nc = np.linalg.norm(rc, axis=1)
            ok = np.isfinite(nc) & (nc**2 <= (1 - 1e-4 * lam[j]) * norm[rows] ** 2)
            P[rows[ok]], r[rows[ok]], norm[rows[ok]] = cand[ok], rc[ok], nc[ok]
            pending[j[ok]] = False
            failed = j[~ok]
            if np.any(lam[failed] < 1e-6):
                raise NoConvergence(f"line search stalled at residual {norm[idx[failed]].max():.3e}")
            lam[failed] *= 0.5
    if np.any(norm >= tol):
        raise NoConvergence(f"residual {norm.max():.3e} after {max_iter} iterations")
    return P[0] if single else P


def shoot_batch(s, x, y, guess, jac, cfg=DEFAULT, tol=1e-12, max_iter=12, marks=()):
    """Chord-Newton shooting for many (x, y) pairs with one frozen Jacobian.

    ``jac`` approximates dE_x/dp for every pair (they are all close to a
    reference segment). Trajectories leaving the chart, and iterations whose
    residual grows tenfold, are dropped as unconverged. Returns ``(p,
    endpoint, converged, marked)`` where ``marked`` holds the states at
    ``marks`` of the final iterate.
    """
    y = np.asarray(y, dtype=float)
    p = np.array(guess, dtype=float)
    inv = np.linalg.inv(jac)
    scale = max(1.0, float(np.abs(y).max()))
    end, _, _, marked = integrate(s, x, p, 1.0, cfg, marks=marks, escape="mask")
    res = end - y
    norm = np.linalg.norm(res, axis=1)
    first = norm.copy()
    conv = norm < tol * scale
    active = ~conv & np.isfinite(norm)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p[idx] -= res[idx] @ inv.T
        e2, _, _, m2 = integrate(s, x[idx], p[idx], 1.0, cfg, marks=marks, escape="mask")
        end[idx] = e2
        for key in marked:
            marked[key][0][idx] = m2[key][0]
            marked[key][1][idx] = m2[key][1]
        res[idx] = e2 - y[idx]
        norm[idx] = np.linalg.norm(res[idx], axis=1)
        conv[idx] = norm[idx] < tol * scale
        active[idx] = ~conv[idx] & np.isfinite(norm[idx]) & (norm[idx] <= 10 * first[idx])
    return p, end, conv, marked


def smooth_pair(s, x, p, cfg=DEFAULT, rtol=SUBMERSION_RTOL):
    """Submersion evidence for (x, E_x(p)); uniqueness of the minimizer is assumed."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    n = s.dim
    y, _, S, _ = integrate(s, x, p, 1.0, cfg, sensitivity=True)
    A = S[0, :n, n:]
    sv = np.linalg.svd(A, compute_uv=False)
    tc = first_conjugate_time(s, x, p)
    return SmoothPairCertificate(
        x=tuple(x.tolist()),
        y=tuple(y[0].tolist()),
        covector=tuple(p.tolist()),
        determinant=float(np.linalg.det(A)),
        min_singular=float(sv[-1]),
        max_singular=float(sv[0]),
        submersion=bool(sv[-1] > rtol * sv[0]),
        conjugate_bound_ok=None if tc is None else bool(tc > 1.0),
    )


def reverse(s, x, p, cfg=DEFAULT):
    """(y, q) with y = E_x(p) and E_y(q) = x along the same trace."""
    y, py, _, _ = integrate(s, x, p, 1.0, cfg)
    return (y[0], -py[0]) if np.ndim(x) == 1 else (y, -py)


def midpoint(s, x, p, t, cfg=DEFAULT):
    """M(x, y, t) = E_x(t p) for y = E_x(p)."""
    return exp_map(s, x, p, t, cfg)


def _differentials(s, x, p, t, cfg):
    """D_pE_x(p) and D_pE_x(tp) for a batch, sharing one integration when 0 < t < 1."""
    n = s.dim
    X, P = np.atleast_2d(x), np.atleast_2d(p)
    inside = 0 < t < 1
    _, _, S1, marked = integrate(s, X, P, 1.0, cfg, sensitivity=True, marks=(t,) if inside else ())
    A1 = S1[:, :n, n:]
    if inside:
        At = marked[float(t)][2][:, :n, n:]
    elif t == 1:
        At = A1
    else:
        At = exp_differential(s, X, P, t, cfg)
    return A1, At


def _checked_det(A, what):
    d = np.linalg.det(A)
    if not np.all(np.isfinite(d)) or np.any(np.abs(d) <= 1e-300) or np.any(_cond(A) > 1e14):
        raise SingularJacobian(f"exp differential singular at {what}")
    return d


def _out(v, single):
    return float(v[0]) if single else v


def midpoint_jacobian(s, x, p, t, cfg=DEFAULT):
    """Jacobian determinant of y -> M(x, y, t) at y = E_x(p).

    Equals det[dE_x(tp)/dp . (dE_x(p)/dp)^-1], i.e. t^n det D_pE_x(tp) / det D_pE_x(p).
    """
    single = np.ndim(x) == 1
    B = 1 if single else len(x)
    if t == 1:
        return _out(np.ones(B), single)
    A1, At = _differentials(s, x, p, t, cfg)
    d1 = _checked_det(A1, "the endpoint")
    if t == 0:
        return _out(np.zeros(B), single)
    return _out(np.linalg.det(At) / d1, single)


def midpoint_differential(s, x, p, t, cfg=DEFAULT):
    """Derivative matrix of y -> M(x, y, t) at y = E_x(p)."""
    A1, At = _differentials(s, x, p, t, cfg)
    D = np.linalg.solve(np.swapaxes(A1, -1, -2), np.swapaxes(At, -1, -2)).swapaxes(-1, -2)
    return D[0] if np.ndim(x) == 1 else D


def _cond(A):
    sv = np.linalg.svd(A, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.where(sv[..., -1] == 0, np.inf, sv[..., 0] / sv[..., -1])


def _ratio_factor(t):
    if t == 1:
        raise InvalidRatio("inverse geodesic map undefined at t = 1")
    return t / (1.0 - t)


def inverse_geodesic(s, m, q, t, cfg=DEFAULT):
    """I_m^t(y) = E_m(-t/(1-t) q) where y = E_m(q)."""
    f = _ratio_factor(t)
    return exp_map(s, m, -f * np.asarray(q, dtype=float), 1.0, cfg)


def inverse_geodesic_jacobian(s, m, q, t, cfg=DEFAULT):
    """Jacobian determinant of y -> I_m^t(y) at y = E_m(q).

    det[-(t/(1-t)) D_qE_m(-(t/(1-t)) q) (D_qE_m(q))^-1].
    """
    f = _ratio_factor(t)
    single = np.ndim(m) == 1
    M = np.atleast_2d(np.asarray(m, dtype=float))
    Q = np.atleast_2d(np.asarray(q, dtype=float))
    n, B = s.dim, len(M)
    # both covectors integrated in one batch
    _, _, S, _ = integrate(s, np.concatenate([M, M]), np.concatenate([Q, -f * Q]), 1.0, cfg, sensitivity=True)
    dq = _checked_det(S[:B, :n, n:], "y")
    if f == 0:
        return _out(np.zeros(B), single)
    return _out((-f) ** n * np.linalg.det(S[B:, :n, n:]) / dq, single)


def segment_costate(s, x, p, t, cfg=DEFAULT):
    """(point, covector) at fraction t of t -> E_x(tp), re-scaled to reach E_x(p) in unit time."""
    if t == 0:
        return np.asarray(x, float).copy(), np.asarray(p, float).copy()
    xt, pt, _, _ = integrate(s, x, p, t, cfg)
    if np.ndim(x) == 1:
        return xt[0], (1.0 - t) * pt[0]
    return xt, (1.0 - t) * pt

"""Flag of a normal geodesic, growth vector and geodesic dimension.

Along gamma the frame fields are pulled back to T_{gamma(s0)}M through the
differential of the controlled flow P_{s0,t}. Time derivatives of these
pulled-back vectors at s0 are taken with a finite-difference stencil in
arc length, and the ranks of the nested collections give the growth vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, qmc

from .errors import ControlRecoveryFailed, NoAmpleFound, StencilOutOfRange
from .geodesy import GeodesicSegment
from .hamiltonian import DEFAULT

FLAG_RTOL = 1e-6


@dataclass(frozen=True)
class FlagConfig:
    """Stencil and rank settings.

    ``spacing`` is in arc length (unit-speed time); ``points`` nodes are used
    for every derivative order.
    """

    points: int = 9
    spacing: float = 2e-2
    imax: int = 6
    rtol: float = FLAG_RTOL
    substep: float = 2.5e-3

    def __post_init__(self):
        if self.imax > 6 or self.imax < 1:
            raise ValueError("imax must be in 1..6")
        if self.points < self.imax:
            raise ValueError("stencil needs at least imax points")


FLAG_DEFAULT = FlagConfig()


@dataclass
class FlagBasis:
    time: float
    point: np.ndarray
    covector: np.ndarray
    # by_order[l] holds the l-th arc-length derivative of each pulled-back field, shape (k, n)
    by_order: list
    offsets: np.ndarray = field(repr=False)

    def collection(self, i):
        """Vectors spanning F^i: derivatives of orders 0..i-1."""
        return np.concatenate(self.by_order[:i], axis=0)


@dataclass
class GrowthData:
    growth_vector: tuple
    step: int | None
    ample: bool
    geodesic_dimension: float
    base: tuple
    time: float

    def as_dict(self):
        return {
            "time": self.time,
            "growth_vector": list(self.growth_vector),
            "step": self.step,
            "ample": self.ample,
            "geodesic_dimension": self.geodesic_dimension if self.ample else "inf",
        }


def geodesic_dimension_formula(ks):
    """sum_i (2i - 1)(k_i - k_{i-1}) with k_0 = 0."""
    total, prev = 0, 0
    for i, k in enumerate(ks, start=1):
        total += (2 * i - 1) * (k - prev)
        prev = k
    return total


def fd_weights(nodes, order):
    """Weights w with sum_k w_k f(nodes_k) ~ f^(order)(0)."""
    nodes = np.asarray(nodes, dtype=float)
    V = np.vander(nodes, len(nodes), increasing=True).T
    rhs = np.zeros(len(nodes))
    rhs[order] = math.factorial(order)
    return np.linalg.solve(V, rhs)


def _pullback_field(cf, xT, pT, JT):
    X, DX = cf.values_and_jacobians(xT)
    u = np.einsum("iab,ab->ib", X, pT)
    xd = np.einsum("ib,iab->ab", u, X)
    g = np.einsum("iacb,ab->icb", DX, pT)
    pd = -np.einsum("ib,icb->cb", u, g)
    A = np.einsum("ib,iacb->acb", u, DX)
    Jd = np.einsum("acb,cdb->adb", A, JT)
    return xd, pd, Jd


def _pullback_states(s, x0, p0, offsets, substep):
    """(x, J) at each arc-length offset, J = dP_{0,t} from the variational equation."""
    cf = s.compiled
    n = s.dim
    out = {}
    for sign in (1.0, -1.0):
        side = sorted((o for o in offsets if o * sign > 0), key=abs)
        xT = np.asarray(x0, float).reshape(n, 1)
        pT = np.asarray(p0, float).reshape(n, 1)
        JT = np.eye(n)[:, :, None].copy()
        t = 0.0
        for o in side:
            m = max(1, math.ceil(abs(o - t) / substep - 1e-9))
            dt = (o - t) / m
            for _ in range(m):
                k1 = _pullback_field(cf, xT, pT, JT)
                k2 = _pullback_field(cf, *(v + 0.5 * dt * k for v, k in zip((xT, pT, JT), k1)))
                k3 = _pullback_field(cf, *(v + 0.5 * dt * k for v, k in zip((xT, pT, JT), k2)))
                k4 = _pullback_field(cf, *(v + dt * k for v, k in zip((xT, pT, JT), k3)))
                xT, pT, JT = (
                    v + dt / 6.0 * (a + 2 * b + 2 * c + d)
                    for v, a, b, c, d in zip((xT, pT, JT), k1, k2, k3, k4)
                )
            t = o
            out[o] = (xT[:, 0].copy(), pT[:, 0].copy(), JT[:, :, 0].copy())
    out[0.0] = (np.asarray(x0, float), np.asarray(p0, float), np.eye(n))
    return out


def _recover_controls(s, x, p):
    X = s.frame(x)
    xdot = (X @ p) @ X
    u, *_ = np.linalg.lstsq(X.T, xdot, rcond=None)
    resid = np.linalg.norm(X.T @ u - xdot)
    if resid > 1e-8 * max(1.0, np.linalg.norm(xdot)):
        raise ControlRecoveryFailed(f"velocity not in frame span (residual {resid:.2e})")
    return u


def flag_basis(s, seg, s0, imax=None, stencil=FLAG_DEFAULT):
    """Pulled-back frame fields and their arc-length derivatives at time s0."""
    imax = stencil.imax if imax is None else imax
    if not seg.t0 <= s0 <= seg.t1:
        raise StencilOutOfRange(f"time {s0} outside segment [{seg.t0}, {seg.t1}]")
    x0, p0 = seg.state(s0)
    speed = math.sqrt(max(0.0, float(np.sum((s.frame(x0) @ p0) ** 2))))
    _recover_controls(s, x0, p0)
    n, k = s.dim, s.rank
    if speed == 0.0:
        zeros = [np.zeros((k, n))] * (imax - 1)
        return FlagBasis(s0, x0, p0, [s.frame(x0)] + zeros, np.zeros(1))

    phat = p0 / speed
    # nodes in arc length, shifted to stay inside the segment
    half = (stencil.points - 1) / 2.0
    base = (np.arange(stencil.points) - half) * stencil.spacing
    lo = (seg.t0 - s0) * speed
    hi = (seg.t1 - s0) * speed
    width = base[-1] - base[0]
    if width > hi - lo + 1e-15:
        raise StencilOutOfRange(f"segment arc length {hi - lo:.3g} shorter than stencil {width:.3g}")
    shift = 0.0
    if base[0] < lo:
        shift = lo - base[0]
    elif base[-1] > hi:
        shift = hi - base[-1]
    offsets = base + shift

    states = _pullback_states(s, x0, phat, [float(o) for o in offsets if o != 0.0], stencil.substep)
    V = np.empty((len(offsets), k, n))
    for j, o in enumerate(offsets):
        xo, po, J = states[0.0 if o == 0.0 else float(o)]
        if o != 0.0:
            _recover_controls(s, xo, po)
        V[j] = np.linalg.solve(J, s.frame(xo).T).T
    by_order = [s.frame(x0)]
    for l in range(1, imax):
        w = fd_weights(offsets, l)
        by_order.append(np.einsum("j,jka->ka", w, V))
    return FlagBasis(s0, x0, p0, by_order, offsets)


def _rank(vectors, rtol, scale):
    if vectors.size == 0:
        return 0
    sv = np.linalg.svd(vectors, compute_uv=False)
    return int(np.sum(sv > rtol * scale))


def growth_vector(s, seg, s0, stencil=FLAG_DEFAULT):
    """Growth vector, ampleness and geodesic dimension of seg at time s0.

    >>> from srbm.structures import load_structure
    >>> h = load_structure("heisenberg")
    >>> seg = GeodesicSegment(h, [0, 0, 0], [1.0, 0.5, 0.3], -1, 1)
    >>> growth_vector(h, seg, 0.0).growth_vector
    (2, 3)
    """
    fb = flag_basis(s, seg, s0, stencil=stencil)
    scale = np.linalg.svd(fb.by_order[0], compute_uv=False)[0]
    ks = []
    step = None
    for i in range(1, stencil.imax + 1):
        ks.append(_rank(fb.collection(i), stencil.rtol, scale))
        if ks[-1] == s.dim:
            step = i
            break
    ample = step is not None
    return GrowthData(
        growth_vector=tuple(ks),
        step=step,
        ample=ample,
        geodesic_dimension=geodesic_dimension_formula(ks) if ample else math.inf,
        base=(tuple(fb.point.tolist()), tuple(fb.covector.tolist())),
        time=float(s0),
    )


def ampleness_on_grid(s, seg, num=33, stencil=FLAG_DEFAULT):
    """Growth data at ``num`` uniformly spaced times of the segment."""
    return [growth_vector(s, seg, float(t), stencil) for t in np.linspace(seg.t0, seg.t1, num)]


def sphere_covectors(n, count=64, seed=0):
    """Deterministic low-discrepancy sample of unit covectors."""
    u = qmc.Sobol(d=n, scramble=True, seed=seed).random(count)
    g = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def scan_covectors(s, x, covectors=None, count=64, stencil=FLAG_DEFAULT, cfg=DEFAULT):
    """Growth data at time 0 for each sampled covector at x.

    Each covector is rescaled to unit speed; covectors annihilating the
    distribution give constant curves and are reported as non-ample.
    """
    x = np.asarray(x, dtype=float)
    s.require_in_chart(x)
    if covectors is None:
        covectors = sphere_covectors(s.dim, count)
    half = stencil.spacing * stencil.points
    out = []
    for p in np.atleast_2d(covectors):
        u = s.frame(x) @ p
        speed = float(np.linalg.norm(u))
        if speed < 1e-12 * max(1.0, np.linalg.norm(p)):
            out.append((p, GrowthData((s.rank,), None, False, math.inf, (tuple(x), tuple(p)), 0.0)))
            continue
        seg = GeodesicSegment(s, x, p / speed, -half, half, cfg)
        out.append((p / speed, growth_vector(s, seg, 0.0, stencil)))
    return out


def geodesic_dimension_at(s, x, covectors=None, count=64, stencil=FLAG_DEFAULT, cfg=DEFAULT):
    """Minimum of the finite N_{x,p} over sampled covectors."""
    best = minimal_geodesic_covector(s, x, covectors, count, stencil, cfg)
    return int(best[1].geodesic_dimension)


def minimal_geodesic_covector(s, x, covectors=None, count=64, stencil=FLAG_DEFAULT, cfg=DEFAULT):
    """(covector, GrowthData) attaining the sampled minimum of N_{x,p}.

    Ties are broken towards the covector with the largest horizontal part,
    i.e. the largest H(x, p) / |p|^2.
    """
    scanned = scan_covectors(s, x, covectors, count, stencil, cfg)
    ample = [(p, g) for p, g in scanned if g.ample]
    if not ample:
        raise NoAmpleFound(f"no ample covector among {len(scanned)} samples at {np.asarray(x).tolist()}")
    low = min(g.geodesic_dimension for _, g in ample)
    cands = [(p, g) for p, g in ample if g.geodesic_dimension == low]
    return max(cands, key=lambda pg: 1.0 / float(np.dot(pg[0], pg[0])))

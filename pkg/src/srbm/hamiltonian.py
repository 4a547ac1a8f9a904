"""Hamiltonian flow of normal extremals and its variational equation.

H(x, p) = 1/2 sum_i <p, X_i(x)>^2. Trajectories are integrated with a fixed
step classical Runge-Kutta scheme; the sensitivity matrix d(x, p)/d(x0, p0)
is carried along by integrating the linearized field on the same steps.

Batched routines take points and covectors of shape (B, n) and work in an
(n, B) layout internally.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import LeftChart, OutOfChart, StepBudget


@dataclass(frozen=True)
class IntegratorConfig:
    step: float = 1e-3
    method: str = "rk4"
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.method != "rk4":
            raise ValueError(f"unsupported method {self.method!r}")

    def n_steps(self, t):
        return max(1, math.ceil(abs(t) / self.step - 1e-9))


DEFAULT = IntegratorConfig()


@dataclass
class PhaseState:
    x: np.ndarray
    p: np.ndarray
    sensitivity: np.ndarray | None = None
    time: float = 0.0


def hamiltonian_value(s, x, p):
    """1/2 sum_i <p, X_i(x)>^2, vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    s.require_in_chart(x)
    X = s.frame(x)
    u = np.einsum("...ka,...a->...k", X, p)
    return 0.5 * np.sum(u * u, axis=-1)


def controls(s, x, p):
    """u_i = <p, X_i(x)>, the controls of the normal geodesic."""
    return np.einsum("...ka,...a->...k", s.frame(x), np.asarray(p, dtype=float))


def _field(cf, xT, pT):
    X, DX = cf.values_and_jacobians(xT)
    u = np.einsum("iab,ab->ib", X, pT)
    xd = np.einsum("ib,iab->ab", u, X)
    g = np.einsum("iacb,ab->icb", DX, pT)
    pd = -np.einsum("ib,icb->cb", u, g)
    return xd, pd


def _field_and_linearization(cf, xT, pT):
    X, DX, D2X = cf.all_derivatives(xT)
    u = np.einsum("iab,ab->ib", X, pT)
    g = np.einsum("iacb,ab->icb", DX, pT)
    xd = np.einsum("ib,iab->ab", u, X)
    pd = -np.einsum("ib,icb->cb", u, g)
    h = np.einsum("iacdb,ab->icdb", D2X, pT)
    Fxx = np.einsum("iab,icb->acb", X, g) + np.einsum("ib,iacb->acb", u, DX)
    Fxp = np.einsum("iab,icb->acb", X, X)
    Fpx = -(np.einsum("icb,idb->cdb", g, g) + np.einsum("ib,icdb->cdb", u, h))
    Fpp = -(np.einsum("icb,idb->cdb", g, X) + np.einsum("ib,idcb->cdb", u, DX))
    F = np.concatenate(
        [np.concatenate([Fxx, Fxp], axis=1), np.concatenate([Fpx, Fpp], axis=1)], axis=0
    )
    return xd, pd, np.moveaxis(F, -1, 0)


def _check_chart(s, xT, pT, escape):
    lo = s.chart_bounds[:, :1]
    hi = s.chart_bounds[:, 1:]
    out = np.any((xT < lo) | (xT > hi), axis=0)
    if out.any():
        if escape == "raise":
            raise LeftChart(f"trajectory left the chart of {s.name}")
        xT[:, out] = np.nan
        pT[:, out] = np.nan


def integrate(s, x, p, t, cfg=DEFAULT, sensitivity=False, S0=None, marks=(), escape="raise"):
    """Integrate B trajectories from (x, p) over time ``t`` (negative allowed).

    Returns ``(x_t, p_t, S_t, marked)`` where ``S_t`` is the (B, 2n, 2n)
    sensitivity (None unless requested) and ``marked`` maps each time in
    ``marks`` (same sign as ``t``, inside [0, t]) to the (x, p) pair there,
    extended by the sensitivity when it is carried.
    The interval is cut at the marks and each piece uses equal steps no
    longer than ``cfg.step``. With ``escape="mask"`` trajectories leaving
    the chart are replaced by NaN instead of raising LeftChart.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    B, n = x.shape
    cf = s.compiled
    inside = s.in_chart(x)
    if escape != "raise":
        inside |= np.isnan(x).any(axis=1)
    if not np.all(inside):
        raise OutOfChart(f"initial point outside chart of {s.name}")
    xT = x.T.copy()
    pT = p.T.copy()
    S = None
    if sensitivity:
        S = np.broadcast_to(np.eye(2 * n), (B, 2 * n, 2 * n)).copy() if S0 is None else np.array(S0, dtype=float).reshape(B, 2 * n, 2 * n)

    cuts = sorted({float(m) for m in marks if 0 < abs(m) < abs(t) and m * t > 0}, key=abs)
    knots = [0.0] + cuts + [float(t)]
    total_steps = sum(cfg.n_steps(b - a) for a, b in zip(knots[:-1], knots[1:]) if b != a)
    if total_steps > cfg.max_steps:
        raise StepBudget(f"{total_steps} steps needed, budget {cfg.max_steps}")
    marked = {}
    for a, b in zip(knots[:-1], knots[1:]):
        if b == a:
            continue
        m = cfg.n_steps(b - a)
        dt = (b - a) / m
        for _ in range(m):
            if S is None:
                k1x, k1p = _field(cf, xT, pT)
                k2x, k2p = _field(cf, xT + 0.5 * dt * k1x, pT + 0.5 * dt * k1p)
                k3x, k3p = _field(cf, xT + 0.5 * dt * k2x, pT + 0.5 * dt * k2p)
                k4x, k4p = _field(cf, xT + dt * k3x, pT + dt * k3p)
            else:
                k1x, k1p, F1 = _field_and_linearization(cf, xT, pT)
                k1S = F1 @ S
                k2x, k2p, F2 = _field_and_linearization(cf, xT + 0.5 * dt * k1x, pT + 0.5 * dt * k1p)
                k2S = F2 @ (S + 0.5 * dt * k1S)
                k3x, k3p, F3 = _field_and_linearization(cf, xT + 0.5 * dt * k2x, pT + 0.5 * dt * k2p)
                k3S = F3 @ (S + 0.5 * dt * k2S)
                k4x, k4p, F4 = _field_and_linearization(cf, xT + dt * k3x, pT + dt * k3p)
                k4S = F4 @ (S + dt * k3S)
                S = S + (dt / 6.0) * (k1S + 2 * k2S + 2 * k3S + k4S)
            xT = xT + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
            pT = pT + (dt / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
            _check_chart(s, xT, pT, escape)
        if b in cuts:
            marked[b] = (xT.T.copy(), pT.T.copy()) if S is None else (xT.T.copy(), pT.T.copy(), S.copy())
    return xT.T.copy(), pT.T.copy(), S, marked


def flow(s, start, t, cfg=DEFAULT, with_sensitivity=False):
    """Psi(t) from ``start``; with_sensitivity also carries d(x, p)/d(x0, p0)."""
    S0 = None
    if with_sensitivity and start.sensitivity is not None:
        S0 = start.sensitivity[None]
    x, p, S, _ = integrate(s, start.x, start.p, t, cfg, sensitivity=with_sensitivity, S0=S0)
    return PhaseState(
        x=x[0], p=p[0], sensitivity=None if S is None else S[0], time=start.time + t
    )


def exp_map(s, x, p, t=1.0, cfg=DEFAULT):
    """E_x(t p): base projection of the flow from (x, p) after time t.

    A leading batch axis on x and p is carried through.
    """
    x = np.asarray(x, dtype=float)
    if t == 0:
        s.require_in_chart(x)
        return x.copy()
    xt, _, _, _ = integrate(s, x, p, t, cfg)
    return xt[0] if x.ndim == 1 else xt


def exp_differential(s, x, p, t=1.0, cfg=DEFAULT):
    """Derivative of p -> E_x(t p) at the given covector (n x n, or B x n x n for batches)."""
    n = s.dim
    single = np.ndim(x) == 1
    if t == 0:
        shape = (n, n) if single else (len(x), n, n)
        return np.zeros(shape)
    _, _, S, _ = integrate(s, x, p, t, cfg, sensitivity=True)
    return S[0, :n, n:] if single else S[:, :n, n:]


def exp_map_batch(s, x, p, t=1.0, cfg=DEFAULT):
    xt, pt, _, _ = integrate(s, x, p, t, cfg)
    return xt, pt


def exp_differential_batch(s, x, p, t=1.0, cfg=DEFAULT):
    """Endpoints, end covectors and the p-derivative blocks for B initial conditions."""
    n = s.dim
    xt, pt, S, _ = integrate(s, x, p, t, cfg, sensitivity=True)
    return xt, pt, S[:, :n, n:]


def trajectory(s, x, p, t, cfg=DEFAULT, samples=101):
    """Rows (t, x_1..x_n, p_1..p_n, H) at ``samples`` uniformly spaced times."""
    times = np.linspace(0.0, t, samples)
    xt, pt, _, marked = integrate(s, x, p, t, cfg, marks=times[1:-1])
    rows = []
    for tau in times:
        if tau == 0:
            xx, pp = np.asarray(x, float), np.asarray(p, float)
        elif tau == times[-1]:
            xx, pp = xt[0], pt[0]
        else:
            xx, pp = marked[float(tau)][0][0], marked[float(tau)][1][0]
        rows.append([float(tau), *xx, *pp, float(hamiltonian_value(s, xx, pp))])
    return np.array(rows)


def write_trajectory_csv(path_or_file, rows, n):
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)] + ["H"]
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    finally:
        if own:
            fh.close()

"""Constructive failure of Brunn-Minkowski inequalities.

Given an ample geodesic, the pieces are: the contraction law of the mid
point map (``contraction_fit``), the ratio at which the inverse geodesic map
preserves volume at b (``find_unit_ratio``), the sets B = B(b, rho) and
A = I_m^r(B) (``build_sets``), an outer voxel cover of the mid set
(``midset_volume_upper``), and the distortion coefficients with the signed
BM(K, N) margins (``tau``, ``bm_margin``). ``run_pipeline`` chains them.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.spatial import ConvexHull, distance
from scipy.special import gamma
from scipy.stats import qmc

from . import __version__
from .errors import (
    ChartOverflow,
    DegenerateDimension,
    NoBracket,
    NoConvergence,
    PipelineError,
    PoorFit,
    SampleBudget,
    SingularJacobian,
    SmoothnessLost,
    SRError,
    UnsupportedCurvature,
)
from .flag import minimal_geodesic_covector
from .geodesy import (
    SUBMERSION_RTOL,
    inverse_geodesic_jacobian,
    midpoint_jacobian,
    reverse,
    segment_costate,
    shoot_batch,
    smooth_pair,
)
from .hamiltonian import DEFAULT, IntegratorConfig, exp_differential, exp_map, integrate

FIT_RESIDUAL_MAX = 1e-2
K_GRID = (0.0, -1.0, -10.0)
N_GRID = (1.5, 2.0, 3.0, 5.0, 10.0)
SET_STEP = 1.0 / 16
CURVATURE_NOTE = (
    "K > 0 is not evaluated: BM(K', N) implies BM(K, N) for every K <= K', "
    "so a violation of BM(0, N) is a violation of BM(K, N) for all K >= 0."
)
THETA_NOTE = (
    "Theta is the largest length of a sampled connecting geodesic from A to B, "
    "times 1.05; lengths bound the distance from above."
)


def split_epsilon(eps):
    """eps1 = eps2 with (1 + eps1)(1 + eps2) = 1 + eps/2."""
    e = math.sqrt(1.0 + eps / 2.0) - 1.0
    return e, e


def ball_volume(n, radius):
    return math.pi ** (n / 2) / gamma(n / 2 + 1) * radius**n


def sphere_area(n):
    """Area of the unit sphere in R^n."""
    return 2 * math.pi ** (n / 2) / gamma(n / 2)


# contraction law ----------------------------------------------------------


@dataclass
class ContractionFit:
    base: tuple
    covector: tuple
    C: float
    exponent: float
    t_min: float
    t_max: float
    residual: float
    times: list
    jacobians: list
    epsilon: float

    @property
    def alpha(self):
        """Largest grid time up to which |J| stays in the (1+eps) bracket."""
        return self.t_max

    def as_dict(self):
        return asdict(self)


def _jacobians_on_grid(s, a, p, times, cfg):
    n = s.dim
    _, _, S1, marked = integrate(s, a, p, 1.0, cfg, sensitivity=True, marks=times)
    d1 = np.linalg.det(S1[0, :n, n:])
    out = []
    for t in times:
        St = S1 if t == 1.0 else marked[float(t)][2]
        out.append(np.linalg.det(St[0, :n, n:]) / d1)
    return np.array(out)


def contraction_fit(s, a, p, t_grid=None, cfg=DEFAULT, epsilon=0.1, max_residual=FIT_RESIDUAL_MAX):
    """Power law |Jac M^t_{a,.}(E_a(p))| ~ C t^N fitted in log-log coordinates.

    ``t_grid`` must lie in (0, 1), be logarithmically spaced and have at
    least 8 points. The fit residual is the root-mean-square deviation of
    log|J| from the line.
    """
    t = np.geomspace(1e-3, 1e-1, 9) if t_grid is None else np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or len(t) < 8:
        raise ValueError("t_grid needs at least 8 points")
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError("t_grid must lie in (0, 1)")
    t = np.sort(t)
    steps = np.diff(np.log(t))
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=0):
        raise ValueError("t_grid must be logarithmically spaced")
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    cert = smooth_pair(s, a, p, cfg)
    if not cert.submersion:
        raise SingularJacobian(f"segment endpoint is not a smooth pair (min singular {cert.min_singular:.3e})")
    J = np.abs(_jacobians_on_grid(s, a, p, t, cfg))
    if np.any(J <= 0) or not np.all(np.isfinite(J)):
        raise SingularJacobian("mid point Jacobian vanished on the grid")
    lx, ly = np.log(t), np.log(J)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = float(np.sqrt(np.mean((ly - (slope * lx + intercept)) ** 2)))
    if resid > max_residual:
        raise PoorFit(f"log-log residual {resid:.3e} above {max_residual:.1e}")
    C = math.exp(intercept)
    model = C * t**slope
    inside = (J <= model * (1 + epsilon)) & (J >= model / (1 + epsilon))
    last = len(t) if inside.all() else int(np.argmin(inside))
    t_max = float(t[last - 1]) if last > 0 else float(t[0])
    return ContractionFit(
        base=tuple(a.tolist()),
        covector=tuple(p.tolist()),
        C=C,
        exponent=float(slope),
        t_min=float(t[0]),
        t_max=t_max,
        residual=resid,
        times=t.tolist(),
        jacobians=J.tolist(),
        epsilon=epsilon,
    )


# unit ratio ---------------------------------------------------------------


@dataclass
class UnitRatio:
    r: float
    a: np.ndarray
    p: np.ndarray
    b: np.ndarray
    m: np.ndarray
    q_m: np.ndarray
    jacobian: float
    swapped: bool
    evaluations: int

    def as_dict(self):
        return {
            "r": self.r,
            "a": self.a.tolist(),
            "p": self.p.tolist(),
            "b": self.b.tolist(),
            "m": self.m.tolist(),
            "q_m": self.q_m.tolist(),
            "jacobian": self.jacobian,
            "swapped": self.swapped,
            "evaluations": self.evaluations,
        }


def inverse_jacobian_at_ratio(s, a, p, r, cfg=DEFAULT):
    """|Jac I_m^r(b)| with b = E_a(p), m = E_a(r p)."""
    m, q = segment_costate(s, a, p, r, cfg)
    return abs(inverse_geodesic_jacobian(s, m, q, r, cfg))


def find_unit_ratio(s, a, p, cfg=DEFAULT, delta=1e-3, tol=1e-6):
    """Ratio r in (0, 1/2] where I_m^r preserves volume at b.

    The sign change of log|Jac I_m^r(b)| between r = delta and r = 1 - delta
    brackets the root, which is then located by Brent's method. When the
    root exceeds 1/2 the roles of a and b are exchanged.

    >>> from srbm.structures import load_structure
    >>> e = load_structure("euclidean_test")
    >>> round(find_unit_ratio(e, [0, 0, 0], [0.3, 0.1, 0.0]).r, 9)
    0.5
    """
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    calls = [0]

    def g(r):
        calls[0] += 1
        return math.log(inverse_jacobian_at_ratio(s, a, p, r, cfg))

    lo, hi = g(delta), g(1 - delta)
    if not (lo < 0 < hi):
        raise NoBracket(f"|Jac I| at the ends: {math.exp(lo):.3e}, {math.exp(hi):.3e}")
    r, info = optimize.brentq(g, delta, 1 - delta, xtol=1e-15, rtol=1e-15, full_output=True)
    if not info.converged:
        raise NoConvergence("ratio search did not converge")
    jac = math.exp(g(r))
    if abs(jac - 1) >= tol:
        raise NoConvergence(f"|Jac I| = {jac!r} at the located ratio")
    swapped = False
    if r > 0.5:
        b, q = reverse(s, a, p, cfg)
        a, p, r, swapped = b, q, 1.0 - r, True
    b = exp_map(s, a, p, 1.0, cfg)
    m, q_m = segment_costate(s, a, p, r, cfg)
    jac = abs(inverse_geodesic_jacobian(s, m, q_m, r, cfg))
    return UnitRatio(float(r), a, p, b, m, q_m, jac, swapped, calls[0])


# distortion coefficients and margins ----------------------------------------


@dataclass(frozen=True)
class BMParams:
    K: float
    N: float
    theta: float
    t: float

    def __post_init__(self):
        if self.K > 0:
            raise UnsupportedCurvature("K > 0 is not supported")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if not 0 <= self.t <= 1:
            raise ValueError("t must lie in [0, 1]")


def _sinhc(y):
    """sinh(y) / y, equal to 1 up to rounding below 1e-8."""
    return 1.0 if y < 1e-8 else math.sinh(y) / y


def _log_sinh(y):
    return y + math.log1p(-math.exp(-2 * y)) - math.log(2)


def tau(K, N, t, theta):
    """Distortion coefficient tau_t^{K,N}(theta) for K <= 0.

    >>> tau(0.0, 3.0, 0.25, 1.0)
    0.25
    >>> tau(-1.0, 2.0, 1.0, 2.0)
    1.0
    """
    if K > 0:
        raise UnsupportedCurvature("tau is only available for K <= 0")
    if not 0 <= t <= 1:
        raise ValueError("t must lie in [0, 1]")
    if theta < 0:
        raise ValueError("theta must be >= 0")
    if K == 0:
        return float(t)
    if N == 1:
        raise DegenerateDimension("K < 0 needs N > 1")
    if N < 1:
        raise ValueError("N must be >= 1")
    if t == 0 or t == 1 or theta == 0:
        return float(t)
    x = theta * math.sqrt(-K / (N - 1))
    if x < 20:
        # t^(1/N) (sinh(tx)/sinh(x))^(1-1/N) with the factor t pulled out exactly
        return t * (_sinhc(t * x) / _sinhc(x)) ** (1 - 1 / N)
    # large arguments: work with logarithms so that sinh never overflows
    tx = t * x
    num = math.log(math.sinh(tx)) if tx < 20 else _log_sinh(tx)
    return math.exp(math.log(t) / N + (1 - 1 / N) * (num - _log_sinh(x)))


@dataclass(frozen=True)
class SetVolumes:
    a: float
    b: float
    midset: float


def bm_margin(volumes, params):
    """mu(M)^{1/N} - [tau_{1-t} mu(A)^{1/N} + tau_t mu(B)^{1/N}]; negative means violation."""
    K, N, th, t = params.K, params.N, params.theta, params.t
    return volumes.midset ** (1 / N) - (
        tau(K, N, 1 - t, th) * volumes.a ** (1 / N) + tau(K, N, t, th) * volumes.b ** (1 / N)
    )


# configuration near the segment ---------------------------------------------


@dataclass
class Configuration:
    """Reference data of the segment a -> b with mid point m at ratio r."""

    a: np.ndarray
    p: np.ndarray
    b: np.ndarray
    m: np.ndarray
    q_m: np.ndarray
    r: float
    A_end: np.ndarray  # dE_a/dp at p
    A_mid: np.ndarray  # dE_m/dq at q_m
    D: np.ndarray  # derivative of y -> M(a, y, r) at b

    @property
    def f(self):
        return self.r / (1 - self.r)


def configuration(s, a, p, r, cfg=DEFAULT):
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    b = exp_map(s, a, p, 1.0, cfg)
    m, q_m = segment_costate(s, a, p, r, cfg)
    A_end = exp_differential(s, a, p, 1.0, cfg)
    A_r = exp_differential(s, a, p, r, cfg)
    A_mid = exp_differential(s, m, q_m, 1.0, cfg)
    D = np.linalg.solve(A_end.T, A_r.T).T
    return Configuration(a, p, b, m, q_m, float(r), A_end, A_mid, D)


# sets A and B ---------------------------------------------------------------


@dataclass
class BallSet:
    center: np.ndarray
    radius: float

    @property
    def volume(self):
        return ball_volume(len(self.center), self.radius)

    def sample(self, rng, k):
        return self.center + uniform_ball(rng, k, len(self.center)) * self.radius

    def contains(self, y):
        return np.linalg.norm(np.asarray(y) - self.center, axis=-1) <= self.radius


@dataclass
class ImageSet:
    """A = I_m^r(B) with its change-of-variables volume estimate."""

    structure: object = field(repr=False)
    conf: Configuration = field(repr=False)
    ball: BallSet
    cfg: IntegratorConfig = field(repr=False)
    volume: float = float("nan")
    jacobian_range: tuple = (float("nan"), float("nan"))
    quadrature_points: int = 0
    cloud: np.ndarray = field(default=None, repr=False)
    ball_cloud: np.ndarray = field(default=None, repr=False)

    def covectors_at_m(self, y):
        """Covectors xi at m with E_m(xi) = y for points y of B."""
        s, c = self.structure, self.conf
        y = np.atleast_2d(y)
        guess = c.q_m + np.linalg.solve(c.A_mid, (y - c.b).T).T
        xi, _, ok, _ = shoot_batch(s, np.tile(c.m, (len(y), 1)), y, guess, c.A_mid, self.cfg)
        if not ok.all():
            raise SmoothnessLost(f"{int((~ok).sum())} points of B could not be reached from m")
        return xi

    def push(self, y):
        """I_m^r(y) for points y of B."""
        xi = self.covectors_at_m(y)
        return integrate(self.structure, np.tile(self.conf.m, (len(xi), 1)), -self.conf.f * xi, 1.0, self.cfg)[0]

    def sample(self, rng, k):
        return self.push(self.ball.sample(rng, k))


def uniform_ball(rng, k, n):
    g = rng.standard_normal((k, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random((k, 1)) ** (1.0 / n)


def _qmc_ball(n, count, seed):
    """Scrambled Sobol points of the cube kept inside the unit ball."""
    pts = qmc.Sobol(d=n, scramble=True, seed=seed).random(count) * 2 - 1
    return pts[np.linalg.norm(pts, axis=1) <= 1]


def build_sets(s, conf, rho, cfg=None, quadrature=4096, seed=0):
    """B = B(b, rho) and A = I_m^r(B) with vol(A) = int_B |Jac I_m^r|."""
    cfg = cfg or IntegratorConfig(step=SET_STEP)
    n = s.dim
    ball = BallSet(conf.b.copy(), float(rho))
    lo, hi = s.chart_bounds[:, 0], s.chart_bounds[:, 1]
    if np.any(conf.b - rho < lo) or np.any(conf.b + rho > hi):
        raise ChartOverflow(f"B(b, {rho:.3g}) leaves the chart")
    y = conf.b + rho * _qmc_ball(n, quadrature, seed)
    image = ImageSet(s, conf, ball, cfg)
    xi = image.covectors_at_m(y)
    m = np.tile(conf.m, (len(y), 1))
    _, _, S = integrate(s, m, xi, 1.0, cfg, sensitivity=True)[:3]
    A_q = S[:, :n, n:]
    ends, _, S2 = integrate(s, m, -conf.f * xi, 1.0, cfg, sensitivity=True)[:3]
    A_f = S2[:, :n, n:]
    sv = np.linalg.svd(A_q, compute_uv=False)
    bad = sv[:, -1] <= SUBMERSION_RTOL * sv[:, 0]
    if bad.any():
        raise SmoothnessLost(f"{int(bad.sum())} sampled pairs fail the submersion test")
    jac = conf.f**n * np.abs(np.linalg.det(A_f) / np.linalg.det(A_q))
    image.volume = float(ball.volume * jac.mean())
    image.jacobian_range = (float(jac.min()), float(jac.max()))
    image.quadrature_points = len(y)
    image.cloud = ends
    image.ball_cloud = y
    return ball, image


# mid set --------------------------------------------------------------------


@dataclass
class MidsetEstimate:
    volume_upper: float
    volume_lower: float
    cell_volume: float
    cell_side: float  # edge of a cell in the linearized coordinates w
    resolution: int
    pairs: int
    accepted: int
    hit_cells: int
    cover_cells: int
    rounds: list
    theta_upper: float
    max_length: float
    D_det: float
    converged: bool
    escaped: int
    cloud: np.ndarray = field(repr=False)

    def as_dict(self):
        d = asdict(self)
        d.pop("cloud")
        return d


def _pair_targets(rng, k, n, rho, res, shell_fraction):
    """Target pairs (p, q) in B(0, rho)^2 concentrated where |q - p| is near 2 rho."""
    dirs = rng.standard_normal((k, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    shell = rng.random(k) < shell_fraction
    radius = np.where(
        shell,
        2 * rho * (1 - 3.0 / res * rng.random(k)),
        2 * rho * rng.random(k) ** (1.0 / n),
    )
    w = dirs * radius[:, None]
    c = uniform_ball(rng, k, n) * (rho - radius / 2)[:, None]
    # pulled in slightly so that converged shots stay inside the ball
    shrink = 1 - 1e-4
    return shrink * (c - w / 2), shrink * (c + w / 2)


def midpoint_pairs(s, conf, p_target, q_target, cfg, tol, max_iter=8):
    """Mid points F(p, q) = M^r(I_m^r(p), q) for pairs near the targets.

    The pair is parametrized by covectors: xi at m with E_m(xi) = p, found
    by chord-Newton from the linearization at b, gives a' = I_m^r(p) =
    E_m(-f xi); a covector kappa at a' with E_{a'}(kappa) = q is found the
    same way, and F = E_{a'}(r kappa). Returned points p, q are the ones
    actually reached, so every F is an exact mid point (up to integration
    error) of the pair it belongs to, converged or not.
    """
    k = len(p_target)
    f, r = conf.f, conf.r
    ms = np.tile(conf.m, (k, 1))
    guess = conf.q_m + np.linalg.solve(conf.A_mid, (p_target - conf.b).T).T
    xi, p_act, _, _ = shoot_batch(s, ms, p_target, guess, conf.A_mid, cfg, tol, max_iter)
    a_prime, P = integrate(s, ms, -f * xi, 1.0, cfg, escape="mask")[:2]
    guess = -P / r + np.linalg.solve(conf.A_end, (q_target - p_act).T).T
    kappa, y, _, marked = shoot_batch(s, a_prime, q_target, guess, conf.A_end, cfg, tol, max_iter, marks=(r,))
    F = marked[float(r)][0]
    u = np.einsum("bka,ba->bk", s.frame(a_prime), kappa)
    length = np.sqrt(np.sum(u * u, axis=1))
    return p_act, y, F, length


def _cover(hits):
    """Cells hit, grown by one layer (diagonals included), with enclosed holes filled."""
    idx = np.nonzero(hits)
    lo = [max(0, int(i.min()) - 2) for i in idx]
    hi = [int(i.max()) + 3 for i in idx]
    box = hits[tuple(slice(a, b) for a, b in zip(lo, hi))]
    box = np.pad(box, 2)
    grown = ndimage.binary_dilation(box, structure=np.ones((3,) * hits.ndim, dtype=bool))
    return int(ndimage.binary_fill_holes(grown).sum())


def default_resolution(n):
    """Cells per radius of the linearized mid set, capped so the grid stays below ~3e7 cells."""
    return int(min(120, (3e7) ** (1 / n) / 2.6))


def midset_volume_upper(
    s,
    conf,
    rho,
    rng,
    cfg=None,
    resolution=None,
    pairs=100_000,
    max_pairs=4_000_000,
    tol=0.01,
    shell_fraction=0.85,
    coverage=1.5,
    stop_above=None,
    chunk=100_000,
    cloud_size=20_000,
):
    """Outer cell cover of M_r = {F(p, q) : p, q in B(b, rho)}.

    Cells are cubes of side 2 rho / resolution in the coordinates
    w = D^{-1}(F - m), where D is the derivative of y -> M(a, y, r) at b; in
    these coordinates the first-order mid set is the ball B(0, 2 rho). Cells
    hit by a computed mid point are grown by one layer and enclosed holes are
    filled.

    The first round uses at least ``coverage`` pairs per boundary cell of the
    linearized set; the pair count then doubles until the cover changes by
    less than ``tol``, and exceeding ``max_pairs`` raises SampleBudget. The
    cover only grows with more pairs, so sampling stops early once it
    exceeds ``stop_above``. Mid points beyond 1.3 times the linearized
    radius make the cover unbounded on this grid: the estimate is then
    infinite.
    """
    cfg = cfg or IntegratorConfig(step=SET_STEP)
    n = s.dim
    res = resolution or default_resolution(n)
    h = 2 * rho / res
    Dinv = np.linalg.inv(conf.D)
    det = abs(float(np.linalg.det(conf.D)))
    cell = det * h**n
    G = int(math.ceil(1.3 * res)) + 3
    hits = np.zeros((2 * G,) * n, dtype=bool)
    target = max(int(pairs), int(math.ceil(coverage * sphere_area(n) * res ** (n - 1))))
    total = accepted = escaped = 0
    max_len = 0.0
    rounds = []
    cloud = []
    prev = None
    converged = False
    while True:
        if target > max_pairs:
            raise SampleBudget(f"cover not stable after {total} pairs (budget {max_pairs})")
        while total < target:
            k = min(chunk, target - total)
            pt, qt = _pair_targets(rng, k, n, rho, res, shell_fraction)
            p_act, y, F, length = midpoint_pairs(s, conf, conf.b + pt, conf.b + qt, cfg, 1e-5 * rho)
            ok = (np.linalg.norm(p_act - conf.b, axis=1) <= rho) & (np.linalg.norm(y - conf.b, axis=1) <= rho)
            ok &= np.all(np.isfinite(F), axis=1)
            cells = np.floor((F[ok] - conf.m) @ Dinv.T / h).astype(np.int64) + G
            inside = np.all((cells >= 1) & (cells <= 2 * G - 2), axis=1)
            escaped += int((~inside).sum())
            hits[tuple(cells[inside].T)] = True
            total += k
            accepted += int(ok.sum())
            if ok.any():
                max_len = max(max_len, float(length[ok].max()))
            have = sum(len(c) for c in cloud)
            if have < cloud_size:
                cloud.append(F[ok][: cloud_size - have])
            if escaped:
                break
        if escaped:
            count, est = int(hits.sum()), math.inf
            rounds.append({"pairs": total, "accepted": accepted, "cover_cells": None, "volume_upper": est})
            break
        count = _cover(hits)
        est = count * cell
        rounds.append({"pairs": total, "accepted": accepted, "cover_cells": count, "volume_upper": est})
        if prev is not None and abs(est - prev) <= tol * prev:
            converged = True
            break
        if stop_above is not None and est > stop_above:
            break
        prev = est
        target = 2 * total
    hit_cells = int(hits.sum())
    return MidsetEstimate(
        volume_upper=est,
        volume_lower=hit_cells * cell,
        cell_volume=cell,
        cell_side=h,
        resolution=res,
        pairs=total,
        accepted=accepted,
        hit_cells=hit_cells,
        cover_cells=count,
        rounds=rounds,
        theta_upper=1.05 * max_len,
        max_length=max_len,
        D_det=det,
        converged=converged,
        escaped=escaped,
        cloud=np.concatenate(cloud) if cloud else np.zeros((0, n)),
    )


@dataclass
class Screen:
    """Coarse comparison of the mid set with its linearization."""

    rho: float
    resolution: int
    pairs: int
    ratio: float
    stable: bool
    escaped: int

    @property
    def passed(self):
        return self.stable and self.escaped == 0


def screen_linearization(s, conf, rho, rng, cfg=None, resolution=32, coverage=1.5, rounds=3, tol=0.02):
    """Cover of computed mid points over cover of m + D(q - p) on a coarse grid.

    Both covers are built from the same pairs, so sampling gaps affect them
    alike; a ratio near 1 means the mid set is still close to its
    linearization at this rho.
    """
    cfg = cfg or IntegratorConfig(step=SET_STEP)
    n = s.dim
    h = 2 * rho / resolution
    Dinv = np.linalg.inv(conf.D)
    G = int(math.ceil(1.3 * resolution)) + 3
    hits = np.zeros((2 * G,) * n, dtype=bool)
    lin = np.zeros_like(hits)
    per_round = int(math.ceil(coverage * sphere_area(n) * resolution ** (n - 1)))
    prev, ratio, total, escaped = None, math.inf, 0, 0
    for _ in range(rounds):
        pt, qt = _pair_targets(rng, per_round * max(1, total // per_round), n, rho, resolution, 0.85)
        p_act, y, F, _ = midpoint_pairs(s, conf, conf.b + pt, conf.b + qt, cfg, 1e-5 * rho)
        total += len(pt)
        ok = (np.linalg.norm(p_act - conf.b, axis=1) <= rho) & (np.linalg.norm(y - conf.b, axis=1) <= rho)
        ok &= np.all(np.isfinite(F), axis=1)
        cells = np.floor((F[ok] - conf.m) @ Dinv.T / h).astype(np.int64) + G
        inside = np.all((cells >= 1) & (cells <= 2 * G - 2), axis=1)
        escaped += int((~inside).sum())
        if escaped:
            return Screen(rho, resolution, total, math.inf, False, escaped)
        hits[tuple(cells.T)] = True
        lin[tuple((np.floor((y[ok] - p_act[ok]) / h).astype(np.int64) + G).T)] = True
        ratio = _cover(hits) / _cover(lin)
        if prev is not None and abs(ratio - prev) <= tol * prev:
            return Screen(rho, resolution, total, ratio, True, 0)
        prev = ratio
    return Screen(rho, resolution, total, ratio, False, 0)


# end-to-end -----------------------------------------------------------------


@dataclass
class CounterexampleReport:
    structure: str
    status: str = "ok"
    failed_stage: str | None = None
    diagnostics: dict = field(default_factory=dict)
    version: str = __version__
    seed: int = 0
    point: list = None
    radius: float = None
    epsilon: float = None
    epsilon1: float = None
    epsilon2: float = None
    dim: int = None
    geodesic_dimension: int = None
    growth_vector: list = None
    a: list = None
    b: list = None
    m: list = None
    covector: list = None
    reverse_covector: list = None
    segment_length: float = None
    ratio: float = None
    swapped: bool = None
    inverse_jacobian: float = None
    fits: dict = field(default_factory=dict)
    contraction_checks: dict = field(default_factory=dict)
    rho: float = None
    rho_history: list = field(default_factory=list)
    quadrature_points: int = None
    pairs: int = None
    accepted_pairs: int = None
    resolution: int = None
    cell_side: float = None
    cell_volume: float = None
    vol_A: float = None
    vol_B: float = None
    vol_M_upper: float = None
    vol_M_lower: float = None
    density_bracket: list = None
    mu_A: list = None
    mu_B: list = None
    mu_M_upper: float = None
    volume_ratio_AB: list = None
    theorem_ratio: float = None
    theta: float = None
    diameter_chart: float = None
    diameter_upper: float = None
    margins: list = field(default_factory=list)
    ratio_test_passed: bool = False
    all_margins_negative: bool = False
    invariants: dict = field(default_factory=dict)
    notes: list = field(default_factory=lambda: [CURVATURE_NOTE, THETA_NOTE])
    timings: dict = field(default_factory=dict, repr=False)
    cloud: np.ndarray = field(default=None, repr=False)

    def as_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k not in ("timings", "cloud")}
        return _plain(d)


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass(frozen=True)
class PipelineConfig:
    radius: float = 2.0
    epsilon: float = 0.1
    K_grid: tuple = K_GRID
    N_grid: tuple = N_GRID
    seed: int = 0
    covectors: int = 64
    segment_fraction: float = 0.4
    fit_grid: tuple = tuple(np.geomspace(1e-3, 0.95, 16).tolist())
    rho_halvings: int = 8
    set_step: float = SET_STEP
    resolution: int | None = None
    screen_resolution: int = 32
    pairs: int = 100_000
    max_pairs: int = 4_000_000
    quadrature: int = 4096
    sample_tol: float = 0.01

    def __post_init__(self):
        if not self.radius > 0 or not self.epsilon > 0 or self.epsilon > 1:
            raise ValueError("radius must be positive and epsilon in (0, 1]")
        if not 0 < self.segment_fraction < 0.5:
            raise ValueError("segment_fraction must lie in (0, 1/2)")


class _Stages:
    """Context manager timing each stage and tagging errors with its name."""

    def __init__(self, report):
        self.report = report
        self.name = None

    def __call__(self, name):
        self.name = name
        self.t0 = time.perf_counter()
        return self

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        self.report.timings[self.name] = self.report.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and isinstance(exc, SRError) and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def run_pipeline(s, x, pcfg=PipelineConfig(), cfg=DEFAULT):
    """End-to-end construction of sets A, B violating every BM(K, N) on the grid.

    A failing stage does not raise: the report carries status "failed", the
    stage name and the error message.
    """
    report = CounterexampleReport(structure=s.name, seed=pcfg.seed, point=[float(v) for v in x],
                                  radius=pcfg.radius, epsilon=pcfg.epsilon)
    try:
        _run(s, np.asarray(x, dtype=float), pcfg, cfg, report)
    except PipelineError as exc:
        report.status = "failed"
        report.failed_stage = exc.stage
        report.diagnostics = {"error": type(exc.cause).__name__, "message": str(exc.cause), **exc.diagnostics}
    return report


# errors confined to one rho level: the level is recorded as failed and rho halves
_LEVEL_ERRORS = (SmoothnessLost, SampleBudget, NoConvergence, ChartOverflow)


def _run(s, x, pcfg, cfg, report):
    n = s.dim
    eps = pcfg.epsilon
    e1, e2 = split_epsilon(eps)
    report.epsilon1, report.epsilon2, report.dim = e1, e2, n
    stage = _Stages(report)
    set_cfg = IntegratorConfig(step=pcfg.set_step)

    with stage("flag"):
        s.require_in_chart(x)
        phat, growth = minimal_geodesic_covector(s, x, count=pcfg.covectors, cfg=cfg)
        N = int(growth.geodesic_dimension)
        report.geodesic_dimension = N
        report.growth_vector = list(growth.growth_vector)

    with stage("segment"):
        # phat has unit speed, so the segment x -> E_x(L phat) has length L
        L = pcfg.segment_fraction * pcfg.radius
        p_full = L * phat
        cert = smooth_pair(s, x, p_full, cfg)
        if not cert.submersion or cert.conjugate_bound_ok is False:
            raise SingularJacobian(f"segment of length {L:.3g} is not a smooth pair")

    with stage("contraction"):
        fit = contraction_fit(s, x, p_full, pcfg.fit_grid, cfg, epsilon=e2 / 2)
        p = fit.alpha * p_full
        b = exp_map(s, x, p, 1.0, cfg)
        _, qb = reverse(s, x, p, cfg)
        back = contraction_fit(s, b, qb, pcfg.fit_grid, cfg, epsilon=e2 / 2)
        report.fits = {"forward": fit.as_dict(), "backward": back.as_dict()}

    with stage("ratio"):
        ur = find_unit_ratio(s, x, p, cfg)
        r = ur.r
        report.ratio, report.swapped, report.inverse_jacobian = r, ur.swapped, ur.jacobian
        report.a, report.b, report.m = ur.a.tolist(), ur.b.tolist(), ur.m.tolist()
        report.covector = ur.p.tolist()
        _, qrev = reverse(s, ur.a, ur.p, cfg)
        report.reverse_covector = qrev.tolist()
        report.segment_length = float(np.sqrt(np.sum((s.frame(ur.a) @ ur.p) ** 2)))

    with stage("contraction"):
        bound = (1 + e2 / 2) * r**N
        ja = abs(midpoint_jacobian(s, ur.a, ur.p, r, cfg))
        jb = abs(midpoint_jacobian(s, ur.b, qrev, r, cfg))
        report.contraction_checks = {"bound": bound, "from_a": ja, "from_b": jb,
                                     "ok": bool(ja <= bound and jb <= bound)}
        if ja > bound or jb > bound:
            raise PoorFit(f"mid point Jacobians {ja:.6e}, {jb:.6e} exceed (1+eps2/2) r^N = {bound:.6e}")

    with stage("sets"):
        conf = configuration(s, ur.a, ur.p, r, set_cfg)
    rho = float(np.linalg.norm(conf.b - conf.a)) / 10
    rng = np.random.default_rng(pcfg.seed)
    best = None
    for level in range(pcfg.rho_halvings + 1):
        entry = {"rho": rho}
        report.rho_history.append(entry)
        try:
            with stage("midset"):
                sc = screen_linearization(s, conf, rho, rng, set_cfg, pcfg.screen_resolution)
            entry["screen_ratio"] = sc.ratio
            if not sc.passed or sc.ratio > 1 + eps / 2:
                entry["passed"] = False
                entry["reason"] = "mid set far from its linearization"
                rho /= 2
                continue
            with stage("sets"):
                ball, image = build_sets(s, conf, rho, set_cfg, pcfg.quadrature, pcfg.seed)
            ratio_ab = image.volume / ball.volume
            entry["volume_ratio_AB"] = ratio_ab
            if not 1 - eps <= ratio_ab <= 1 + eps:
                entry["passed"] = False
                entry["reason"] = "vol(A)/vol(B) outside bracket"
                rho /= 2
                continue
            with stage("midset"):
                dlo, dhi = _density_bracket(s, [image.cloud, image.ball_cloud, conf.m[None]], rho)
                cap = (1 + eps) * dlo * ball.volume / (2.0 ** (N - n) * dhi)
                mid = midset_volume_upper(s, conf, rho, rng, set_cfg, pcfg.resolution, pcfg.pairs,
                                          pcfg.max_pairs, pcfg.sample_tol, stop_above=cap)
            with stage("margins"):
                summary = _summarize(s, N, eps, ball, image, mid, r, pcfg)
        except PipelineError as exc:
            if not isinstance(exc.cause, _LEVEL_ERRORS):
                raise
            entry["passed"] = False
            entry["reason"] = f"{type(exc.cause).__name__}: {exc.cause}"
            rho /= 2
            continue
        entry.update(theorem_ratio=summary["theorem_ratio"], pairs=mid.pairs,
                     converged=mid.converged, passed=summary["ratio_test_passed"])
        best = (rho, ball, image, mid, summary)
        if summary["ratio_test_passed"]:
            break
        rho /= 2

    if best is None:
        raise PipelineError("midset", SampleBudget("no rho level produced a mid set estimate"),
                            {"rho_history": report.rho_history})
    rho, ball, image, mid, summary = best
    report.rho = rho
    report.quadrature_points = image.quadrature_points
    report.pairs, report.accepted_pairs = mid.pairs, mid.accepted
    report.resolution, report.cell_side, report.cell_volume = mid.resolution, mid.cell_side, mid.cell_volume
    report.vol_A, report.vol_B = image.volume, ball.volume
    report.vol_M_upper, report.vol_M_lower = mid.volume_upper, mid.volume_lower
    report.cloud = mid.cloud
    for key, val in summary.items():
        setattr(report, key, val)
    report.invariants = {
        "volume_bracket": bool(1 - eps <= summary["volume_ratio_AB"][0] and summary["volume_ratio_AB"][1] <= 1 + eps),
        "diameter_below_R": bool(summary["diameter_upper"] < pcfg.radius),
        "ratio_at_most_half": bool(0 < r <= 0.5),
        "cover_converged": bool(mid.converged),
    }


def _density_bracket(s, clouds, pad):
    pts = np.concatenate([c for c in clouds if len(c)])
    dlo, dhi = s.density_bounds(pts.min(0) - pad, pts.max(0) + pad)
    if dlo <= 0:
        raise SmoothnessLost("density bracket is not positive on the working neighbourhood")
    return dlo, dhi


def _summarize(s, N, eps, ball, image, mid, r, pcfg):
    n = s.dim
    dlo, dhi = _density_bracket(s, [image.cloud, image.ball_cloud, mid.cloud], 1e-12)
    mu_A = [dlo * image.volume, dhi * image.volume]
    mu_B = [dlo * ball.volume, dhi * ball.volume]
    mu_M = dhi * mid.volume_upper
    ratio_AB = [mu_A[0] / mu_B[1], mu_A[1] / mu_B[0]]
    theorem = 2.0 ** (N - n) * mu_M / mu_B[0]
    theta = mid.theta_upper
    cloud = np.concatenate([image.cloud, image.ball_cloud])
    hull = cloud[ConvexHull(cloud).vertices] if n <= 6 else cloud
    diam_chart = float(distance.pdist(hull).max())
    vols = SetVolumes(a=mu_A[0], b=mu_B[0], midset=mu_M)
    margins = []
    for K in pcfg.K_grid:
        for Nb in pcfg.N_grid:
            params = BMParams(float(K), float(Nb), theta, r)
            margins.append({"K": float(K), "N": float(Nb), "margin": bm_margin(vols, params)})
    passed = bool(mid.converged and 1 - eps <= ratio_AB[0] and ratio_AB[1] <= 1 + eps and theorem <= 1 + eps)
    return {
        "density_bracket": [dlo, dhi],
        "mu_A": mu_A,
        "mu_B": mu_B,
        "mu_M_upper": mu_M,
        "volume_ratio_AB": ratio_AB,
        "theorem_ratio": theorem,
        "theta": theta,
        "diameter_chart": diam_chart,
        "diameter_upper": 2 * theta,
        "margins": margins,
        "ratio_test_passed": passed,
        "all_margins_negative": bool(all(mg["margin"] < 0 for mg in margins)),
    }

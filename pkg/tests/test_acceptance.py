"""Acceptance suite: every check runs at its stated tolerance and reports one verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they
are produced; they are also repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from oracles import fd_exp_differential, fd_jacobian, heisenberg_exp
from srbm import cli
from srbm.counterexample import contraction_fit, find_unit_ratio, tau
from srbm.errors import LeftChart
from srbm.flag import ampleness_on_grid, growth_vector, minimal_geodesic_covector
from srbm.geodesy import (
    GeodesicSegment,
    inverse_geodesic,
    inverse_geodesic_jacobian,
    midpoint,
    midpoint_jacobian,
    reverse,
    segment_costate,
    shoot,
)
from srbm.hamiltonian import exp_differential, hamiltonian_value, integrate
from srbm.structures import BUILTINS, load_structure

SEED = 20240601


@pytest.fixture(scope="module")
def heis():
    return load_structure("heisenberg")


@pytest.fixture(scope="module")
def eucl():
    return load_structure("euclidean_test")


def _ball_covectors(rng, k, n, radius):
    g = rng.standard_normal((k, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * radius * rng.random((k, 1)) ** (1 / n)


def test_exponential_map_matches_closed_form(heis, criterion):
    rng = np.random.default_rng(SEED)
    P = _ball_covectors(rng, 200, 3, 2.0)
    X = np.zeros((200, 3))
    times = np.linspace(0.1, 1.0, 10)
    start = time.perf_counter()
    end, _, _, marked = integrate(heis, X, P, 1.0, marks=times[:-1])
    elapsed = time.perf_counter() - start
    err = 0.0
    for t in times:
        got = end if t == 1.0 else marked[float(t)][0]
        ref = np.array([heisenberg_exp(x, p, t) for x, p in zip(X, P)])
        err = max(err, float(np.abs(got - ref).max()))
    ok = err < 1e-8 and elapsed < 10
    criterion(1, "exponential map vs closed form", ok, f"max error {err:.2e}, {elapsed:.2f} s")
    assert ok


def _random_case(s, rng):
    lo, hi = s.chart_bounds[:, 0], s.chart_bounds[:, 1]
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    while True:
        x = mid + 0.3 * half * rng.uniform(-1, 1, s.dim)
        p = _ball_covectors(rng, 1, s.dim, 1.5)[0]
        t = rng.uniform(0.1, 1.0)
        try:
            integrate(s, x, p, t)
        except LeftChart:
            continue
        return x, p, t


def test_sensitivity_matches_finite_differences(criterion):
    rng = np.random.default_rng(SEED + 1)
    worst_rel, worst_drift = 0.0, 0.0
    for name in BUILTINS:
        s = load_structure(name)
        for _ in range(25):
            x, p, t = _random_case(s, rng)
            A = exp_differential(s, x, p, t)
            F = fd_exp_differential(s, x, p, t)
            worst_rel = max(worst_rel, float(np.linalg.norm(A - F) / np.linalg.norm(A)))
            xt, pt, _, _ = integrate(s, x, p, t)
            drift = abs(float(hamiltonian_value(s, xt[0], pt[0]) - hamiltonian_value(s, x, p)))
            worst_drift = max(worst_drift, drift)
    ok = worst_rel < 1e-5 and worst_drift < 1e-9
    criterion(2, "exp differential vs finite differences, energy drift", ok,
              f"100 cases, rel error {worst_rel:.2e}, drift {worst_drift:.2e}")
    assert ok


def test_growth_vector_and_geodesic_dimension(criterion):
    rng = np.random.default_rng(SEED + 2)
    problems = []
    h = load_structure("heisenberg")
    for _ in range(4):
        p = rng.standard_normal(3)
        seg = GeodesicSegment(h, rng.uniform(-0.5, 0.5, 3), p / np.linalg.norm(p[:2]), 0.0, 1.0)
        for g in ampleness_on_grid(h, seg, 33):
            if g.growth_vector != (2, 3) or g.geodesic_dimension != 5:
                problems.append(("heisenberg", g.time, g.growth_vector))
    mart = load_structure("martinet")
    for x in ([0.5, 0.1, 0.0], [-0.7, 0.3, 0.2]):
        p, g = minimal_geodesic_covector(mart, x)
        if g.growth_vector != (2, 3) or g.geodesic_dimension != 5:
            problems.append(("martinet", x, g.growth_vector))
    eu = load_structure("euclidean_test")
    seg = GeodesicSegment(eu, [0, 0, 0], [0.3, -0.2, 0.9], -1.0, 1.0)
    g = growth_vector(eu, seg, 0.0)
    if g.growth_vector != (3,) or g.geodesic_dimension != 3:
        problems.append(("euclidean_test", g.growth_vector))
    lower = {}
    for name in BUILTINS:
        s = load_structure(name)
        if not s.strictly_subriemannian:
            continue
        for x in (s.chart_bounds.mean(axis=1), s.chart_bounds.mean(axis=1) + 0.3):
            _, g = minimal_geodesic_covector(s, x)
            lower[name] = min(lower.get(name, math.inf), g.geodesic_dimension)
            if g.geodesic_dimension < s.dim + 2:
                problems.append((name, "N < n + 2", g.geodesic_dimension))
    ok = not problems
    criterion(3, "growth vectors and geodesic dimension", ok,
              f"minimal N per structure {lower}" + (f", problems {problems[:3]}" if problems else ""))
    assert ok


def test_contraction_exponent(heis, eucl, criterion):
    grid = np.geomspace(1e-3, 1e-1, 9)
    fh = contraction_fit(heis, [0.1, -0.2, 0.0], [0.8, 0.4, 1.2], grid)
    fe = contraction_fit(eucl, [0.0, 0.0, 0.0], [0.3, 0.7, -0.4], grid)
    ok = (abs(fh.exponent - 5) <= 0.1 and fh.residual < 1e-2
          and abs(fe.exponent - 3) <= 1e-6 and abs(fe.C - 1) <= 1e-6)
    criterion(4, "contraction exponent", ok,
              f"heisenberg N={fh.exponent:.4f} residual {fh.residual:.1e}; "
              f"euclidean N={fe.exponent:.9f} C={fe.C:.9f}")
    assert ok


def test_unit_ratio(heis, eucl, criterion):
    ue = find_unit_ratio(eucl, [0.2, 0.0, -0.1], [0.3, -0.5, 0.2])
    a, p = np.array([0.1, 0.2, -0.1]), np.array([0.7, -0.3, 1.1])
    uh = find_unit_ratio(heis, a, p)
    m, q = segment_costate(heis, uh.a, uh.p, uh.r)
    f = uh.r / (1 - uh.r)
    A_mid = exp_differential(heis, m, q)

    def inv(y):
        xi = shoot(heis, m, y, q + np.linalg.solve(A_mid, y - uh.b), tol=1e-13)
        return integrate(heis, m, -f * xi, 1.0)[0][0]

    fd = abs(float(np.linalg.det(fd_jacobian(inv, uh.b, h=1e-5))))
    ok = (abs(ue.r - 0.5) <= 1e-9 and uh.r <= 0.5 and abs(uh.jacobian - 1) < 1e-6
          and abs(fd - 1) < 1e-4)
    criterion(5, "unit ratio search", ok,
              f"euclidean r={ue.r!r}; heisenberg r={uh.r:.12f}, |Jac I|-1={uh.jacobian - 1:.1e}, "
              f"finite differences {fd - 1:.1e}")
    assert ok


def _falsify(tmp_path, name):
    out = tmp_path / f"{name}.json"
    start = time.perf_counter()
    code = cli.main(["falsify", "--structure", name, "--epsilon", "0.1", "--out", str(out)])
    elapsed = time.perf_counter() - start
    return code, json.loads(out.read_text())["report"], elapsed


@pytest.mark.slow
def test_theorem_reproduction(tmp_path, criterion):
    code, rep, elapsed = _falsify(tmp_path, "heisenberg")
    grid = {(mg["K"], mg["N"]) for mg in rep["margins"]}
    want = {(K, N) for K in (0.0, -1.0, -10.0) for N in (1.5, 2.0, 3.0, 5.0, 10.0)}
    vol_ab = rep["vol_A"] / rep["vol_B"]
    heis_ok = (
        rep["status"] == "ok"
        and elapsed < 300
        and 0.9 <= rep["volume_ratio_AB"][0] and rep["volume_ratio_AB"][1] <= 1.1
        and rep["geodesic_dimension"] - rep["dim"] == 2
        and rep["theorem_ratio"] <= 1.1
        and grid == want
        and all(mg["margin"] < 0 for mg in rep["margins"])
        and code == 0
    )
    ecode, erep, _ = _falsify(tmp_path, "euclidean_test")
    mid_ratio = erep["vol_M_upper"] / erep["vol_B"]
    eu_ok = (
        erep["status"] == "ok"
        and all(mg["margin"] >= 0 for mg in erep["margins"])
        and abs(mid_ratio - 1) <= 0.05
        and ecode == 1
    )
    worst = max(mg["margin"] for mg in rep["margins"])
    ok = heis_ok and eu_ok
    criterion(6, "counterexample reproduction", ok,
              f"heisenberg {elapsed:.0f} s, vol(A)/vol(B)={vol_ab:.4f}, ratio {rep['theorem_ratio']:.4f}, "
              f"largest margin {worst:.2e}, exit {code}; euclidean mid-set ratio {mid_ratio:.4f}, exit {ecode}")
    assert ok


def test_distortion_coefficients(criterion):
    Ks = [0.0, -0.1, -0.5, -1.0, -5.0, -10.0, -50.0]
    Ns = [1.5, 2.0, 3.0, 5.0, 10.0]
    ts = np.linspace(0, 1, 11)
    thetas = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 30.0]
    limit = max(abs(tau(K, N, t, 1e-4) - t) for K in (-1.0, -10.0) for N in Ns for t in ts)
    at_one = all(tau(K, N, 1.0, th) == 1.0 for K in Ks for N in Ns for th in thetas)
    mono = all(
        tau(K, N, t, th) <= tau(K2, N, t, th)
        for N in Ns for t in ts for th in thetas
        for i, K in enumerate(Ks) for K2 in Ks[: i + 1]
    )
    ok = limit < 1e-6 and at_one and mono
    criterion(7, "distortion coefficients", ok,
              f"small-theta deviation {limit:.1e}, tau_1 == 1: {at_one}, monotone in K: {mono}")
    assert ok


def _heisenberg_battery(rng, groups, size):
    """Random (x, p) batches, one random ratio t per batch."""
    for _ in range(groups):
        x = rng.uniform(-0.5, 0.5, (size, 3))
        p = rng.standard_normal((size, 3))
        p *= (rng.uniform(0.3, 1.5, size) / np.linalg.norm(p, axis=1))[:, None]
        yield x, p, float(rng.uniform(0.05, 0.95))


def test_structural_identities(heis, criterion):
    rng = np.random.default_rng(SEED + 8)
    sym = chain = define = 0.0
    cases = 0
    for x, p, t in _heisenberg_battery(rng, 10, 10):
        cases += len(x)
        y, q0 = reverse(heis, x, p)
        q = shoot(heis, y, x, q0 + 1e-3 * rng.standard_normal(q0.shape), tol=1e-13)
        sym = max(sym, float(np.abs(midpoint(heis, y, q, t) - midpoint(heis, x, p, 1 - t)).max()))

        m, qm = segment_costate(heis, x, p, t)
        lhs = np.abs(midpoint_jacobian(heis, y, q, 1 - t)) * np.abs(inverse_geodesic_jacobian(heis, m, qm, t))
        rhs = np.abs(midpoint_jacobian(heis, x, p, t))
        chain = max(chain, float(np.abs(lhs / rhs - 1).max()))

        a2 = inverse_geodesic(heis, m, qm, t)
        P = integrate(heis, m, -(t / (1 - t)) * qm, 1.0)[1]
        kappa = shoot(heis, a2, y, -P / t + 1e-3 * rng.standard_normal(P.shape), tol=1e-13)
        define = max(define, float(np.abs(midpoint(heis, a2, kappa, t) - m).max()))
    ok = cases == 100 and sym < 1e-8 and chain < 1e-6 and define < 1e-8
    criterion(8, "structural identities", ok,
              f"{cases} cases, symmetry {sym:.1e}, chain rule {chain:.1e}, defining identity {define:.1e}")
    assert ok

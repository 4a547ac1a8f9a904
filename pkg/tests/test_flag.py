import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from srbm.errors import NoAmpleFound, StencilOutOfRange
from srbm.flag import (
    FlagConfig,
    _rank,
    ampleness_on_grid,
    fd_weights,
    flag_basis,
    geodesic_dimension_at,
    geodesic_dimension_formula,
    growth_vector,
    minimal_geodesic_covector,
    sphere_covectors,
)
from srbm.geodesy import GeodesicSegment
from srbm.structures import load_structure

H = load_structure("heisenberg")
M = load_structure("martinet")
E = load_structure("euclidean_test")
C = load_structure("corank1_carnot")


def test_fd_weights_exact_on_polynomials():
    nodes = np.linspace(-0.2, 0.25, 7)
    for order in range(5):
        w = fd_weights(nodes, order)
        for deg in range(7):
            exact = math.factorial(deg) if deg == order else 0.0
            assert np.dot(w, nodes**deg) == pytest.approx(exact, abs=1e-7 * max(1, math.factorial(deg)))


def test_formula_recomputed_from_raw_dims():
    assert geodesic_dimension_formula((2, 3)) == 1 * 2 + 3 * 1
    assert geodesic_dimension_formula((2, 2, 3)) == 2 + 0 + 5
    assert geodesic_dimension_formula((3,)) == 3
    assert geodesic_dimension_formula((4, 5)) == 4 + 3


@pytest.mark.parametrize(
    "s, x, p, expected",
    [
        (H, [0, 0, 0], [1.0, 0.5, 0.3], (2, 3)),
        (M, [0.5, 0.1, 0.0], [0.6, 0.8, 0.2], (2, 3)),
        (M, [0.0, 0.0, 0.0], [1.0, 0.5, 0.0], (2, 2, 3)),
        (E, [0.1, 0.2, 0.3], [0.3, -0.2, 0.9], (3,)),
        (C, [0, 0, 0, 0, 0], [0.5, 0.1, -0.3, 0.7, 0.4], (4, 5)),
    ],
)
def test_growth_vectors(s, x, p, expected):
    seg = GeodesicSegment(s, x, p, -1.0, 1.0)
    g = growth_vector(s, seg, 0.0)
    assert g.growth_vector == expected
    assert g.ample and g.step == len(expected)
    assert g.geodesic_dimension == geodesic_dimension_formula(expected)


def test_flag_is_nested_and_starts_at_rank():
    seg = GeodesicSegment(M, [0.3, 0.0, 0.1], [0.2, 1.0, 0.5], -1.0, 1.0)
    fb = flag_basis(M, seg, 0.0)
    scale = np.linalg.svd(fb.by_order[0], compute_uv=False)[0]
    ranks = [_rank(fb.collection(i), 1e-6, scale) for i in range(1, 5)]
    assert ranks[0] == M.rank
    assert ranks == sorted(ranks)


def test_stencil_shifts_at_segment_ends():
    seg = GeodesicSegment(H, [0, 0, 0], [1.0, 0.0, 0.5], 0.0, 1.0)
    start, end = growth_vector(H, seg, 0.0), growth_vector(H, seg, 1.0)
    assert start.growth_vector == end.growth_vector == (2, 3)
    short = GeodesicSegment(H, [0, 0, 0], [1.0, 0.0, 0.5], 0.0, 0.01)
    with pytest.raises(StencilOutOfRange):
        growth_vector(H, short, 0.0)
    with pytest.raises(StencilOutOfRange):
        flag_basis(H, seg, 2.0)


def test_ampleness_on_grid_heisenberg():
    seg = GeodesicSegment(H, [0.2, 0, 0], [0.8, 0.6, 1.5], 0.0, 1.0)
    data = ampleness_on_grid(H, seg, 9)
    assert [g.time for g in data] == pytest.approx(np.linspace(0, 1, 9))
    assert all(g.growth_vector == (2, 3) and g.geodesic_dimension == 5 for g in data)
    assert data[0].as_dict()["geodesic_dimension"] == 5


def test_sphere_covectors_deterministic_units():
    a, b = sphere_covectors(3, 16, seed=4), sphere_covectors(3, 16, seed=4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0)


def test_minimal_covector_martinet_surface():
    assert geodesic_dimension_at(M, [0.5, 0.1, 0.0]) == 5
    p, g = minimal_geodesic_covector(M, [0.0, 0.0, 0.0])
    # on x = 0 the third direction needs brackets of length 3 whichever way we leave
    assert g.geodesic_dimension >= 5


def test_no_ample_covector():
    with pytest.raises(NoAmpleFound):
        minimal_geodesic_covector(H, [0, 0, 0], covectors=np.array([[0.0, 0.0, 1.0]]))


def test_config_validation():
    with pytest.raises(ValueError):
        FlagConfig(imax=7)
    with pytest.raises(ValueError):
        FlagConfig(points=3, imax=6)


@pytest.mark.parametrize("s", [H, M, C])
def test_lower_bound_for_strict_structures(s):
    x = s.chart_bounds.mean(axis=1) + 0.2
    _, g = minimal_geodesic_covector(s, x, count=16)
    k1 = g.growth_vector[0]
    assert g.geodesic_dimension >= s.dim + 2
    assert g.geodesic_dimension >= k1 + 3 * (s.dim - k1)


@settings(max_examples=12, deadline=None)
@given(p=st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3), x0=st.floats(-0.8, 0.8))
def test_time_reversal_invariance(p, x0):
    """Reversing a geodesic leaves its flag at a point unchanged."""
    x = np.array([x0, 0.1, 0.0])
    p = np.array(p)
    speed = np.linalg.norm(M.frame(x) @ p)
    assume(speed > 0.1)
    p = p / speed
    fwd = growth_vector(M, GeodesicSegment(M, x, p, -0.5, 0.5), 0.0)
    bwd = growth_vector(M, GeodesicSegment(M, x, -p, -0.5, 0.5), 0.0)
    assert fwd.growth_vector == bwd.growth_vector
    assert fwd.ample == bwd.ample

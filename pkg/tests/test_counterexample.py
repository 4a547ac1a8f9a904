import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srbm.counterexample import (
    BMParams,
    PipelineConfig,
    SetVolumes,
    ball_volume,
    bm_margin,
    build_sets,
    configuration,
    contraction_fit,
    find_unit_ratio,
    inverse_jacobian_at_ratio,
    midset_volume_upper,
    run_pipeline,
    sphere_area,
    split_epsilon,
    tau,
)
from srbm.errors import (
    ChartOverflow,
    DegenerateDimension,
    NoBracket,
    PoorFit,
    SingularJacobian,
    UnsupportedCurvature,
)
from srbm.structures import load_structure

H = load_structure("heisenberg")
E = load_structure("euclidean_test")


def test_split_epsilon_meets_constraint():
    for eps in (1e-3, 0.1, 0.5, 1.0):
        e1, e2 = split_epsilon(eps)
        assert (1 + e1) * (1 + e2) <= 1 + eps / 2 + 1e-15
        assert e1 > 0 and e2 > 0


def test_ball_and_sphere():
    assert ball_volume(3, 2.0) == pytest.approx(4 / 3 * math.pi * 8)
    assert sphere_area(3) == pytest.approx(4 * math.pi)


def test_contraction_fit_euclidean_exact():
    fit = contraction_fit(E, [0, 0, 0], [1.0, 0.5, -0.2])
    assert fit.exponent == pytest.approx(3, abs=1e-10)
    assert fit.C == pytest.approx(1, abs=1e-10)
    assert fit.alpha == fit.times[-1]


def test_contraction_fit_heisenberg():
    fit = contraction_fit(H, [0, 0, 0], [0.6, 0.2, 1.0])
    assert fit.exponent == pytest.approx(5, abs=0.1)
    assert fit.residual < 1e-2


def test_contraction_fit_rejects_bad_windows():
    with pytest.raises(ValueError):
        contraction_fit(E, [0, 0, 0], [1, 0, 0], [0.1, 0.2])
    with pytest.raises(ValueError):
        contraction_fit(E, [0, 0, 0], [1, 0, 0], np.linspace(0.1, 0.9, 9))
    with pytest.raises(ValueError):
        contraction_fit(E, [0, 0, 0], [1, 0, 0], np.geomspace(0.1, 1.5, 9))
    with pytest.raises(SingularJacobian):
        contraction_fit(H, [0, 0, 0], [1.0, 0, 2 * math.pi])
    with pytest.raises(PoorFit):
        # over the whole of (0, 1) the Heisenberg law bends away from a power
        contraction_fit(H, [0, 0, 0], [0.3, 0.1, 5.0], np.geomspace(1e-3, 0.95, 9), max_residual=1e-6)


def test_unit_ratio_euclidean_and_heisenberg():
    assert find_unit_ratio(E, [0, 0, 0], [0.3, 0.1, 0.0]).r == pytest.approx(0.5, abs=1e-9)
    u = find_unit_ratio(H, [0, 0, 0], [0.8, 0.1, 1.3])
    assert u.r <= 0.5
    assert abs(u.jacobian - 1) < 1e-6
    assert inverse_jacobian_at_ratio(H, u.a, u.p, u.r) == pytest.approx(1, abs=1e-6)


def test_unit_ratio_needs_bracket():
    with pytest.raises(NoBracket):
        find_unit_ratio(E, [0, 0, 0], [0.3, 0.1, 0.0], delta=0.6)


def test_tau_values():
    assert tau(0.0, 3.0, 0.3, 5.0) == 0.3
    want = 0.5**0.5 * (math.sinh(0.5) / math.sinh(1.0)) ** 0.5
    assert tau(-1.0, 2.0, 0.5, 1.0) == pytest.approx(want, rel=1e-14)
    assert tau(-1.0, 2.0, 1.0, 3.0) == 1.0
    assert tau(-1.0, 2.0, 0.0, 3.0) == 0.0
    # sinh(800) overflows a double; the logarithmic form does not
    want = math.sqrt(0.99) * math.exp(-0.5 * 0.01 * 800)
    assert tau(-1.0, 2.0, 0.99, 800.0) == pytest.approx(want, rel=1e-12)
    assert tau(-7.0, 1.01, 1e-38, 27.0) >= 0
    with pytest.raises(UnsupportedCurvature):
        tau(1.0, 2.0, 0.5, 1.0)
    with pytest.raises(DegenerateDimension):
        tau(-1.0, 1.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        tau(-1.0, 2.0, 1.5, 1.0)


@settings(max_examples=200, deadline=None)
@given(
    K1=st.floats(-50, 0), K2=st.floats(-50, 0), N=st.floats(1.01, 20),
    t=st.floats(0, 1), theta=st.floats(0, 50),
)
def test_tau_monotone_in_curvature(K1, K2, N, t, theta):
    lo, hi = min(K1, K2), max(K1, K2)
    assert tau(lo, N, t, theta) <= tau(hi, N, t, theta) * (1 + 1e-12)
    assert tau(lo, N, t, theta) <= t + 1e-15


def test_bm_margin_euclidean_equality():
    # three equal balls: BM(0, N) holds with equality at t = 1/2
    v = SetVolumes(a=1.0, b=1.0, midset=1.0)
    assert bm_margin(v, BMParams(0.0, 3.0, 1.0, 0.5)) == pytest.approx(0.0, abs=1e-15)
    assert bm_margin(SetVolumes(1.0, 1.0, 0.5), BMParams(0.0, 3.0, 1.0, 0.5)) < 0
    with pytest.raises(UnsupportedCurvature):
        BMParams(1.0, 2.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        BMParams(0.0, 0.5, 1.0, 0.5)


def test_euclidean_sets_and_midset():
    conf = configuration(E, [0, 0, 0], [0.4, 0.0, 0.0], 0.5)
    ball, image = build_sets(E, conf, 0.05, quadrature=512)
    assert image.volume == pytest.approx(ball.volume, rel=1e-10)
    # A is the point reflection of B through m
    np.testing.assert_allclose(image.cloud + image.ball_cloud - 2 * conf.m, 0, atol=1e-12)
    mid = midset_volume_upper(E, conf, 0.05, np.random.default_rng(0), resolution=24, pairs=20000)
    assert mid.converged
    assert mid.volume_lower <= ball.volume <= mid.volume_upper
    assert mid.volume_upper / ball.volume == pytest.approx(1, abs=0.3)


def test_euclidean_midset_general_ratio():
    conf = configuration(E, [0, 0, 0], [0.4, 0.0, 0.0], 0.3)
    mid = midset_volume_upper(E, conf, 0.05, np.random.default_rng(1), resolution=24, pairs=20000)
    ball = ball_volume(3, 0.05)
    # mid set is m + r (q' - q): a ball of radius 2 r rho
    assert mid.volume_upper >= (0.6**3) * ball * 0.98
    assert mid.volume_upper <= (0.6**3) * ball * 1.35


def test_chart_overflow():
    conf = configuration(E, [4.5, 0, 0], [0.3, 0.0, 0.0], 0.5)
    with pytest.raises(ChartOverflow):
        build_sets(E, conf, 0.5)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        PipelineConfig(segment_fraction=0.7)


def test_pipeline_reports_failed_stage():
    rep = run_pipeline(H, [9.0, 0, 0])
    assert rep.status == "failed"
    assert rep.failed_stage == "flag"
    assert rep.diagnostics["error"] == "OutOfChart"
    assert "message" in rep.diagnostics

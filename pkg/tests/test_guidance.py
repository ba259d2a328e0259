import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxsafe import guidance as gd, shapes
from proxsafe.neural_sdf import ErrorBounds

vec3 = st.lists(st.floats(-20, 20), min_size=3, max_size=3).map(np.array)
unit3 = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1).map(
    lambda v: np.array(v) / np.linalg.norm(v))


def test_nominal_velocity_saturates_and_points_home():
    v = gd.nominal_velocity(np.array([100.0, 0.0, -100.0]), np.zeros(3), 0.1, 5.0)
    np.testing.assert_allclose(v, [-0.1, 0.0, 0.1], atol=1e-12)


def test_nominal_jacobian_matches_differences():
    r, r_d = np.array([1.0, -2.0, 3.0]), np.array([0.5, 0.0, -1.0])
    J = gd.nominal_jacobian(r, r_d, 0.1, 5.0)
    h = 1e-6
    fd = np.column_stack([(gd.nominal_velocity(r + h * e, r_d, 0.1, 5.0)
                           - gd.nominal_velocity(r - h * e, r_d, 0.1, 5.0)) / (2 * h) for e in np.eye(3)])
    np.testing.assert_allclose(J, fd, atol=1e-9)


def test_tangent_direction_from_default_circulation_matrix():
    a, _ = gd.circulation_row(np.array([1.0, 0.0, 0.0]), 1.0, np.array(gd.DEFAULT_OMEGA), (0.1, 1.0), 0.0)
    # T = Omega n = (n_z, -n_x, 0)
    np.testing.assert_allclose(-a[:3], [0.0, -1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, unit3, st.floats(0.0, 3.0), st.floats(0.0, 0.1), st.floats(0.0, 0.3), st.booleans())
def test_solution_is_feasible(r, r_d, grad, margin, e_h, e_g, with_ci):
    cfg = gd.GuidanceConfig(bounds=ErrorBounds(e_h, e_g))
    value = e_h + margin
    res = gd.solve_at(r, r_d, value, grad, cfg, with_ci)
    assert not res.fallback_used
    v = res.v_s
    assert np.all(np.abs(v) <= cfg.v_max + 1e-12)
    assert grad @ v + cfg.alpha0(value - e_h) - e_g * np.linalg.norm(v) >= -1e-7
    if with_ci:
        T = cfg.Omega @ grad
        assert T @ v - res.sigma >= cfg.upsilon_at(value - e_h) - 1e-7


@settings(max_examples=60, deadline=None)
@given(vec3, vec3, unit3, st.floats(0.0, 3.0), st.booleans())
def test_nominal_shortcut_agrees_with_full_solve(r, r_d, grad, margin, with_ci):
    cfg = gd.GuidanceConfig(bounds=ErrorBounds(0.02, 0.05))
    value = 0.02 + margin
    fast = gd.solve_at(r, r_d, value, grad, cfg, with_ci)
    prog, _ = gd.build_program(r, r_d, value, grad, cfg, with_ci)
    from proxsafe import socp

    full = socp.solve(prog)
    assert full.optimal
    np.testing.assert_allclose(fast.v_s, np.clip(full.x[:3], -cfg.v_max, cfg.v_max), atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(unit3, st.floats(0.0, 0.1), st.floats(0.0, 0.5), st.floats(0.0, 10.0))
def test_zero_velocity_with_least_slack_is_feasible(grad, e_h, e_g, margin):
    cfg = gd.GuidanceConfig(bounds=ErrorBounds(e_h, e_g))
    value = e_h + margin
    prog, _ = gd.build_program(np.zeros(3), np.ones(3), value, grad, cfg, with_ci=True)
    x = np.array([0.0, 0.0, 0.0, gd.fallback_sigma(value, cfg)])
    assert np.all(prog.G @ x <= prog.h + 1e-12)
    assert all(c.slack(x) >= -1e-12 for c in prog.soc_constraints)


def test_fallback_sigma_is_least_norm():
    cfg = gd.GuidanceConfig()
    # far away the margin function is negative and no slack is needed
    assert gd.fallback_sigma(5.0, cfg) == 0.0
    assert gd.fallback_sigma(0.0, cfg) == pytest.approx(-0.1)


def test_jacobian_smooth_region_matches_nominal_far_from_body():
    cfg = gd.GuidanceConfig(k_p=15.0)
    target = shapes.sphere_with_panels()
    r, r_d = np.array([0.0, 15.0, 8.0]), np.array([0.0, -10.0, -4.0])
    jr = gd.jacobian_vs(r, r_d, target, cfg)
    np.testing.assert_allclose(jr.jacobian, gd.nominal_jacobian(r, r_d, cfg.v_max, cfg.k_p), atol=1e-8)

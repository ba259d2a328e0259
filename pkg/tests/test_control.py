import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from proxsafe import control as ctl, dynamics as dm
from proxsafe.neural_sdf import ErrorBounds


def _observer_run(d_const, T=2.0, dt=0.01):
    m = 20.0
    orbit = dm.OrbitState()
    state = dm.RelState(np.array([5.0, 0.0, 3.0]), np.zeros(3))
    obs = ctl.observer_init(np.zeros((3, 3)), np.eye(3), 50.0 * np.eye(3), state, m)
    cfg = dm.DynamicsConfig()
    t, errs = [0.0], [np.linalg.norm(d_const - obs.d_hat)]
    F = np.array([0.01, -0.02, 0.0])
    for k in range(int(round(T / dt))):
        C1, C2, _ = dm.frame_matrices(orbit)
        terms = ctl.ModelTerms(C1, C2, dm.differential_gravity(orbit, state.r))
        new_state, new_orbit = dm.step(state, orbit, F, lambda _t: d_const, dt, config=cfg)
        C1e, C2e, _ = dm.frame_matrices(new_orbit)
        terms_end = ctl.ModelTerms(C1e, C2e, dm.differential_gravity(new_orbit, new_state.r))
        obs = ctl.observer_step(obs, state, terms, F, dt, new_state, terms_end)
        state, orbit = new_state, new_orbit
        t.append((k + 1) * dt)
        errs.append(np.linalg.norm(d_const - obs.d_hat))
    return np.array(t), np.array(errs)


def test_observer_error_decays_at_l_over_m():
    t, e = _observer_run(np.array([0.01, -0.005, 0.003]))
    ratio = e / e[0]
    expected = oracles.observer_error_decay(50.0, 20.0, t)
    assert np.max(np.abs(ratio / expected - 1.0)) < 1e-3


def test_observer_rejects_unstable_gains():
    state = dm.RelState(np.zeros(3), np.zeros(3))
    with pytest.raises(ctl.ObserverConfigError):
        ctl.observer_init(np.eye(3), np.eye(3), 10.0 * np.eye(3), state, 20.0)  # 1 - 0.5 > 0
    with pytest.raises(ctl.ObserverConfigError):
        ctl.observer_init(np.zeros((2, 2)), np.eye(3), np.eye(3), state, 20.0)


def test_decay_rate_of_reference_gains():
    obs = ctl.observer_init(np.zeros((3, 3)), np.eye(3), 50.0 * np.eye(3), dm.RelState(np.zeros(3), np.zeros(3)), 20.0)
    assert ctl.observer_decay_rate(obs) == pytest.approx(2.5)


def test_lambda_filter_zero_gradient_and_closed_form():
    assert ctl.lambda_filter(-3.0, 0.0, 1.0) == 0.0
    assert ctl.lambda_filter(0.0, 2.0, 4.0) == pytest.approx(math.log(2.0) / 4.0)


@settings(max_examples=500, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-6, 1e6), st.floats(1e-6, 1e6))
def test_lambda_filter_enforces_condition(a, b, eps):
    lam = ctl.lambda_filter(a, b, eps)
    assert lam >= 0.0
    assert a + lam * b >= 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 100.0), st.floats(1e-3, 1.0), st.floats(0.1, 10.0))
def test_lambda_filter_is_small_when_condition_already_holds(a, b, eps):
    # far inside the safe side the correction is exponentially small
    lam = ctl.lambda_filter(a, b, eps)
    assert lam <= math.exp(-eps * a / b) / eps + 1e-300


def test_reference_control_without_model_terms():
    cfg = ctl.ControlConfig()
    state = dm.RelState(np.array([1.0, 2.0, 3.0]), np.array([0.01, 0.0, -0.02]))
    v_s = np.array([0.05, 0.0, 0.0])
    F = ctl.reference_control(state, np.zeros(3), v_s, np.zeros((3, 3)), ctl.ModelTerms.zero(), cfg, 20.0)
    expected = 20.0 * (-cfg.mu_v * state.r - 0.5 * cfg.lam * (state.v - v_s))
    np.testing.assert_allclose(F, expected)


def test_safe_control_clamps_and_flags():
    cfg = ctl.ControlConfig(F_max=0.1)
    state = dm.RelState(np.array([10.0, 0.0, 0.0]), np.array([0.1, 0.0, 0.0]))
    obs = ctl.observer_init(np.zeros((3, 3)), np.eye(3), 50.0 * np.eye(3), state, 20.0)
    F, tel = ctl.safe_control(state, np.zeros(3), np.zeros(3), np.zeros((3, 3)), obs, 5.0,
                              np.array([1.0, 0.0, 0.0]), ErrorBounds(0.0, 0.0), ctl.ModelTerms.zero(), cfg, 20.0)
    assert tel.saturated
    assert np.all(np.abs(F) <= 0.1)
    np.testing.assert_allclose(F, np.clip(tel.F_unclamped, -0.1, 0.1))


def test_filter_gain_condition_enforced():
    with pytest.raises(ValueError):
        ctl.ControlConfig(beta_e=0.4, beta_c=1.0)
    assert ctl.ControlConfig(beta_e=0.4, beta_c=1.0, allow_invalid_filter=True).filter_denominator > 0


def test_barrier_h1_components():
    cfg = ctl.ControlConfig(mu_h=2.0, beta=1.0)
    state = dm.RelState(np.zeros(3), np.array([0.2, 0.0, 0.0]))
    h1 = ctl.barrier_h1(state, np.zeros(3), np.array([0.0, 0.1, 0.0]), 1.0, cfg)
    assert h1 == pytest.approx(1.0 - 0.04 / 4.0 - 0.005)

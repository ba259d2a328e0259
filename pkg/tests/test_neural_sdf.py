import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxsafe import geometry, neural_sdf as ns, shapes


def _fd_input_grad(params, pts, h=1e-6):
    g = np.zeros_like(pts)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (ns.forward(params, pts + e) - ns.forward(params, pts - e)) / (2 * h)
    return g


def test_input_gradient_matches_central_differences():
    params = ns.init_mlp([3, 16, 16, 1], seed=3)
    pts = np.random.default_rng(0).normal(size=(50, 3))
    np.testing.assert_allclose(ns.input_gradient(params, pts), _fd_input_grad(params, pts), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("loss_kind", ["asymmetric", "paper-literal"])
def test_parameter_gradients_match_central_differences(loss_kind):
    params = ns.init_mlp([3, 6, 6, 1], seed=1)
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(20, 3))
    targets = rng.normal(size=20) * 0.5
    loss, gw, gb = ns.parameter_gradients(params, pts, targets, 2.0, 0.1, loss_kind)
    analytic = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(gw, gb)])
    flat = params.flat()
    # flat() and the (weights, biases) layer order must agree for this comparison
    assert analytic.shape == flat.shape
    idx = rng.choice(len(flat), size=40, replace=False)
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = 1e-6
        lp = ns.parameter_gradients(params.with_flat(flat + e), pts, targets, 2.0, 0.1, loss_kind)[0]
        lm = ns.parameter_gradients(params.with_flat(flat - e), pts, targets, 2.0, 0.1, loss_kind)[0]
        fd = (lp - lm) / 2e-6
        assert abs(fd - analytic[i]) <= 1e-5 * max(1.0, abs(fd))


def test_forward_and_gradient_agree_with_separate_calls():
    params = ns.init_mlp([3, 8, 8, 1], seed=0)
    pts = np.random.default_rng(5).normal(size=(7, 3))
    f, g = ns.forward_and_gradient(params, pts)
    np.testing.assert_allclose(f, ns.forward(params, pts))
    np.testing.assert_allclose(g, ns.input_gradient(params, pts))


def test_model_round_trip(tmp_path):
    params = ns.init_mlp([3, 8, 1], seed=4)
    path = tmp_path / "m.nsdf"
    ns.save_model(path, params, {"bounds": {"e_h": 0.1, "e_grad_h": 0.2}})
    back, meta = ns.load_model(path)
    assert back.to_bytes() == params.to_bytes()
    assert meta["bounds"]["e_h"] == 0.1
    assert json.loads(ns.sidecar_path(path).read_text())["dims"] == [3, 8, 1]


def test_training_is_deterministic_and_reduces_loss():
    target = shapes.Sphere((0.0, 0.0, 0.0), 1.0)
    ds = geometry.sample_dataset(target, 1000, seed=0)
    cfg = ns.TrainConfig(iterations=200, batch_size=128, seed=0, decay_interval=100)
    h1, h2 = [], []
    p1 = ns.train(ds, [3, 16, 16, 1], cfg, history=h1)
    p2 = ns.train(ds, [3, 16, 16, 1], cfg, history=h2)
    assert p1.to_bytes() == p2.to_bytes()
    assert np.mean(h1[-20:]) < np.mean(h1[:20])


def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ns.TrainConfig(kappa=1.0)
    with pytest.raises(ValueError):
        ns.TrainConfig(loss="l2")


def test_error_bounds_certify_over_estimate():
    target = shapes.Sphere((0.0, 0.0, 0.0), 1.0)
    params = ns.init_mlp([3, 8, 1], seed=0)
    pts = geometry.evaluation_points(target, 2000, seed=1).points
    b = ns.estimate_error_bounds(params, target, pts)
    assert np.all(np.asarray(ns.forward(params, pts)) - b.e_h <= target.signed_distance(pts) + 1e-12)


def test_eval_metrics_on_exact_surface_values():
    params = ns.init_mlp([3, 4, 1], seed=0)
    pts = np.random.default_rng(0).normal(size=(30, 3))
    m = ns.eval_metrics(params, pts)
    f = np.asarray(ns.forward(params, pts))
    assert m.epsilon == pytest.approx(np.mean(np.abs(f)))
    assert m.n_positive == int(np.sum(f > 0))


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_forward_is_finite_and_smooth_everywhere(x, y, z):
    params = ns.init_mlp([3, 8, 8, 1], seed=7)
    p = np.array([[x, y, z]])
    f, g = ns.forward_and_gradient(params, p)
    assert np.all(np.isfinite(f)) and np.all(np.isfinite(g))

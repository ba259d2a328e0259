import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxsafe import geometry, shapes


def _box_sdf(p, half):
    # closed-form box distance, written independently of the package
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


@pytest.fixture(scope="module")
def box_oracle():
    return geometry.SdfOracle(geometry.box_mesh((0, 0, 0), (1.0, 0.5, 0.25)))


def test_box_mesh_is_watertight(box_oracle):
    assert box_oracle.watertight
    assert box_oracle.sign_method == "winding"


def test_mesh_oracle_matches_closed_form_box(box_oracle):
    pts = np.random.default_rng(0).uniform(-2, 2, size=(2000, 3))
    np.testing.assert_allclose(box_oracle.signed_distance(pts), _box_sdf(pts, np.array([1.0, 0.5, 0.25])),
                               atol=1e-12)


def test_bvh_matches_brute_force():
    mesh = geometry.icosphere(3, radius=1.3)
    oracle = geometry.SdfOracle(mesh)
    pts = np.random.default_rng(1).normal(size=(500, 3)) * 2
    d_bvh, _, _ = oracle.unsigned_distance(pts)
    d_ref, _ = oracle.brute_force_distance(pts)
    np.testing.assert_allclose(d_bvh, d_ref, atol=1e-14)


def test_parity_and_winding_agree(box_oracle):
    parity = geometry.SdfOracle(box_oracle.mesh, sign_method="parity")
    pts = np.random.default_rng(2).uniform(-1.5, 1.5, size=(500, 3))
    np.testing.assert_array_equal(np.sign(parity.signed_distance(pts)), np.sign(box_oracle.signed_distance(pts)))


def test_gradient_is_unit_and_flags_medial_points(box_oracle):
    pts = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.5, 1.0, 0.0]])
    g, valid = box_oracle.gradient(pts)
    np.testing.assert_allclose(g[0], [1, 0, 0], atol=1e-12)
    assert valid[0] and valid[2]
    assert not valid[1]  # box centre: equidistant from two faces in z
    np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-12)


def test_obj_round_trip(tmp_path):
    mesh = geometry.icosphere(1)
    path = tmp_path / "s.obj"
    geometry.save_obj(mesh, path)
    back = geometry.load_mesh(path)
    np.testing.assert_allclose(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


@pytest.mark.parametrize("text", ["v 0 0\n", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", "", "v a b c\n"])
def test_malformed_obj_is_rejected(tmp_path, text):
    path = tmp_path / "bad.obj"
    path.write_text(text)
    with pytest.raises(geometry.MeshFormatError):
        geometry.load_mesh(path)


def test_marching_cubes_recovers_sphere():
    sphere = shapes.Sphere((0, 0, 0), 1.0)
    mesh = geometry.marching_cubes(sphere.signed_distance, ((-1.5,) * 3, (1.5,) * 3), 48)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 1.0)) < 0.01
    assert geometry.is_watertight(mesh)


def test_marching_cubes_without_crossing_is_empty():
    mesh = geometry.marching_cubes(lambda p: np.ones(len(p)), ((0, 0, 0), (1, 1, 1)), 8)
    assert mesh.n_triangles == 0


def test_dataset_is_deterministic_and_round_trips(tmp_path):
    target = shapes.sphere_with_panels()
    a = geometry.sample_dataset(target, 500, seed=3)
    b = geometry.sample_dataset(target, 500, seed=3)
    assert a.to_bytes() == b.to_bytes()
    path = tmp_path / "d.bin"
    a.save(path)
    assert geometry.SdfDataset.load(path).to_bytes() == a.to_bytes()
    assert np.all(a.distances[: a.meta["n_surface"]] == 0.0)


def test_evaluation_points_shell_width():
    target = shapes.sphere_with_panels()
    ev = geometry.evaluation_points(target, 1000, seed=0)
    n = ev.meta["n_shell"]
    assert n == 700
    assert np.all(np.abs(ev.distances[:n]) <= ev.meta["shell_width"])
    np.testing.assert_allclose(ev.distances, target.signed_distance(ev.points))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3))
def test_union_is_minimum_of_parts(p):
    target = shapes.sphere_with_panels()
    p = np.array([p])
    parts = [shapes.Sphere((0, 0, 0), 2.0),
             shapes.Box((0, 4.9, 0), (1.0, 3.0, 0.05)), shapes.Box((0, -4.9, 0), (1.0, 3.0, 0.05))]
    expected = min(float(s.signed_distance(p)[0]) for s in parts)
    assert target.signed_distance(p)[0] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_analytic_field_is_one_lipschitz(p, q):
    target = shapes.sphere_with_panels()
    p, q = np.array([p]), np.array([q])
    diff = abs(target.signed_distance(p)[0] - target.signed_distance(q)[0])
    assert diff <= np.linalg.norm(p - q) + 1e-12

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointfuse.errors import NonPositiveDepth, GeometryError
from pointfuse.geometry import (
    CameraIntrinsics, ConfidenceMap, Frame, Pointmap, RigidTransform, SimilarityTransform,
    compose, invert, is_rotation, pixel_grid, project, random_rotation, rot_x, rot_z,
    rotation_angle_deg, so3_exp, transform_pointmap, translation_angle_deg, unproject,
)


def close(a, b, tol=1e-12):
    return np.allclose(a.rotation, b.rotation, atol=tol, rtol=0) and np.allclose(a.translation, b.translation, atol=tol, rtol=0)


def random_rigid(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


def test_compose_identity_and_inverse(rng):
    t = random_rigid(rng)
    assert close(compose(RigidTransform.identity(), t), t)
    assert close(compose(t, invert(t)), RigidTransform.identity())


def test_compose_rotation_closure():
    a = RigidTransform(rot_z(30), np.zeros(3))
    b = RigidTransform(rot_z(60), np.zeros(3))
    assert np.allclose(compose(a, b).rotation, rot_z(90), atol=1e-12)


def test_invert_examples(rng):
    assert close(invert(RigidTransform.identity()), RigidTransform.identity())
    t = invert(RigidTransform(np.eye(3), np.array([1.0, 2, 3])))
    assert np.allclose(t.translation, [-1, -2, -3]) and np.allclose(t.rotation, np.eye(3))
    t = random_rigid(rng)
    assert close(invert(invert(t)), t)


def test_compose_applies_right_then_left(rng):
    a, b = random_rigid(rng), random_rigid(rng)
    p = rng.normal(size=(10, 3))
    assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


def test_rigid_rejects_non_rotation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1, -1]), np.zeros(3))


def test_transform_pointmap_examples(rng):
    pts = rng.normal(size=(4, 5, 3))
    mask = rng.uniform(size=(4, 5)) > 0.3
    pm = Pointmap(pts, Frame.LOCAL, mask)
    same = transform_pointmap(pm, SimilarityTransform(1.0, np.eye(3), np.zeros(3)))
    assert np.array_equal(same.points, pm.points)
    one = Pointmap(np.ones((1, 1, 3)), Frame.LOCAL, np.ones((1, 1), bool))
    assert np.allclose(transform_pointmap(one, SimilarityTransform(2.0, np.eye(3), np.zeros(3))).points, 2.0)
    s = SimilarityTransform(1.7, random_rotation(rng), rng.normal(size=3))
    back = transform_pointmap(transform_pointmap(pm, s), s.inverse())
    assert np.abs(back.points - pm.points).max() < 1e-10


def test_project_examples():
    k = CameraIntrinsics(100.0, 50.0, 50.0)
    assert np.allclose(project([0, 0, 1.0], k), [50, 50])
    assert np.allclose(project([1, 0, 1.0], k), [150, 50])
    with pytest.raises(NonPositiveDepth):
        project([0, 0, -1.0], k)


def test_unproject_examples(rng):
    k = CameraIntrinsics(100.0, 50.0, 50.0)
    assert np.allclose(unproject(50, 50, 2.0, k), [0, 0, 2])
    assert np.allclose(unproject(150, 50, 1.0, k), [1, 0, 1])
    u, v = rng.uniform(0, 100, size=(2, 1000))
    d = rng.uniform(0.1, 10, size=1000)
    uv = project(unproject(u, v, d, k), k)
    assert np.abs(uv - np.stack([u, v], 1)).max() < 1e-9


def test_pixel_grid_centers():
    u, v = pixel_grid(2, 3)
    assert u[0].tolist() == [0.5, 1.5, 2.5]
    assert v[:, 0].tolist() == [0.5, 1.5]


def test_rotation_angle_examples():
    assert rotation_angle_deg(np.eye(3), np.eye(3)) == 0.0
    assert rotation_angle_deg(np.eye(3), rot_z(20)) == pytest.approx(20, abs=1e-9)
    assert rotation_angle_deg(rot_x(170), rot_x(-170)) == pytest.approx(20, abs=1e-9)


def test_translation_angle_examples():
    assert translation_angle_deg([1, 0, 0], [1, 0, 0]) == 0.0
    assert translation_angle_deg([1, 0, 0], [0, 1, 0]) == pytest.approx(90)
    assert translation_angle_deg([0, 0, 0], [0, 0, 0]) == 0.0
    assert translation_angle_deg([0, 0, 0], [0, 0, 1]) == 180.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_so3_exp_is_rotation_with_matching_angle(w):
    w = np.array(w)
    r = so3_exp(w)
    assert is_rotation(r)
    theta = np.degrees(np.linalg.norm(w))
    if theta < 179:
        assert rotation_angle_deg(np.eye(3), r) == pytest.approx(theta, abs=1e-6)


def test_confidence_map_clamps():
    c = ConfidenceMap(np.array([[-50.0, 0.0, 50.0]]))
    assert c.raw.tolist() == [[-20.0, 0.0, 20.0]]
    assert np.all(c.positive() > 1)

import numpy as np
import pytest

from pointfuse.errors import FormatError
from pointfuse.geometry import CameraIntrinsics, CameraModel, RigidTransform, is_rotation
from pointfuse.synthgen import (
    AxisAlignedBox, Plane, SceneSpec, ScenePrimitive, Sphere, make_sample, raycast_view,
    read_dataset, render_sample, sample_camera_ring, sample_scene, write_dataset,
)


def forward_camera(h, w, focal=10.0):
    return CameraModel(CameraIntrinsics.centered(focal, h, w), RigidTransform.identity())


def test_scene_deterministic():
    a = sample_scene(SceneSpec(rng_seed=5))
    b = sample_scene(SceneSpec(rng_seed=5))
    assert len(a) == len(b)
    for p, q in zip(a, b):
        assert type(p.shape) is type(q.shape)
        for name in vars(p.shape):
            assert np.array_equal(getattr(p.shape, name), getattr(q.shape, name))
        assert np.array_equal(p.albedo, q.albedo)


def test_scene_count_range():
    assert len(sample_scene(SceneSpec(min_primitives=1, max_primitives=1, rng_seed=3))) == 1


def test_every_scene_visible_from_default_ring():
    for seed in range(100):
        s = make_sample(seed, 4, 16, 16)
        assert s.masks.reshape(4, -1).any(axis=1).all()


def test_ring_single_view_is_identity():
    (p,) = sample_camera_ring(1, seed=3)
    assert np.array_equal(p.rotation, np.eye(3)) and np.array_equal(p.translation, np.zeros(3))


def test_ring_rotations_and_axes_through_origin():
    poses = sample_camera_ring(12, seed=9, reexpress=False)
    for p in poses:
        assert is_rotation(p.rotation, 1e-9)
        axis = p.rotation[:, 2]
        c = p.translation
        # distance from the origin to the optical-axis line
        dist = np.linalg.norm(c - (c @ axis) * axis)
        assert dist < 0.1


def test_sphere_center_depth():
    scene = [ScenePrimitive(Sphere(np.array([0, 0, 5.0]), 1.0), np.ones(3))]
    depth, _, mask = raycast_view(scene, forward_camera(9, 9), 9, 9)
    assert mask[4, 4] and depth[4, 4] == pytest.approx(4.0, abs=1e-12)


def test_empty_scene_has_no_hits():
    _, _, mask = raycast_view([], forward_camera(8, 8), 8, 8)
    assert not mask.any()


def test_plane_depth_follows_ray_angle():
    h = w = 9
    cam = forward_camera(h, w, focal=6.0)
    scene = [ScenePrimitive(Plane(np.array([0, 0, 3.0]), np.array([0, 0, -1.0]), 100.0), np.ones(3))]
    depth, _, mask = raycast_view(scene, cam, h, w)
    assert mask.all()
    v, u = np.mgrid[0:h, 0:w] + 0.5
    cos = 1.0 / np.sqrt(1 + ((u - 4.5) / 6.0) ** 2 + ((v - 4.5) / 6.0) ** 2)
    assert np.abs(depth - 3.0 / cos).max() < 1e-12
    assert depth[4, 4] == pytest.approx(3.0)


def test_box_hit_from_outside():
    scene = [ScenePrimitive(AxisAlignedBox(np.array([-1, -1, 4.0]), np.array([1, 1, 6.0])), np.ones(3))]
    depth, _, _ = raycast_view(scene, forward_camera(9, 9), 9, 9)
    assert depth[4, 4] == pytest.approx(4.0)


def test_render_consistency():
    s = make_sample(11, 4)
    assert np.array_equal(s.local_points[0], s.global_points[0])
    for i in range(4):
        m = s.masks[i]
        g = s.cameras[i].pose.apply(s.local_points[i][m])
        assert np.abs(g - s.global_points[i][m]).max() < 1e-9


def test_permuted_cameras_permute_views():
    scene = sample_scene(SceneSpec(rng_seed=2))
    k = CameraIntrinsics.centered(27.7, 32, 32)
    cams = [CameraModel(k, p) for p in sample_camera_ring(4, seed=8, reexpress=False)]
    a = render_sample(scene, cams, 32, 32)
    order = [0, 3, 1, 2]
    b = render_sample(scene, [cams[i] for i in order], 32, 32)
    for new, old in enumerate(order):
        pa = np.sort(a.global_points[old][a.masks[old]], axis=0)
        pb = np.sort(b.global_points[new][b.masks[new]], axis=0)
        assert np.abs(pa - pb).max() < 1e-9


def test_subset_reanchors():
    s = make_sample(4, 6)
    sub = s.subset([2, 5])
    assert np.allclose(sub.global_points[0], sub.local_points[0], atol=1e-9)
    m = sub.masks[1]
    assert np.allclose(sub.cameras[1].pose.apply(sub.local_points[1][m]), sub.global_points[1][m], atol=1e-9)


def test_dataset_roundtrip(tmp_path):
    s = make_sample(0, 3, 16, 16)
    p1, p2 = tmp_path / "a.f3r", tmp_path / "b.f3r"
    write_dataset([s], p1)
    (r,) = read_dataset(p1)
    assert np.array_equal(r.images, s.images.astype(np.float32))
    assert np.array_equal(r.global_points, s.global_points.astype(np.float32))
    assert np.array_equal(r.masks, s.masks)
    for a, b in zip(r.cameras, s.cameras):
        assert np.array_equal(a.pose.rotation, b.pose.rotation)
        assert a.intrinsics.focal == b.intrinsics.focal
    write_dataset(read_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_truncated_and_empty(tmp_path):
    p = tmp_path / "d.f3r"
    write_dataset([make_sample(0, 2, 8, 8)], p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_dataset(p)
    write_dataset([], p)
    assert read_dataset(p) == []


def test_ground_plane_is_appended_without_changing_the_scene():
    plain = sample_scene(SceneSpec(rng_seed=9, extent=3.0))
    floored = sample_scene(SceneSpec(rng_seed=9, extent=3.0, ground_plane=True))
    assert len(floored) == len(plain) + 1
    assert all(np.array_equal(p.albedo, q.albedo) for p, q in zip(plain, floored))
    floor = floored[-1].shape
    assert isinstance(floor, Plane) and np.array_equal(floor.normal, [0, 0, 1])
    assert floor.half_extent == 1.5
    s = make_sample(9, 4, scene_spec=SceneSpec(rng_seed=9, extent=3.0, ground_plane=True))
    assert s.masks.mean() > make_sample(9, 4, scene_spec=SceneSpec(rng_seed=9, extent=3.0)).masks.mean()

import pytest
import numpy as np
from scipy.spatial.transform import Rotation
from src.errors import PoseError, RangeError, BoundsError
from src.scene_model import (
    Intrinsics,
    CameraPose,
    RayBatch,
    SceneBounds,
    Trajectory,
    ray_for_pixel,
    rays_for_image,
    project_point,
    look_at,
    orthonormalize,
    interpolate_pose,
    normalized_timestamps,
)

UNIT_BOUNDS = SceneBounds(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))

INVALID_INTRINSICS = [
    (0.0, 10.0, 4.0, 4.0, 9, 9),
    (10.0, -1.0, 4.0, 4.0, 9, 9),
    (10.0, 10.0, 9.0, 4.0, 9, 9),
    (10.0, 10.0, 4.0, -0.5, 9, 9),
]

INTERPOLATION_ANGLES = [
    (0.0, 0.0),
    (0.25, 22.5),
    (0.5, 45.0),
    (1.0, 90.0),
]


def rotation_about_z(degrees):
    angle = np.radians(degrees)
    return np.array([[np.cos(angle), -np.sin(angle), 0.0],
                     [np.sin(angle), np.cos(angle), 0.0],
                     [0.0, 0.0, 1.0]])


@pytest.fixture(name="intrinsics")
def fixture_intrinsics():
    return Intrinsics(10.0, 10.0, 4.0, 4.0, 9, 9)


@pytest.fixture(name="overhead_pose")
def fixture_overhead_pose(intrinsics):
    return look_at(np.array([0.0, 0.0, 10.0]), np.zeros(3), intrinsics)


@pytest.mark.parametrize("fx, fy, cx, cy, width, height", INVALID_INTRINSICS)
def test_invalid_intrinsics(fx, fy, cx, cy, width, height):
    with pytest.raises(PoseError):
        Intrinsics(fx, fy, cx, cy, width, height)


def test_pose_rejects_scaled_rotation(intrinsics):
    with pytest.raises(PoseError):
        CameraPose(np.eye(3) * 1.01, np.zeros(3), intrinsics)


def test_pose_rejects_reflection(intrinsics):
    with pytest.raises(PoseError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), intrinsics)


def test_pose_rejects_timestamp(intrinsics):
    with pytest.raises(PoseError):
        CameraPose(np.eye(3), np.zeros(3), intrinsics, 1.5)


def test_straight_down_look_at(overhead_pose):
    # Looking along -z needs the fallback up vector
    assert np.allclose(overhead_pose.rotation, np.eye(3))
    assert np.allclose(overhead_pose.forward, [0.0, 0.0, -1.0])


def test_central_ray(overhead_pose):
    ray = ray_for_pixel(overhead_pose, 4, 4, UNIT_BOUNDS)
    assert ray is not None
    assert np.allclose(ray.direction, [0.0, 0.0, -1.0])
    assert ray.near == pytest.approx(9.0)
    assert ray.far == pytest.approx(11.0)
    assert ray.pixel == (4, 4)


def test_ray_missing_bounds_is_empty(intrinsics):
    pose = look_at(np.array([0.0, 0.0, 10.0]), np.array([0.0, 0.0, 20.0]), intrinsics)
    assert ray_for_pixel(pose, 4, 4, UNIT_BOUNDS) is None


def test_ray_pixel_out_of_range(overhead_pose):
    with pytest.raises(RangeError):
        ray_for_pixel(overhead_pose, 9, 0, UNIT_BOUNDS)


def test_rays_project_back_to_pixel_centres():
    intrinsics = Intrinsics(12.0, 11.0, 5.0, 3.5, 11, 8)
    pose = look_at(np.array([4.0, -3.0, 2.5]), np.array([0.1, 0.2, 0.0]), intrinsics, 0.3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        row = int(rng.integers(0, intrinsics.height))
        col = int(rng.integers(0, intrinsics.width))
        ray = ray_for_pixel(pose, row, col, UNIT_BOUNDS)
        if ray is None:
            continue
        for t in np.linspace(ray.near, ray.far, 5):
            assert np.allclose(project_point(pose, ray.at(t)), [row + 0.5, col + 0.5], atol=1e-6)
        assert UNIT_BOUNDS.contains(ray.at(0.5 * (ray.near + ray.far)))


def test_rays_for_image_matches_single_rays():
    intrinsics = Intrinsics(8.0, 8.0, 3.0, 2.0, 7, 5)
    pose = look_at(np.array([3.0, 3.0, 3.0]), np.zeros(3), intrinsics, 0.5)
    batch = rays_for_image(pose, UNIT_BOUNDS)
    assert len(batch) == intrinsics.width * intrinsics.height
    for index in range(len(batch)):
        row, col = divmod(index, intrinsics.width)
        ray = ray_for_pixel(pose, row, col, UNIT_BOUNDS)
        assert batch.valid[index] == (ray is not None)
        if ray is not None:
            assert np.allclose(batch.directions[index], ray.direction)
            assert batch.near[index] == pytest.approx(ray.near)
            assert batch.far[index] == pytest.approx(ray.far)
    assert np.all(batch.times == 0.5)


def test_ray_batch_from_rays():
    intrinsics = Intrinsics(8.0, 8.0, 3.0, 2.0, 7, 5)
    pose = look_at(np.array([3.0, 3.0, 3.0]), np.zeros(3), intrinsics, 0.25)
    batch = rays_for_image(pose, UNIT_BOUNDS)
    rays = [ray for ray in (ray_for_pixel(pose, row, col, UNIT_BOUNDS) for row in range(5) for col in range(7)) if ray]
    hits = batch.subset(batch.valid)
    rebuilt = RayBatch.from_rays(rays)
    assert len(rebuilt) == len(hits) > 0
    assert np.all(rebuilt.valid)
    assert np.allclose(rebuilt.origins, hits.origins)
    assert np.allclose(rebuilt.near, hits.near)
    assert np.all(rebuilt.times == 0.25)


def test_axis_parallel_ray_outside_slab():
    near, far, hit = UNIT_BOUNDS.intersect(np.array([2.0, 0.0, 5.0]), np.array([0.0, 0.0, -1.0]))
    assert not hit[0]


def test_bounds_must_be_ordered():
    with pytest.raises(BoundsError):
        SceneBounds(np.zeros(3), np.array([1.0, 0.0, 1.0]))


@pytest.mark.parametrize("s, expected_degrees", INTERPOLATION_ANGLES)
def test_interpolate_pose(intrinsics, s, expected_degrees):
    p0 = CameraPose(rotation_about_z(0.0), np.zeros(3), intrinsics, 0.0)
    p1 = CameraPose(rotation_about_z(90.0), np.array([2.0, 0.0, 0.0]), intrinsics, 1.0)
    pose = interpolate_pose(p0, p1, s)
    assert np.allclose(pose.rotation, rotation_about_z(expected_degrees), atol=1e-9)
    assert np.allclose(pose.translation, [2.0 * s, 0.0, 0.0])
    assert pose.timestamp == pytest.approx(s)


def test_interpolate_pose_range(overhead_pose):
    with pytest.raises(RangeError):
        interpolate_pose(overhead_pose, overhead_pose, 1.5)


ANTIPODAL_TESTS = [
    (np.eye(3), [0.0, 0.0, 1.0]),
    (np.eye(3), [0.0, 0.0, -1.0]),
    (Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix(), [1.0, 0.0, 0.0]),
    (Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix(), [0.0, -1.0, 0.0]),
]


@pytest.mark.parametrize("start, axis", ANTIPODAL_TESTS)
def test_interpolate_pose_half_turn(intrinsics, start, axis):
    half_turn = Rotation.from_rotvec(np.pi * np.array(axis)).as_matrix()
    p0 = CameraPose(start, np.zeros(3), intrinsics, 0.0)
    p1 = CameraPose(start @ half_turn, np.zeros(3), intrinsics, 1.0)
    pose = interpolate_pose(p0, p1, 0.5)
    # Assert that the turn runs about the axis whose largest component is positive
    expected = start @ Rotation.from_rotvec(0.5 * np.pi * np.abs(axis)).as_matrix()
    assert np.allclose(pose.rotation, expected, atol=1e-9)


def test_trajectory_requires_increasing_times(intrinsics):
    pose = CameraPose(np.eye(3), np.zeros(3), intrinsics, 0.5)
    with pytest.raises(PoseError):
        Trajectory((pose, pose))


def test_trajectory_location(intrinsics):
    poses = tuple(CameraPose(np.eye(3), np.array([float(i), 0.0, 0.0]), intrinsics, t)
                  for i, t in enumerate(normalized_timestamps(5)))
    trajectory = Trajectory(poses)
    assert trajectory.frame_interval == pytest.approx(0.25)
    assert trajectory.location(0.0) == poses[0]
    assert np.allclose(trajectory.location(0.375).translation, [1.5, 0.0, 0.0])
    assert np.allclose(trajectory.location(1.0).translation, [4.0, 0.0, 0.0])


def test_orthonormalize():
    noisy = rotation_about_z(30.0) + 1e-4 * np.arange(9).reshape(3, 3)
    rotation = orthonormalize(noisy)
    assert np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-12)
    assert np.linalg.det(rotation) == pytest.approx(1.0)

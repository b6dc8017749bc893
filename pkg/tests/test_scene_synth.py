import math
import pytest
import numpy as np
from src import constants
from src.dataset import load_scene
from src.scene_model import look_at
from src.scene_synth import (
    CameraPathSpec,
    PoseNoiseSpec,
    PrimitiveSpec,
    SceneSpec,
    generate_scene,
    load_scene_spec,
    perturb_poses,
    projected_box,
    render_frame,
    sample_pose_noise,
    silhouette_points,
    toy_dyn_1,
)

SMALL_CAMERA = CameraPathSpec(frame_count=4, resolution=24)

BALL = PrimitiveSpec(size=0.5, albedo=[0.9, 0.1, 0.1], class_id=0,
                     waypoints=[[-1.0, 0.5, 0.5], [1.0, -0.5, 0.5]])

PROJECTION_DISTANCES = [3.0, 5.0, 8.0]


@pytest.fixture(name="ball_scene", scope="module")
def fixture_ball_scene():
    return SceneSpec(name="ball", camera=SMALL_CAMERA, primitives=[BALL], class_names=["ball"])


def test_toy_scene_spec():
    spec = toy_dyn_1()
    assert spec.name == constants.TOY_SCENE_NAME
    assert spec.camera.frame_count == 60
    assert spec.camera.resolution == 64
    assert spec.seed == 7
    assert sum(primitive.moving for primitive in spec.primitives) == 3
    assert [primitive.class_id for primitive in spec.primitives] == [0, 1, 2, None]
    intrinsics = spec.camera.intrinsics()
    assert intrinsics.fx == pytest.approx(32.0 / math.tan(math.radians(25.0)))
    assert intrinsics.cx == 31.5
    assert load_scene_spec(constants.TOY_SCENE_NAME) == spec


def test_primitive_outside_bounds():
    with pytest.raises(ValueError):
        SceneSpec(primitives=[PrimitiveSpec(size=0.5, albedo=[1.0, 1.0, 1.0], waypoints=[[2.8, 0.0, 0.5]])])


def test_primitive_class_without_name():
    with pytest.raises(ValueError):
        SceneSpec(primitives=[BALL.model_copy(update={"class_id": 3})], class_names=["ball"])


def test_primitive_motion():
    assert BALL.moving
    assert np.allclose(BALL.position(0.0), [-1.0, 0.5, 0.5])
    assert np.allclose(BALL.position(0.5), [0.0, 0.0, 0.5])
    assert np.allclose(BALL.position(1.0), [1.0, -0.5, 0.5])
    still = PrimitiveSpec(size=0.3, albedo=[0.5, 0.5, 0.5], waypoints=[[0.0, 0.0, 0.3]])
    assert not still.moving


def test_camera_path():
    poses = SMALL_CAMERA.poses()
    assert len(poses) == 4
    assert [pose.timestamp for pose in poses] == pytest.approx([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
    for pose in poses:
        offset = np.array(SMALL_CAMERA.center) - pose.center
        assert np.allclose(pose.forward, offset / np.linalg.norm(offset))
        assert np.linalg.norm(pose.center[:2]) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        CameraPathSpec(kind="sweep")


def test_scene_without_primitives():
    dataset = generate_scene(SceneSpec(camera=SMALL_CAMERA))
    assert dataset.frame_count == 4
    for frame in dataset.frames:
        assert frame.boxes == []
        assert not np.any(frame.dynamic_mask)
        assert frame.image.shape == (24, 24, 3)
        assert np.all((frame.image >= 0.0) & (frame.image <= 1.0))


def test_static_primitive_is_time_invariant():
    still = PrimitiveSpec(size=0.5, albedo=[0.2, 0.8, 0.2], class_id=0, waypoints=[[0.5, 0.5, 0.5]])
    spec = SceneSpec(camera=SMALL_CAMERA, primitives=[still], class_names=["still"])
    pose = SMALL_CAMERA.poses()[0]
    early, early_mask, early_boxes = render_frame(spec, pose.with_timestamp(0.0))
    late, late_mask, late_boxes = render_frame(spec, pose.with_timestamp(0.9))
    assert np.array_equal(early, late)
    assert early_boxes == late_boxes
    assert not np.any(early_mask)


@pytest.mark.parametrize("distance", PROJECTION_DISTANCES)
def test_projected_sphere_width(distance):
    center = np.array([0.0, 0.0, 0.5])
    sphere = PrimitiveSpec(size=0.5, albedo=[1.0, 1.0, 1.0], waypoints=[center.tolist()])
    intrinsics = CameraPathSpec().intrinsics()
    pose = look_at(center + np.array([distance, 0.0, 0.0]), center, intrinsics)
    box = projected_box(pose, silhouette_points(sphere, center, pose.center))
    expected = 2.0 * intrinsics.fx * 0.5 / math.sqrt(distance ** 2 - 0.25)
    assert abs((box[2] - box[0]) - expected) <= 1.0
    assert abs((box[3] - box[1]) - expected) <= 1.0


def test_projected_box_behind_camera():
    intrinsics = CameraPathSpec().intrinsics()
    pose = look_at(np.array([5.0, 0.0, 0.5]), np.array([0.0, 0.0, 0.5]), intrinsics)
    assert projected_box(pose, np.array([[8.0, 0.0, 0.5]])) is None
    assert projected_box(pose, np.zeros((0, 3))) is None


def test_boxes_bound_the_silhouette(ball_scene):
    for pose in ball_scene.camera.poses():
        _, dynamic_mask, boxes = render_frame(ball_scene, pose)
        rows, cols = np.nonzero(dynamic_mask)
        assert len(boxes) == 1
        box = boxes[0]
        assert (box.class_id, box.instance_id) == (0, 0)
        # The ball is never occluded, so its visible pixels fill the box up to one pixel per side
        assert abs(box.x_min - cols.min()) <= 1
        assert abs(box.y_min - rows.min()) <= 1
        assert abs(box.x_max - (cols.max() + 1)) <= 1
        assert abs(box.y_max - (rows.max() + 1)) <= 1


def test_image_noise_is_seeded(ball_scene):
    noisy = ball_scene.model_copy(update={"image_noise": 0.05})
    pose = ball_scene.camera.poses()[1]
    first, _, _ = render_frame(noisy, pose, 1)
    second, _, _ = render_frame(noisy, pose, 1)
    clean, _, _ = render_frame(ball_scene, pose, 1)
    assert np.array_equal(first, second)
    assert not np.array_equal(first, clean)


def test_generate_independent_of_threads(ball_scene):
    single = generate_scene(ball_scene)
    threaded = generate_scene(ball_scene, threads=3)
    for first, second in zip(single.frames, threaded.frames):
        assert first.image_name == second.image_name
        assert np.array_equal(first.image, second.image)
        assert first.boxes == second.boxes


def test_generate_and_load(ball_scene, tmp_path):
    dataset = generate_scene(ball_scene, resolution=16, out_path=str(tmp_path / "scene"))
    assert dataset.root == str(tmp_path / "scene")
    loaded = load_scene(str(tmp_path / "scene"))
    assert loaded.frame_count == 4
    assert loaded.image_size == (16, 16)
    assert loaded.class_names == ["ball"]
    assert [frame.image_name for frame in loaded.frames] == [f"images/frame_{index:03d}.png" for index in range(4)]
    assert loaded.frames[0].mask_name == "masks/frame_000.png"
    assert np.array_equal(loaded.frames[2].load_dynamic_mask(), dataset.frames[2].dynamic_mask)


def test_toy_scene_loads(tmp_path):
    generate_scene(toy_dyn_1(), out_path=str(tmp_path / "toy"))
    dataset = load_scene(str(tmp_path / "toy"))
    assert dataset.frame_count == 60
    assert dataset.image_size == (64, 64)
    assert [instance for instance, _ in dataset.instances()] == [0, 1, 2]


def test_zero_noise_returns_the_dataset(ball_scene):
    dataset = generate_scene(ball_scene)
    assert perturb_poses(dataset, PoseNoiseSpec()) is dataset


def test_perturbed_poses(ball_scene):
    dataset = generate_scene(ball_scene)
    noisy = perturb_poses(dataset, PoseNoiseSpec(rotation_sigma=0.5, translation_sigma=0.01, seed=2))
    assert noisy.frame_count == dataset.frame_count
    for original, perturbed in zip(dataset.frames, noisy.frames):
        assert perturbed.image is original.image
        assert perturbed.timestamp == original.timestamp
        assert not np.array_equal(perturbed.pose.rotation, original.pose.rotation)
        assert np.linalg.norm(perturbed.pose.translation - original.pose.translation) < 0.6


def test_rotation_noise_is_half_normal():
    sigma = 0.5
    _, offsets, angles = sample_pose_noise(PoseNoiseSpec(rotation_sigma=sigma, seed=3), 1000, 1.0)
    expected = sigma * math.sqrt(2.0 / math.pi)
    assert np.degrees(np.abs(angles)).mean() == pytest.approx(expected, rel=0.1)
    assert not np.any(offsets)

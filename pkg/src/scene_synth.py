"""
Procedural dynamic scenes with exact ground truth.

Moving spheres and boxes over a checkered ground plane are ray cast directly (closed-form
intersections, Lambert plus ambient shading, no shadows). Ground-truth boxes are the pixel-centre
tight projections of each labelled primitive, and the dynamic mask marks pixels whose first hit is
a moving primitive. The ray caster shares no integration code with the volume renderer.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from src import constants
from src.annotator import BBoxAnnotation
from src.dataset import SceneDataset, SceneFrame, save_scene
from src.logger import create_logger
from src.scene_model import (CameraPose, Intrinsics, SceneBounds, look_at, normalized_timestamps,
                             project_point, rays_for_image)

logger = create_logger()

SHAPE_SPHERE = "sphere"
SHAPE_BOX = "box"
CAMERA_PATH_ORBIT = "orbit"
CAMERA_PATH_SWEEP = "sweep"
SILHOUETTE_POINTS = 720


def _check_vector(value, length=3):
    if len(value) != length:
        raise ValueError(f"expected {length} values, got {len(value)}")
    return value


class PrimitiveSpec(BaseModel):
    """A sphere (size = radius) or axis-aligned box (size = half extent) moving through its waypoints"""
    shape: str = SHAPE_SPHERE
    size: float = Field(gt=0.0)
    albedo: List[float]
    waypoints: List[List[float]]
    class_id: Optional[int] = Field(default=None, ge=0)

    @field_validator('shape')
    @classmethod
    def validate_shape(cls, value):
        if value not in (SHAPE_SPHERE, SHAPE_BOX):
            raise ValueError(f"unknown primitive shape '{value}'")
        return value

    @field_validator('albedo')
    @classmethod
    def validate_albedo(cls, value):
        _check_vector(value)
        if any(not 0.0 <= channel <= 1.0 for channel in value):
            raise ValueError("albedo channels must lie in [0, 1]")
        return value

    @field_validator('waypoints')
    @classmethod
    def validate_waypoints(cls, value):
        if not value:
            raise ValueError("a primitive needs at least one waypoint")
        for point in value:
            _check_vector(point)
        return value

    @property
    def moving(self) -> bool:
        return any(point != self.waypoints[0] for point in self.waypoints)

    def position(self, tau: float) -> np.ndarray:
        '''Piecewise-linear motion with evenly spaced knots over [0, 1]'''
        points = np.asarray(self.waypoints, dtype=np.float64)
        if len(points) == 1:
            return points[0].copy()
        knots = np.linspace(0.0, 1.0, len(points))
        return np.array([np.interp(tau, knots, points[:, axis]) for axis in range(3)])


class GroundSpec(BaseModel):
    cell_size: float = Field(default=0.5, gt=0.0)
    colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = ((0.75, 0.7, 0.6), (0.35, 0.35, 0.4))
    noise: float = Field(default=0.05, ge=0.0)
    seed: int = 0


class LightSpec(BaseModel):
    direction: List[float] = Field(default_factory=lambda: [-0.4, -0.3, -1.0])
    ambient: float = Field(default=0.3, ge=0.0, le=1.0)

    @field_validator('direction')
    @classmethod
    def validate_direction(cls, value):
        _check_vector(value)
        if not any(value):
            raise ValueError("light direction must be non-zero")
        return value


class CameraPathSpec(BaseModel):
    """Circular orbit around center, or a linear sweep from start to end looking at center"""
    kind: str = CAMERA_PATH_ORBIT
    frame_count: int = Field(default=constants.TOY_SCENE_FRAMES, ge=2)
    resolution: int = Field(default=constants.TOY_SCENE_RESOLUTION, ge=1)
    fov_degrees: float = Field(default=50.0, gt=0.0, lt=180.0)
    center: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.5])
    radius: float = Field(default=6.0, gt=0.0)
    altitude: float = 5.0
    start_azimuth: float = 0.0
    arc_degrees: float = 360.0
    start: Optional[List[float]] = None
    end: Optional[List[float]] = None

    @model_validator(mode="after")
    def validate_path(self):
        if self.kind not in (CAMERA_PATH_ORBIT, CAMERA_PATH_SWEEP):
            raise ValueError(f"unknown camera path '{self.kind}'")
        if self.kind == CAMERA_PATH_SWEEP and (self.start is None or self.end is None):
            raise ValueError("a sweep needs start and end positions")
        return self

    def intrinsics(self, resolution: Optional[int] = None) -> Intrinsics:
        size = resolution or self.resolution
        focal = 0.5 * size / math.tan(math.radians(self.fov_degrees) / 2.0)
        return Intrinsics(focal, focal, (size - 1) / 2.0, (size - 1) / 2.0, size, size)

    def poses(self, resolution: Optional[int] = None) -> List[CameraPose]:
        intrinsics = self.intrinsics(resolution)
        center = np.asarray(self.center, dtype=np.float64)
        poses = []
        for index, tau in enumerate(normalized_timestamps(self.frame_count)):
            if self.kind == CAMERA_PATH_ORBIT:
                # The last frame stops one step short of closing the arc
                azimuth = math.radians(self.start_azimuth + self.arc_degrees * index / self.frame_count)
                position = center + np.array([self.radius * math.cos(azimuth),
                                              self.radius * math.sin(azimuth), self.altitude])
            else:
                fraction = index / (self.frame_count - 1)
                position = (1.0 - fraction) * np.asarray(self.start) + fraction * np.asarray(self.end)
            poses.append(look_at(position, center, intrinsics, tau))
        return poses


class SceneSpec(BaseModel):
    name: str = "scene"
    bounds_min: List[float] = Field(default_factory=lambda: [-3.0, -3.0, -0.25])
    bounds_max: List[float] = Field(default_factory=lambda: [3.0, 3.0, 1.75])
    ground: GroundSpec = Field(default_factory=lambda: GroundSpec())
    light: LightSpec = Field(default_factory=lambda: LightSpec())
    camera: CameraPathSpec = Field(default_factory=lambda: CameraPathSpec())
    primitives: List[PrimitiveSpec] = Field(default_factory=list)
    class_names: List[str] = Field(default_factory=list)
    image_noise: float = Field(default=0.0, ge=0.0)
    seed: int = constants.TOY_SCENE_SEED

    @model_validator(mode="after")
    def validate_primitives(self):
        bounds = self.bounds()
        for index, primitive in enumerate(self.primitives):
            # Motion is piecewise linear, so the waypoints bound every position
            for point in primitive.waypoints:
                point = np.asarray(point, dtype=np.float64)
                if np.any(point - primitive.size < bounds.minimum) or np.any(point + primitive.size > bounds.maximum):
                    raise ValueError(f"primitive {index} leaves the scene bounds at waypoint {point.tolist()}")
            if primitive.class_id is not None and self.class_names and primitive.class_id >= len(self.class_names):
                raise ValueError(f"primitive {index} has class {primitive.class_id} without a class name")
        return self

    def bounds(self) -> SceneBounds:
        return SceneBounds(np.asarray(self.bounds_min, dtype=np.float64), np.asarray(self.bounds_max, dtype=np.float64))


class PoseNoiseSpec(BaseModel):
    """Rotation noise in degrees; translation noise as a fraction of the scene diagonal"""
    rotation_sigma: float = Field(default=0.0, ge=0.0)
    translation_sigma: float = Field(default=0.0, ge=0.0)
    seed: int = 0


def toy_dyn_1() -> SceneSpec:
    '''Three moving spheres and one static box under a circular orbit, 60 frames of 64x64'''
    return SceneSpec(
        name=constants.TOY_SCENE_NAME,
        primitives=[
            PrimitiveSpec(shape=SHAPE_SPHERE, size=0.35, albedo=[0.9, 0.2, 0.15], class_id=0,
                          waypoints=[[-2.0, -2.0, 0.35], [1.8, -2.0, 0.35], [1.8, 0.6, 0.35]]),
            PrimitiveSpec(shape=SHAPE_SPHERE, size=0.45, albedo=[0.2, 0.8, 0.25], class_id=1,
                          waypoints=[[-1.9, 1.7, 0.45], [-1.9, -0.9, 0.45], [0.6, -1.0, 0.45]]),
            PrimitiveSpec(shape=SHAPE_SPHERE, size=0.55, albedo=[0.2, 0.35, 0.9], class_id=2,
                          waypoints=[[1.7, 1.9, 0.55], [-0.6, 1.9, 0.55]]),
            PrimitiveSpec(shape=SHAPE_BOX, size=0.4, albedo=[0.8, 0.8, 0.75],
                          waypoints=[[0.0, 0.0, 0.4]]),
        ],
        class_names=["small", "medium", "large"],
    )


@dataclass
class _Hits:
    distance: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    primitive: np.ndarray


def _intersect_sphere(origins, directions, center, radius):
    offset = origins - center
    b = np.einsum("ij,ij->i", directions, offset)
    c = np.einsum("ij,ij->i", offset, offset) - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        distance = -b - np.sqrt(disc)
    distance = np.where((disc >= 0.0) & (distance > 0.0), distance, np.inf)
    points = origins + np.where(np.isfinite(distance), distance, 0.0)[:, None] * directions
    return distance, (points - center) / radius


def _intersect_box(origins, directions, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse = 1.0 / directions
        t_low = (center - half - origins) * inverse
        t_high = (center + half - origins) * inverse
    t_enter = np.minimum(t_low, t_high)
    t_exit = np.maximum(t_low, t_high)
    t_enter = np.where(np.isnan(t_enter), -np.inf, t_enter)
    t_exit = np.where(np.isnan(t_exit), np.inf, t_exit)
    near = t_enter.max(axis=1)
    far = t_exit.min(axis=1)
    distance = np.where((far >= near) & (near > 0.0), near, np.inf)
    axis = t_enter.argmax(axis=1)
    normal = np.zeros_like(directions)
    rows = np.arange(directions.shape[0])
    normal[rows, axis] = -np.sign(directions[rows, axis])
    return distance, normal


def _ground_albedo(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    ground = spec.ground
    cells = np.floor(points[:, :2] / ground.cell_size).astype(np.int64)
    checker = (cells[:, 0] + cells[:, 1]) % 2
    colors = np.asarray(ground.colors, dtype=np.float64)
    albedo = colors[checker]
    if ground.noise > 0:
        # Fixed per-cell jitter from a seeded table covering the bounds
        extent = float(np.max(np.asarray(spec.bounds_max[:2]) - np.asarray(spec.bounds_min[:2])))
        count = int(math.ceil(extent / ground.cell_size)) + 2
        table = np.random.default_rng(ground.seed).uniform(-ground.noise, ground.noise, size=(count, count))
        lo = np.floor(np.asarray(spec.bounds_min[:2]) / ground.cell_size).astype(np.int64)
        index = np.clip(cells - lo, 0, count - 1)
        albedo = albedo + table[index[:, 0], index[:, 1]][:, None]
    return np.clip(albedo, 0.0, 1.0)


def _cast(spec: SceneSpec, origins: np.ndarray, directions: np.ndarray, tau: float) -> _Hits:
    '''Nearest surface per ray; primitive is -1 for the ground, -2 for a miss'''
    count = origins.shape[0]
    distance = np.full(count, np.inf)
    normal = np.zeros((count, 3))
    albedo = np.zeros((count, 3))
    primitive = np.full(count, -2)

    bounds_min = np.asarray(spec.bounds_min)
    bounds_max = np.asarray(spec.bounds_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        ground_distance = -origins[:, 2] / directions[:, 2]
    ground_points = origins + np.where(np.isfinite(ground_distance), ground_distance, 0.0)[:, None] * directions
    inside = np.all((ground_points[:, :2] >= bounds_min[:2]) & (ground_points[:, :2] <= bounds_max[:2]), axis=1)
    ground_hit = (ground_distance > 0.0) & inside
    distance[ground_hit] = ground_distance[ground_hit]
    normal[ground_hit] = [0.0, 0.0, 1.0]
    albedo[ground_hit] = _ground_albedo(spec, ground_points[ground_hit])
    primitive[ground_hit] = -1

    for index, item in enumerate(spec.primitives):
        center = item.position(tau)
        if item.shape == SHAPE_SPHERE:
            hit_distance, hit_normal = _intersect_sphere(origins, directions, center, item.size)
        else:
            hit_distance, hit_normal = _intersect_box(origins, directions, center, item.size)
        closer = hit_distance < distance
        distance[closer] = hit_distance[closer]
        normal[closer] = hit_normal[closer]
        albedo[closer] = item.albedo
        primitive[closer] = index
    return _Hits(distance, normal, albedo, primitive)


def _shade(spec: SceneSpec, hits: _Hits) -> np.ndarray:
    to_light = -np.asarray(spec.light.direction, dtype=np.float64)
    to_light = to_light / np.linalg.norm(to_light)
    lambert = np.clip(hits.normal @ to_light, 0.0, None)
    ambient = spec.light.ambient
    colors = hits.albedo * (ambient + (1.0 - ambient) * lambert)[:, None]
    colors[hits.primitive == -2] = 0.0
    return np.clip(colors, 0.0, 1.0)


def silhouette_points(primitive: PrimitiveSpec, center: np.ndarray, camera_center: np.ndarray) -> np.ndarray:
    '''World points whose projections outline the primitive: the tangent circle of a sphere or a box's corners'''
    if primitive.shape == SHAPE_BOX:
        signs = np.array(np.meshgrid([-1.0, 1.0], [-1.0, 1.0], [-1.0, 1.0], indexing="ij")).reshape(3, -1).T
        return center + primitive.size * signs
    offset = center - camera_center
    distance = np.linalg.norm(offset)
    radius = primitive.size
    if distance <= radius:
        return np.zeros((0, 3))
    axis = offset / distance
    circle_center = camera_center + offset * (1.0 - radius * radius / (distance * distance))
    circle_radius = radius * math.sqrt(distance * distance - radius * radius) / distance
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u = u / np.linalg.norm(u)
    v = np.cross(axis, u)
    angles = np.linspace(0.0, 2.0 * np.pi, SILHOUETTE_POINTS, endpoint=False)
    return circle_center + circle_radius * (np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v)


def projected_box(pose: CameraPose, points: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    '''Smallest box holding every pixel whose centre falls inside the projected extent, clipped to the image'''
    if len(points) == 0:
        return None
    camera = (points - pose.translation) @ pose.rotation
    if np.any(camera[:, 2] >= 0.0):
        return None
    coordinates = project_point(pose, points)
    rows, cols = coordinates[:, 0], coordinates[:, 1]
    intrinsics = pose.intrinsics
    x_min = max(int(math.ceil(cols.min() - 0.5)), 0)
    x_max = min(int(math.floor(cols.max() - 0.5)) + 1, intrinsics.width)
    y_min = max(int(math.ceil(rows.min() - 0.5)), 0)
    y_max = min(int(math.floor(rows.max() - 0.5)) + 1, intrinsics.height)
    if x_min >= x_max or y_min >= y_max:
        return None
    return x_min, y_min, x_max, y_max


def render_frame(spec: SceneSpec, pose: CameraPose, frame_index: int = 0
                 ) -> Tuple[np.ndarray, np.ndarray, List[BBoxAnnotation]]:
    '''(image, dynamic mask, ground-truth boxes) of one frame'''
    intrinsics = pose.intrinsics
    tau = pose.timestamp
    rays = rays_for_image(pose, spec.bounds())
    hits = _cast(spec, rays.origins, rays.directions, tau)
    image = _shade(spec, hits).reshape(intrinsics.height, intrinsics.width, 3)
    if spec.image_noise > 0:
        rng = np.random.default_rng([spec.seed, frame_index])
        image = np.clip(image + rng.normal(0.0, spec.image_noise, size=image.shape), 0.0, 1.0)

    moving = [index for index, item in enumerate(spec.primitives) if item.moving]
    dynamic_mask = np.isin(hits.primitive, moving).reshape(intrinsics.height, intrinsics.width).astype(np.float64)

    boxes = []
    for index, item in enumerate(spec.primitives):
        if item.class_id is None:
            continue
        extent = projected_box(pose, silhouette_points(item, item.position(tau), pose.center))
        if extent is None:
            continue
        x_min, y_min, x_max, y_max = extent
        boxes.append(BBoxAnnotation(class_id=item.class_id, instance_id=index, x_min=x_min, y_min=y_min,
                                    x_max=x_max, y_max=y_max, area=(x_max - x_min) * (y_max - y_min)))
    return image, dynamic_mask, boxes


def generate_scene(spec: SceneSpec, resolution: Optional[int] = None, out_path: Optional[str] = None,
                   threads: int = 1) -> SceneDataset:
    '''Render every frame of the camera path; frames are independent, so threads never change the result'''
    poses = spec.camera.poses(resolution)

    def build(index: int) -> SceneFrame:
        image, dynamic_mask, boxes = render_frame(spec, poses[index], index)
        name = f"frame_{index:03d}.png"
        return SceneFrame(f"{constants.IMAGES_FOLDER}/{name}", poses[index], boxes,
                          f"{constants.MASKS_FOLDER}/{name}", image=image, dynamic_mask=dynamic_mask)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            frames = list(executor.map(build, range(len(poses))))
    else:
        frames = [build(index) for index in range(len(poses))]

    dataset = SceneDataset(spec.name, spec.bounds(), frames, class_names=list(spec.class_names))
    logger.info("Generated scene %s: %d frames, %d primitives", spec.name, len(frames), len(spec.primitives))
    if out_path is not None:
        save_scene(dataset, out_path)
        dataset.root = out_path
    return dataset


def sample_pose_noise(noise: PoseNoiseSpec, count: int, diagonal: float
                      ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''(rotation matrices, translation offsets, signed angles in radians) for count poses'''
    rng = np.random.default_rng(noise.seed)
    axes = rng.normal(size=(count, 3))
    axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.normal(0.0, math.radians(noise.rotation_sigma), size=count)
    offsets = rng.normal(0.0, noise.translation_sigma * diagonal, size=(count, 3))
    rotations = Rotation.from_rotvec(axes * angles[:, None]).as_matrix()
    return rotations, offsets, angles


def perturb_poses(dataset: SceneDataset, noise: PoseNoiseSpec) -> SceneDataset:
    '''Compose every pose with a random rotation and translation offset; images are untouched'''
    if noise.rotation_sigma == 0.0 and noise.translation_sigma == 0.0:
        return dataset
    rotations, offsets, _ = sample_pose_noise(noise, dataset.frame_count, dataset.bounds.diagonal)
    poses = [CameraPose(frame.pose.rotation @ rotation, frame.pose.translation + offset,
                        frame.pose.intrinsics, frame.pose.timestamp)
             for frame, rotation, offset in zip(dataset.frames, rotations, offsets)]
    logger.info("Perturbed %d poses (rotation sigma %.3f deg, translation sigma %.3f)",
                len(poses), noise.rotation_sigma, noise.translation_sigma)
    return dataset.with_poses(poses)


def load_scene_spec(name_or_path: str) -> SceneSpec:
    '''The named toy scene or a JSON scene description'''
    if name_or_path == constants.TOY_SCENE_NAME:
        return toy_dyn_1()
    with open(name_or_path, 'r', encoding="utf-8") as spec_file:
        return SceneSpec.model_validate_json(spec_file.read())

"""Camera poses, rays, scene bounds and trajectories, plus the pinhole and interpolation math built on them.

Conventions: right-handed world with +z up; the camera looks along its own -z axis with +x to the right
and +y up, so image rows grow downward. (cx, cy) is the pixel index the optical axis passes through, and
continuous image coordinates place the centre of pixel (row, col) at (row + 0.5, col + 0.5).
"""
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from src import constants
from src.errors import PoseError, RangeError, BoundsError


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise PoseError(f"Focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise PoseError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}")


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform with intrinsics and a normalized timestamp"""
    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics
    timestamp: float = 0.0

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "timestamp", float(self.timestamp))

        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise PoseError("Pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > constants.ROTATION_TOLERANCE:
            raise PoseError("Rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > constants.ROTATION_TOLERANCE:
            raise PoseError("Rotation determinant is not +1")
        if not 0.0 <= self.timestamp <= 1.0:
            raise PoseError(f"Timestamp {self.timestamp} outside [0, 1]")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        '''World-frame optical axis (the camera's -z axis)'''
        return -self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        '''4x4 camera-to-world matrix'''
        transform = np.eye(4)
        transform[:3, :3] = self.rotation
        transform[:3, 3] = self.translation
        return transform

    def with_timestamp(self, timestamp: float) -> "CameraPose":
        return replace(self, timestamp=timestamp)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.intrinsics == other.intrinsics
                and self.timestamp == other.timestamp)

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes(), self.intrinsics, self.timestamp))


@dataclass(frozen=True)
class Ray:
    """A single camera ray clipped to the scene bounds"""
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: Tuple[int, int]
    timestamp: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > constants.DIRECTION_TOLERANCE:
            raise RangeError("Ray direction must be unit length")
        if not 0.0 <= self.near < self.far:
            raise RangeError(f"Ray interval [{self.near}, {self.far}] is empty")

    def at(self, distance: float) -> np.ndarray:
        return self.origin + distance * self.direction


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned scene box in world meters"""
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        minimum = np.array(self.minimum, dtype=np.float64).reshape(3)
        maximum = np.array(self.maximum, dtype=np.float64).reshape(3)
        if not np.all(minimum < maximum):
            raise BoundsError(f"Bounds minimum {minimum} must be below maximum {maximum}")
        minimum.setflags(write=False)
        maximum.setflags(write=False)
        object.__setattr__(self, "minimum", minimum)
        object.__setattr__(self, "maximum", maximum)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.minimum + self.maximum)

    @property
    def extent(self) -> np.ndarray:
        return self.maximum - self.minimum

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.minimum) & (points <= self.maximum), axis=-1)

    def intersect(self, origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        '''Slab test for a batch of rays; returns (near, far, hit) with near clamped to 0'''
        origins = np.atleast_2d(origins)
        directions = np.atleast_2d(directions)
        with np.errstate(divide="ignore", invalid="ignore"):
            inverse = 1.0 / directions
            t_low = (self.minimum - origins) * inverse
            t_high = (self.maximum - origins) * inverse
        t_enter = np.minimum(t_low, t_high)
        t_exit = np.maximum(t_low, t_high)
        # Axis-parallel rays: inside the slab means unbounded along that axis
        parallel = directions == 0.0
        inside_slab = (origins >= self.minimum) & (origins <= self.maximum)
        t_enter = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t_enter)
        t_exit = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t_exit)
        near = np.maximum(np.max(t_enter, axis=-1), 0.0)
        far = np.min(t_exit, axis=-1)
        hit = far > near
        return near, far, hit

    def __eq__(self, other):
        if not isinstance(other, SceneBounds):
            return NotImplemented
        return np.array_equal(self.minimum, other.minimum) and np.array_equal(self.maximum, other.maximum)

    def __hash__(self):
        return hash((self.minimum.tobytes(), self.maximum.tobytes()))


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered camera poses of a recorded sequence"""
    poses: Tuple[CameraPose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        if len(poses) < 2:
            raise RangeError("A trajectory needs at least two poses")
        times = np.array([pose.timestamp for pose in poses])
        if np.any(np.diff(times) <= 0):
            raise PoseError("Trajectory timestamps must be strictly increasing")

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    @property
    def frame_interval(self) -> float:
        '''Mean spacing in normalized time; 1/(F-1) for uniform frames spanning [0, 1]'''
        return (self.poses[-1].timestamp - self.poses[0].timestamp) / (self.frame_count - 1)

    def location(self, s: float) -> CameraPose:
        '''Pose at arc parameter s in [0, 1], interpolated between the bracketing recorded frames'''
        if not 0.0 <= s <= 1.0:
            raise RangeError(f"Trajectory parameter {s} outside [0, 1]")
        position = s * (self.frame_count - 1)
        index = min(int(math.floor(position)), self.frame_count - 2)
        return interpolate_pose(self.poses[index], self.poses[index + 1], position - index)


def _camera_direction(intrinsics: Intrinsics, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    x = (cols - intrinsics.cx) / intrinsics.fx
    y = -(rows - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, -np.ones_like(x)], axis=-1)


def ray_for_pixel(pose: CameraPose, row: int, col: int, bounds: SceneBounds) -> Optional[Ray]:
    '''
    Back-project the centre of pixel (row, col) through the pinhole model and clip it to the scene bounds.
    Returns None (the empty-ray marker, rendered as background) when the ray misses the bounds.
    '''
    intrinsics = pose.intrinsics
    if not (0 <= row < intrinsics.height and 0 <= col < intrinsics.width):
        raise RangeError(f"Pixel ({row}, {col}) outside image {intrinsics.width}x{intrinsics.height}")

    direction = pose.rotation @ _camera_direction(intrinsics, np.float64(row), np.float64(col))
    direction = direction / np.linalg.norm(direction)
    origin = pose.translation.copy()
    near, far, hit = bounds.intersect(origin, direction)
    if not hit[0]:
        return None
    return Ray(origin, direction, float(near[0]), float(far[0]), (int(row), int(col)), pose.timestamp)


@dataclass
class RayBatch:
    """Flat arrays of rays; rays that miss the bounds carry valid = False and near = far = 0"""
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    times: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = self.far > self.near

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, index) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index], self.near[index],
                        self.far[index], self.times[index], self.valid[index])

    @classmethod
    def from_rays(cls, rays: Sequence[Ray]) -> "RayBatch":
        return cls(np.array([ray.origin for ray in rays]).reshape(-1, 3),
                   np.array([ray.direction for ray in rays]).reshape(-1, 3),
                   np.array([ray.near for ray in rays], dtype=np.float64),
                   np.array([ray.far for ray in rays], dtype=np.float64),
                   np.array([ray.timestamp for ray in rays], dtype=np.float64))

    @classmethod
    def concatenate(cls, batches: Sequence["RayBatch"]) -> "RayBatch":
        return cls(np.concatenate([b.origins for b in batches]),
                   np.concatenate([b.directions for b in batches]),
                   np.concatenate([b.near for b in batches]),
                   np.concatenate([b.far for b in batches]),
                   np.concatenate([b.times for b in batches]),
                   np.concatenate([b.valid for b in batches]))


def rays_for_image(pose: CameraPose, bounds: SceneBounds, timestamp: Optional[float] = None) -> RayBatch:
    '''Vectorized ray_for_pixel over every pixel of the image in row-major order'''
    intrinsics = pose.intrinsics
    rows, cols = np.meshgrid(np.arange(intrinsics.height, dtype=np.float64),
                             np.arange(intrinsics.width, dtype=np.float64), indexing="ij")
    directions = _camera_direction(intrinsics, rows.ravel(), cols.ravel()) @ pose.rotation.T
    directions = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, directions.shape).copy()
    near, far, hit = bounds.intersect(origins, directions)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    time = pose.timestamp if timestamp is None else timestamp
    times = np.full(near.shape, float(time))
    return RayBatch(origins, directions, near, far, times, hit)


def project_point(pose: CameraPose, point: np.ndarray) -> np.ndarray:
    '''World point(s) to continuous (row, col) coordinates; pixel (r, c) has its centre at (r + 0.5, c + 0.5)'''
    intrinsics = pose.intrinsics
    camera = (np.asarray(point, dtype=np.float64) - pose.translation) @ pose.rotation
    depth = -camera[..., 2]
    col = intrinsics.cx + intrinsics.fx * camera[..., 0] / depth + 0.5
    row = intrinsics.cy - intrinsics.fy * camera[..., 1] / depth + 0.5
    return np.stack([row, col], axis=-1)


def look_at(position: np.ndarray, target: np.ndarray, intrinsics: Intrinsics, timestamp: float = 0.0,
            up: Sequence[float] = (0.0, 0.0, 1.0)) -> CameraPose:
    '''Camera at position whose optical axis passes through target'''
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # Looking straight along the up vector; any horizontal right axis works
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    camera_up = np.cross(right, forward)
    rotation = np.stack([right, camera_up, -forward], axis=1)
    return CameraPose(rotation, position, intrinsics, timestamp)


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    '''Nearest rotation matrix in the Frobenius sense'''
    u, _, vt = np.linalg.svd(rotation)
    result = u @ vt
    if np.linalg.det(result) < 0:
        u[:, -1] *= -1
        result = u @ vt
    return result


def interpolate_pose(p0: CameraPose, p1: CameraPose, s: float) -> CameraPose:
    '''
    Slerp the rotations and lerp translation and timestamp; intrinsics come from p0.
    Rotations 180 degrees apart have two shortest arcs. The tie is broken in p0's frame:
    the relative rotation axis is flipped so that its largest component is positive,
    which makes the result independent of the axis scipy happens to report.
    '''
    if not 0.0 <= s <= 1.0:
        raise RangeError(f"Interpolation parameter {s} outside [0, 1]")
    if s == 0.0:
        return p0
    if s == 1.0:
        return replace(p1, intrinsics=p0.intrinsics)

    start = Rotation.from_matrix(p0.rotation)
    relative = (start.inv() * Rotation.from_matrix(p1.rotation)).as_rotvec()
    angle = np.linalg.norm(relative)
    if abs(angle - math.pi) < constants.ANTIPODAL_TOLERANCE:
        if relative[np.argmax(np.abs(relative))] < 0:
            relative = -relative
        rotation = (start * Rotation.from_rotvec(s * relative)).as_matrix()
    else:
        key_rotations = Rotation.from_matrix(np.stack([p0.rotation, p1.rotation]))
        rotation = Slerp([0.0, 1.0], key_rotations)([s]).as_matrix()[0]
    translation = (1.0 - s) * p0.translation + s * p1.translation
    timestamp = (1.0 - s) * p0.timestamp + s * p1.timestamp
    return CameraPose(rotation, translation, p0.intrinsics, min(max(timestamp, 0.0), 1.0))


def normalized_timestamps(count: int) -> List[float]:
    '''Uniform timestamps spanning [0, 1] for a sequence of count frames'''
    if count == 1:
        return [0.0]
    return [index / (count - 1) for index in range(count)]

"""
Novel camera poses and times for synthesis.

Static scenes get randomized orbit poses around a center; dynamic scenes get locations on the
recorded trajectory, each rendered at t, t - dt and t + dt where dt is one frame interval.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src import constants
from src.dataset import IntrinsicsRecord, pose_from_transform, transform_from_pose
from src.errors import ConfigurationError, DatasetError, RangeError
from src.logger import create_logger
from src.scene_model import CameraPose, Intrinsics, SceneBounds, Trajectory, interpolate_pose, look_at
from src.utils import Result, check_file_integrity, write_json

logger = create_logger()


class OrbitSpec(BaseModel):
    """Ranges for randomized orbit poses; angles are depression below the horizon in degrees"""
    center: Optional[List[float]] = None
    altitude_range: Tuple[float, float]
    radius_range: Tuple[float, float]
    view_angle_range: Optional[Tuple[float, float]] = None
    count: int = Field(default=1, ge=1)
    seed: int = 0
    altitude_step: Optional[float] = Field(default=None, gt=0.0)
    radius_step: Optional[float] = Field(default=None, gt=0.0)
    waypoint_density: int = Field(default=0, ge=0)
    intrinsics: Optional[IntrinsicsRecord] = None

    @field_validator('center')
    @classmethod
    def validate_center(cls, value):
        if value is not None and len(value) != 3:
            raise ValueError("center must be a 3-vector")
        return value

    @field_validator('altitude_range', 'radius_range', 'view_angle_range')
    @classmethod
    def validate_range(cls, value, info):
        if value is not None and value[0] > value[1]:
            raise ValueError(f"{info.field_name} must satisfy lo <= hi")
        return value

    @model_validator(mode="after")
    def validate_geometry(self):
        if self.radius_range[0] < 0:
            raise ValueError("radius must be non-negative")
        if self.view_angle_range is not None and not (
                0.0 < self.view_angle_range[0] and self.view_angle_range[1] <= 90.0):
            raise ValueError("view angles must lie in (0, 90] degrees")
        return self


@dataclass(frozen=True)
class NovelViewRequest:
    pose: CameraPose
    timestamp: float
    tag: str

    def __post_init__(self):
        if not 0.0 <= self.timestamp <= 1.0:
            raise RangeError(f"Request time {self.timestamp} outside [0, 1]")
        if self.tag not in constants.REQUEST_TAGS:
            raise RangeError(f"Unknown request tag '{self.tag}'")


def _draw(rng: np.random.Generator, value_range: Tuple[float, float], step: Optional[float], count: int) -> np.ndarray:
    '''Uniform draws from the range, or from its step grid when a step is given'''
    lo, hi = value_range
    if step is None:
        return rng.uniform(lo, hi, size=count)
    grid = lo + step * np.arange(int(math.floor((hi - lo) / step + 1e-9)) + 1)
    return rng.choice(grid, size=count)


def sample_static_poses(spec: OrbitSpec, intrinsics: Optional[Intrinsics] = None,
                        bounds: Optional[SceneBounds] = None) -> List[CameraPose]:
    '''
    Randomized orbit poses: azimuth uniform on [0, 360), altitude, radius and view angle uniform in their ranges.
    Without a view-angle range each camera looks straight at the center. The center defaults to the bounds
    centroid. With waypoint_density k, k interpolated poses are inserted between consecutive samples.
    '''
    if spec.intrinsics is not None:
        intrinsics = spec.intrinsics.to_intrinsics()
    if intrinsics is None:
        raise ConfigurationError("Orbit sampling needs camera intrinsics")
    if spec.center is not None:
        center = np.array(spec.center, dtype=np.float64)
    elif bounds is not None:
        center = bounds.center
    else:
        raise ConfigurationError("Orbit sampling needs a center or scene bounds")

    rng = np.random.default_rng(spec.seed)
    azimuths = np.radians(rng.uniform(0.0, 360.0, size=spec.count))
    altitudes = _draw(rng, spec.altitude_range, spec.altitude_step, spec.count)
    radii = _draw(rng, spec.radius_range, spec.radius_step, spec.count)
    angles = None
    if spec.view_angle_range is not None:
        angles = np.radians(rng.uniform(*spec.view_angle_range, size=spec.count))

    waypoints = []
    for index in range(spec.count):
        heading = np.array([math.cos(azimuths[index]), math.sin(azimuths[index]), 0.0])
        position = center + radii[index] * heading + np.array([0.0, 0.0, altitudes[index]])
        if angles is None:
            target = center
        else:
            # Horizontal toward the center, tilted down by the view angle
            depression = angles[index]
            target = position + np.array([-heading[0] * math.cos(depression),
                                          -heading[1] * math.cos(depression),
                                          -math.sin(depression)])
        waypoints.append(look_at(position, target, intrinsics))

    if spec.waypoint_density == 0:
        return waypoints
    poses = []
    for first, second in zip(waypoints[:-1], waypoints[1:]):
        poses.append(first)
        for step in range(1, spec.waypoint_density + 1):
            poses.append(interpolate_pose(first, second, step / (spec.waypoint_density + 1)))
    poses.append(waypoints[-1])
    return poses


def static_requests(poses: Sequence[CameraPose]) -> List[NovelViewRequest]:
    return [NovelViewRequest(pose, pose.timestamp, constants.REQUEST_TAG_STATIC) for pose in poses]


def sample_dynamic_requests(trajectory: Trajectory, count: int, seed: int = 0,
                            subdivisions: int = constants.TRAJECTORY_SUBDIVISIONS_DEFAULT) -> List[NovelViewRequest]:
    '''
    count locations on the trajectory, each requested at t, t - dt and t + dt (clamped to [0, 1]).
    Locations come from a grid of subdivisions points per recorded frame interval, drawn without
    replacement unless count exceeds the grid.
    '''
    if count < 1:
        raise RangeError("At least one trajectory location is required")
    if subdivisions < 1:
        raise RangeError("Trajectory subdivisions must be at least 1")
    grid = np.linspace(0.0, 1.0, (trajectory.frame_count - 1) * subdivisions + 1)
    rng = np.random.default_rng(seed)
    replace = count > len(grid)
    if replace:
        logger.warning("Requested %d trajectory locations but only %d are distinct; sampling with replacement",
                       count, len(grid))
    chosen = np.sort(rng.choice(len(grid), size=count, replace=replace))

    interval = trajectory.frame_interval
    requests = []
    for index in chosen:
        pose = trajectory.location(float(grid[index]))
        t = pose.timestamp
        requests.append(NovelViewRequest(pose, t, constants.REQUEST_TAG_DYN_T))
        requests.append(NovelViewRequest(pose, max(t - interval, 0.0), constants.REQUEST_TAG_DYN_T_MINUS))
        requests.append(NovelViewRequest(pose, min(t + interval, 1.0), constants.REQUEST_TAG_DYN_T_PLUS))
    return requests


class RequestRecord(BaseModel):
    transform: List[float]
    intrinsics: IntrinsicsRecord
    time: float = Field(ge=0.0, le=1.0)
    tag: str

    @field_validator('tag')
    @classmethod
    def validate_tag(cls, value):
        if value not in constants.REQUEST_TAGS:
            raise ValueError(f"unknown request tag '{value}'")
        return value


def save_requests(requests: Sequence[NovelViewRequest], file_location: str) -> None:
    records = [RequestRecord(transform=transform_from_pose(request.pose),
                             intrinsics=IntrinsicsRecord.from_intrinsics(request.pose.intrinsics),
                             time=request.timestamp, tag=request.tag).model_dump()
               for request in requests]
    write_json(file_location, {"requests": records})


def load_requests(file_location: str) -> List[NovelViewRequest]:
    result, json_data = check_file_integrity(file_location, ("requests",))
    if result != Result.VALID:
        raise DatasetError(f"Request list {file_location} is missing or unreadable ({result.name})")
    requests = []
    for index, entry in enumerate(json_data["requests"]):
        try:
            record = RequestRecord.model_validate(entry)
            pose = pose_from_transform(record.transform, record.intrinsics.to_intrinsics(), record.time)
        except (ValidationError, ValueError) as error:
            raise DatasetError(f"{file_location}: request {index}: {error}") from error
        requests.append(NovelViewRequest(pose, record.time, record.tag))
    return requests

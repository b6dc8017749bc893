"""
Posed image sequences on disk.

A scene directory holds `scene.json` and the PNG frames it references:

    { "name": ..., "bounds": {"min": [x, y, z], "max": [x, y, z]},
      "frames": [ { "image": "images/frame_000.png",
                    "transform": [16 numbers, row-major camera-to-world],
                    "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
                    "time": tau,
                    "boxes": [ {"class", "instance", "x_min", "y_min", "x_max", "y_max"} ],   (optional)
                    "mask": "masks/frame_000.png" } ] }                                         (optional)

Cameras look along -z of their own frame with x to the right and y up; image rows grow downward.
"""
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src import constants
from src.annotator import BBoxAnnotation, InstancePalette
from src.errors import DatasetError, PaletteError, PoseError
from src.logger import create_logger
from src.scene_model import CameraPose, Intrinsics, SceneBounds, Trajectory, orthonormalize
from src.utils import Result, check_file_integrity, load_png, save_png, to_uint8, write_json

logger = create_logger()


class IntrinsicsRecord(BaseModel):
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def to_intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @classmethod
    def from_intrinsics(cls, intrinsics: Intrinsics) -> "IntrinsicsRecord":
        return cls(fx=intrinsics.fx, fy=intrinsics.fy, cx=intrinsics.cx, cy=intrinsics.cy,
                   width=intrinsics.width, height=intrinsics.height)


class BoxRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    class_id: int = Field(alias="class")
    instance: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def to_annotation(self) -> BBoxAnnotation:
        return BBoxAnnotation(class_id=self.class_id, instance_id=self.instance, x_min=self.x_min,
                              y_min=self.y_min, x_max=self.x_max, y_max=self.y_max,
                              area=(self.x_max - self.x_min) * (self.y_max - self.y_min))

    @classmethod
    def from_annotation(cls, box: BBoxAnnotation) -> "BoxRecord":
        return cls(class_id=box.class_id, instance=box.instance_id, x_min=box.x_min,
                   y_min=box.y_min, x_max=box.x_max, y_max=box.y_max)


class FrameRecord(BaseModel):
    image: str
    transform: List[float]
    intrinsics: IntrinsicsRecord
    time: float
    boxes: Optional[List[BoxRecord]] = None
    mask: Optional[str] = None

    @field_validator('transform')
    @classmethod
    def validate_transform(cls, value):
        if len(value) != 16:
            raise ValueError("transform must hold 16 numbers")
        return value


class BoundsRecord(BaseModel):
    min: List[float]
    max: List[float]


class SceneManifest(BaseModel):
    name: str
    bounds: BoundsRecord
    frames: List[FrameRecord]
    classes: List[str] = Field(default_factory=list)


def transform_from_pose(pose: CameraPose) -> List[float]:
    return [float(value) for value in pose.matrix().reshape(-1)]


def pose_from_transform(transform: Sequence[float], intrinsics: Intrinsics, timestamp: float,
                        tolerance: float = constants.MANIFEST_ROTATION_TOLERANCE) -> CameraPose:
    '''Camera-to-world 4x4 (row-major) to a pose; rotations off by less than tolerance are re-orthonormalized'''
    matrix = np.asarray(transform, dtype=np.float64).reshape(4, 4)
    rotation = matrix[:3, :3].copy()
    drift = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    determinant = np.linalg.det(rotation)
    if drift > tolerance or abs(determinant - 1.0) > tolerance:
        raise PoseError(f"Rotation is not orthonormal (drift {drift:.3g}, det {determinant:.6f})")
    if drift > constants.ROTATION_TOLERANCE or abs(determinant - 1.0) > constants.ROTATION_TOLERANCE:
        rotation = orthonormalize(rotation)
    return CameraPose(rotation, matrix[:3, 3].copy(), intrinsics, timestamp)


def box_indicator(boxes: Sequence[BBoxAnnotation], width: int, height: int) -> np.ndarray:
    '''1 inside any box (filled rectangles), 0 elsewhere'''
    flags = np.zeros((height, width))
    for box in boxes:
        flags[box.y_min:box.y_max, box.x_min:box.x_max] = 1.0
    return flags


@dataclass
class SceneFrame:
    """One posed image; pixels live on disk under root or in memory"""
    image_name: str
    pose: CameraPose
    boxes: Optional[List[BBoxAnnotation]] = None
    mask_name: Optional[str] = None
    root: Optional[str] = None
    image: Optional[np.ndarray] = field(default=None, repr=False)
    dynamic_mask: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return os.path.basename(self.image_name)

    @property
    def timestamp(self) -> float:
        return self.pose.timestamp

    def load_image(self) -> np.ndarray:
        '''RGB floats in [0, 1], shape (height, width, 3)'''
        if self.image is not None:
            return self.image
        return load_png(os.path.join(self.root, self.image_name))

    def load_dynamic_mask(self) -> Optional[np.ndarray]:
        if self.dynamic_mask is not None:
            return self.dynamic_mask
        if self.mask_name is None:
            return None
        return load_png(os.path.join(self.root, self.mask_name))[:, :, 0]

    def dynamic_flags(self) -> np.ndarray:
        '''Mask supervision target: the interior of the ground-truth boxes'''
        intrinsics = self.pose.intrinsics
        return box_indicator(self.boxes or [], intrinsics.width, intrinsics.height)


@dataclass
class SceneDataset:
    name: str
    bounds: SceneBounds
    frames: List[SceneFrame]
    root: Optional[str] = None
    class_names: List[str] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def image_size(self) -> Tuple[int, int]:
        intrinsics = self.frames[0].pose.intrinsics
        return intrinsics.width, intrinsics.height

    @property
    def has_boxes(self) -> bool:
        return bool(self.frames) and all(frame.boxes is not None for frame in self.frames)

    def split(self) -> Tuple[List[SceneFrame], List[SceneFrame]]:
        '''Even frames train, odd frames are held out'''
        return self.frames[0::2], self.frames[1::2]

    def trajectory(self) -> Trajectory:
        return Trajectory(tuple(frame.pose for frame in self.frames))

    def instances(self) -> List[Tuple[int, int]]:
        '''Sorted (instance_id, class_id) pairs over all ground-truth boxes'''
        pairs = {(box.instance_id, box.class_id) for frame in self.frames for box in (frame.boxes or [])}
        return sorted(pairs)

    def with_poses(self, poses: Sequence[CameraPose]) -> "SceneDataset":
        frames = [replace(frame, pose=pose) for frame, pose in zip(self.frames, poses)]
        return SceneDataset(self.name, self.bounds, frames, self.root, list(self.class_names))


def _manifest_location(path: str) -> str:
    return os.path.join(path, constants.SCENE_MANIFEST_FILE)


def load_scene(path: str) -> SceneDataset:
    '''Read and validate a scene directory; every violation names the offending frame and file'''
    manifest_location = _manifest_location(path)
    result, json_data = check_file_integrity(manifest_location, ("name", "bounds", "frames"))
    if result == Result.ERROR_MISSING_FILE:
        raise DatasetError(f"Scene manifest not found: {manifest_location}")
    if result != Result.VALID:
        raise DatasetError(f"Scene manifest is unreadable: {manifest_location}")
    try:
        manifest = SceneManifest.model_validate(json_data)
    except ValidationError as error:
        raise DatasetError(f"{manifest_location}: {error}") from error

    try:
        bounds = SceneBounds(np.array(manifest.bounds.min, dtype=np.float64),
                             np.array(manifest.bounds.max, dtype=np.float64))
    except ValueError as error:
        raise DatasetError(f"{manifest_location}: bounds: {error}") from error

    frames = []
    size = None
    previous_time = -np.inf
    for index, record in enumerate(manifest.frames):
        where = f"{manifest_location}: frame {index} ({record.image})"
        image_location = os.path.join(path, record.image)
        if not os.path.isfile(image_location):
            raise DatasetError(f"{where}: missing image {image_location}")
        if record.mask is not None and not os.path.isfile(os.path.join(path, record.mask)):
            raise DatasetError(f"{where}: missing mask {os.path.join(path, record.mask)}")
        if not 0.0 <= record.time <= 1.0:
            raise DatasetError(f"{where}: time {record.time} outside [0, 1]")
        if record.time < previous_time:
            raise DatasetError(f"{where}: timestamps are not sorted")
        previous_time = record.time
        try:
            pose = pose_from_transform(record.transform, record.intrinsics.to_intrinsics(), record.time)
            boxes = None if record.boxes is None else [box.to_annotation() for box in record.boxes]
        except ValueError as error:
            raise DatasetError(f"{where}: {error}") from error

        with Image.open(image_location) as image:
            image_size = image.size
        if image_size != (pose.intrinsics.width, pose.intrinsics.height):
            raise DatasetError(f"{where}: image size {image_size} does not match intrinsics")
        if size is not None and image_size != size:
            raise DatasetError(f"{where}: image size {image_size} differs from {size}")
        size = image_size
        if boxes and not all(box.within(*image_size) and not box.degenerate for box in boxes):
            raise DatasetError(f"{where}: box is empty or outside the image")
        frames.append(SceneFrame(record.image, pose, boxes, record.mask, root=path))

    if not frames:
        raise DatasetError(f"{manifest_location}: scene has no frames")
    logger.info("Loaded scene %s with %d frames", manifest.name, len(frames))
    return SceneDataset(manifest.name, bounds, frames, root=path, class_names=list(manifest.classes))


def save_scene(dataset: SceneDataset, path: str) -> None:
    '''Write the frames (and dynamic masks when present) as PNG plus the scene manifest'''
    records = []
    for frame in dataset.frames:
        image_location = os.path.join(path, frame.image_name)
        os.makedirs(os.path.dirname(image_location), exist_ok=True)
        save_png(image_location, to_uint8(frame.load_image()))
        mask_name = frame.mask_name
        dynamic_mask = frame.load_dynamic_mask()
        if dynamic_mask is not None:
            if mask_name is None:
                mask_name = os.path.join(constants.MASKS_FOLDER, frame.name)
            mask_location = os.path.join(path, mask_name)
            os.makedirs(os.path.dirname(mask_location), exist_ok=True)
            save_png(mask_location, to_uint8(dynamic_mask))
        records.append(FrameRecord(
            image=frame.image_name,
            transform=transform_from_pose(frame.pose),
            intrinsics=IntrinsicsRecord.from_intrinsics(frame.pose.intrinsics),
            time=frame.timestamp,
            boxes=None if frame.boxes is None else [BoxRecord.from_annotation(box) for box in frame.boxes],
            mask=mask_name))
    manifest = SceneManifest(name=dataset.name,
                             bounds=BoundsRecord(min=dataset.bounds.minimum.tolist(),
                                                 max=dataset.bounds.maximum.tolist()),
                             frames=records, classes=list(dataset.class_names))
    write_json(_manifest_location(path), manifest.model_dump(by_alias=True, exclude_none=True))
    logger.info("Saved scene %s (%d frames) to %s", dataset.name, dataset.frame_count, path)


def paint_boxes(boxes: Sequence[BBoxAnnotation], palette: InstancePalette, width: int, height: int) -> np.ndarray:
    '''8-bit image, black except boxes filled with their instance color; later palette entries paint last'''
    image = np.zeros((height, width, 3), dtype=np.uint8)
    for box in boxes:
        palette.entry(box.instance_id)
    for entry in palette.entries:
        for box in boxes:
            if box.instance_id == entry.instance_id:
                image[box.y_min:box.y_max, box.x_min:box.x_max] = entry.color
    return image


def build_mask_images(dataset: SceneDataset, palette: InstancePalette) -> SceneDataset:
    '''Masked-image copy of a dataset: same poses, images replaced by palette-colored boxes'''
    frames = []
    for frame in dataset.frames:
        if frame.boxes is None:
            raise DatasetError(f"Frame {frame.image_name} has no ground-truth boxes")
        intrinsics = frame.pose.intrinsics
        try:
            painted = paint_boxes(frame.boxes, palette, intrinsics.width, intrinsics.height)
        except PaletteError as error:
            raise PaletteError(f"Frame {frame.image_name}: {error}") from error
        frames.append(SceneFrame(frame.image_name, frame.pose, list(frame.boxes),
                                 image=painted.astype(np.float64) / 255.0))
    return SceneDataset(f"{dataset.name}-masks", dataset.bounds, frames, class_names=list(dataset.class_names))

"""
Bounding-box extraction from rendered mask images.

A mask image is thresholded and quantized to an instance palette, split into 4-connected blobs,
and each blob large enough becomes one box. Boxes use inclusive-exclusive pixel coordinates.
"""
import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.ndimage import label

from src import constants
from src.errors import PaletteError, RangeError
from src.logger import create_logger

logger = create_logger()


class PaletteEntry(BaseModel):
    instance_id: int
    class_id: int = Field(ge=0)
    color: Tuple[int, int, int]


class InstancePalette(BaseModel):
    """Ordered instance colors; later entries paint over earlier ones when masks overlap"""
    entries: List[PaletteEntry] = Field(default_factory=list)
    class_names: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_entries(self):
        instance_ids = [entry.instance_id for entry in self.entries]
        if len(set(instance_ids)) != len(instance_ids):
            raise ValueError("palette instance ids must be unique")
        colors = np.array([entry.color for entry in self.entries], dtype=np.int64).reshape(-1, 3)
        if np.any((colors < 0) | (colors > 255)):
            raise ValueError("palette colors must be 8-bit")
        for first, second in itertools.combinations(range(len(colors)), 2):
            if np.max(np.abs(colors[first] - colors[second])) < constants.PALETTE_MIN_SEPARATION:
                raise ValueError(f"palette colors {tuple(colors[first])} and {tuple(colors[second])} are too close")
        if len(colors) and np.any(colors.max(axis=1) < constants.PALETTE_MIN_SEPARATION):
            raise ValueError("palette colors must be distinguishable from the black background")
        return self

    @classmethod
    def generate(cls, instances: Sequence[Tuple[int, int]], class_names: Sequence[str] = ()) -> "InstancePalette":
        '''Assign colors to (instance_id, class_id) pairs, fully saturated combinations first'''
        candidates = candidate_colors()
        if len(instances) > len(candidates):
            raise PaletteError(f"Cannot color {len(instances)} instances with {len(candidates)} separable colors")
        entries = [PaletteEntry(instance_id=instance_id, class_id=class_id, color=color)
                   for (instance_id, class_id), color in zip(instances, candidates)]
        return cls(entries=entries, class_names=list(class_names))

    def __len__(self):
        return len(self.entries)

    def entry(self, instance_id: int) -> PaletteEntry:
        for entry in self.entries:
            if entry.instance_id == instance_id:
                return entry
        raise PaletteError(f"Instance {instance_id} is not in the palette")

    def color_of(self, instance_id: int) -> Tuple[int, int, int]:
        return self.entry(instance_id).color

    def class_of(self, instance_id: int) -> int:
        return self.entry(instance_id).class_id

    def colors(self) -> np.ndarray:
        return np.array([entry.color for entry in self.entries], dtype=np.float64).reshape(-1, 3)


def candidate_colors() -> List[Tuple[int, int, int]]:
    '''Level combinations with at least one full channel, ordered {0,255}, then {0,128,255}, then the rest'''
    levels = constants.PALETTE_LEVELS
    tiers = [set([0, 255]), set([0, 128, 255]), set(levels)]
    ordered = []
    for tier in tiers:
        for color in itertools.product(sorted(tier), repeat=3):
            if 255 in color and color not in ordered and set(color) <= tier:
                ordered.append(color)
    return ordered


class BBoxAnnotation(BaseModel):
    """Axis-aligned pixel box, inclusive-exclusive"""
    class_id: int = Field(ge=0)
    instance_id: int
    x_min: int = Field(ge=0)
    y_min: int = Field(ge=0)
    x_max: int
    y_max: int
    area: int = Field(default=0, ge=0)

    @property
    def degenerate(self) -> bool:
        return self.x_min >= self.x_max or self.y_min >= self.y_max

    @property
    def box(self) -> Tuple[int, int, int, int]:
        return self.x_min, self.y_min, self.x_max, self.y_max

    def within(self, width: int, height: int) -> bool:
        return self.x_max <= width and self.y_max <= height


@dataclass
class Blob:
    instance_id: int
    pixels: np.ndarray

    @property
    def area(self) -> int:
        return int(self.pixels.shape[0])


def _as_unit_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def quantize_mask(image: np.ndarray, palette: InstancePalette,
                  threshold: float = constants.MASK_THRESHOLD_DEFAULT,
                  tolerance: float = constants.COLOR_TOLERANCE_DEFAULT) -> np.ndarray:
    '''Instance id per pixel (BACKGROUND_LABEL for dark or off-palette pixels)'''
    if len(palette) == 0:
        raise PaletteError("Cannot quantize against an empty palette")
    if not 0.0 < threshold < 1.0:
        raise RangeError(f"Mask threshold {threshold} outside (0, 1)")
    unit = _as_unit_image(image)
    scaled = unit * 255.0
    distances = np.max(np.abs(scaled[:, :, None, :] - palette.colors()[None, None, :, :]), axis=-1)
    nearest = np.argmin(distances, axis=-1)
    nearest_distance = np.take_along_axis(distances, nearest[..., None], axis=-1)[..., 0]
    instance_ids = np.array([entry.instance_id for entry in palette.entries])
    keep = (unit.max(axis=-1) >= threshold) & (nearest_distance <= tolerance)
    return np.where(keep, instance_ids[nearest], constants.BACKGROUND_LABEL)


def connected_components(labels: np.ndarray) -> List[Blob]:
    '''4-connected blobs per label value, ordered by their first pixel in raster order'''
    labels = np.asarray(labels)
    blobs = []
    for value in np.unique(labels):
        if value == constants.BACKGROUND_LABEL:
            continue
        components, count = label(labels == value)
        for component in range(1, count + 1):
            # argwhere walks in raster order, so the first row is the top-most, left-most pixel
            blobs.append(Blob(int(value), np.argwhere(components == component)))
    blobs.sort(key=lambda blob: (int(blob.pixels[0, 0]), int(blob.pixels[0, 1])))
    return blobs


def blobs_to_boxes(blobs: Sequence[Blob], min_area: int = constants.MIN_AREA_DEFAULT,
                   palette: Optional[InstancePalette] = None, class_id: int = 0) -> List[BBoxAnnotation]:
    '''Tight boxes around blobs of at least min_area pixels; classes come from the palette when given'''
    if min_area < 1:
        raise RangeError("min_area must be at least 1")
    boxes = []
    for blob in blobs:
        if blob.area < min_area:
            continue
        rows = blob.pixels[:, 0]
        cols = blob.pixels[:, 1]
        boxes.append(BBoxAnnotation(
            class_id=palette.class_of(blob.instance_id) if palette is not None else class_id,
            instance_id=blob.instance_id,
            x_min=int(cols.min()), y_min=int(rows.min()),
            x_max=int(cols.max()) + 1, y_max=int(rows.max()) + 1,
            area=blob.area))
    return boxes


def annotate_instance_mask(image: np.ndarray, palette: InstancePalette,
                           threshold: float = constants.MASK_THRESHOLD_DEFAULT,
                           tolerance: float = constants.COLOR_TOLERANCE_DEFAULT,
                           min_area: int = constants.MIN_AREA_DEFAULT) -> List[BBoxAnnotation]:
    '''Boxes for each palette instance visible in a rendered instance-colored mask image'''
    labels = quantize_mask(image, palette, threshold, tolerance)
    return blobs_to_boxes(connected_components(labels), min_area, palette)


def annotate_scalar_mask(mask: np.ndarray, threshold: float = constants.MASK_THRESHOLD_DEFAULT,
                         class_id: int = 0, min_area: int = constants.MIN_AREA_DEFAULT) -> List[BBoxAnnotation]:
    '''Class-only boxes from a single-channel dynamic mask; instance ids number the blobs'''
    if not 0.0 < threshold < 1.0:
        raise RangeError(f"Mask threshold {threshold} outside (0, 1)")
    labels = np.where(np.asarray(mask, dtype=np.float64) >= threshold, 0, constants.BACKGROUND_LABEL)
    blobs = connected_components(labels)
    numbered = [Blob(index, blob.pixels) for index, blob in enumerate(blobs)]
    return blobs_to_boxes(numbered, min_area, class_id=class_id)

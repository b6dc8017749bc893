"""
Detector training sets on disk.

An export directory holds `images/`, one `labels/<stem>.txt` per image with lines
`class cx cy w h` normalized to the image size, `manifest.json` mapping each image file to its
source tag (real or synthetic) and `classes.json` with the class names.
"""
import os
import shutil
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from src import constants
from src.annotator import BBoxAnnotation
from src.errors import DatasetError
from src.logger import create_logger
from src.utils import Result, check_file_integrity, save_png, to_uint8, write_json

logger = create_logger()


class DetectionRecord(BaseModel):
    """One normalized center-format box"""
    class_id: int = Field(ge=0)
    cx: float = Field(ge=0.0, le=1.0)
    cy: float = Field(ge=0.0, le=1.0)
    w: float = Field(gt=0.0, le=1.0)
    h: float = Field(gt=0.0, le=1.0)

    @classmethod
    def from_box(cls, box: BBoxAnnotation, width: int, height: int) -> "DetectionRecord":
        return cls(class_id=box.class_id,
                   cx=(box.x_min + box.x_max) / (2.0 * width),
                   cy=(box.y_min + box.y_max) / (2.0 * height),
                   w=(box.x_max - box.x_min) / width,
                   h=(box.y_max - box.y_min) / height)

    @classmethod
    def from_line(cls, line: str) -> "DetectionRecord":
        class_id, cx, cy, w, h = line.split()
        return cls(class_id=int(class_id), cx=float(cx), cy=float(cy), w=float(w), h=float(h))

    def line(self) -> str:
        decimals = constants.DETECTION_DECIMALS
        return f"{self.class_id} {self.cx:.{decimals}f} {self.cy:.{decimals}f} {self.w:.{decimals}f} {self.h:.{decimals}f}"

    def to_pixels(self, width: int, height: int) -> Tuple[float, float, float, float]:
        '''(x_min, y_min, x_max, y_max) in pixels'''
        return ((self.cx - self.w / 2.0) * width, (self.cy - self.h / 2.0) * height,
                (self.cx + self.w / 2.0) * width, (self.cy + self.h / 2.0) * height)


@dataclass
class AnnotatedImage:
    """An image to export with its boxes and source tag"""
    name: str
    image: np.ndarray
    boxes: Sequence[BBoxAnnotation]
    source: str


def _stem(name: str) -> str:
    return os.path.splitext(name)[0]


@dataclass
class DetectionEntry:
    file_name: str
    source: str
    records: List[DetectionRecord] = field(default_factory=list)
    image_path: Optional[str] = None

    @property
    def label_name(self) -> str:
        return _stem(self.file_name) + ".txt"


@dataclass
class DetectionExport:
    root: str
    classes: List[str]
    entries: List[DetectionEntry]

    def __len__(self):
        return len(self.entries)

    def count(self, source: str) -> int:
        return sum(1 for entry in self.entries if entry.source == source)

    def sources(self) -> Dict[str, str]:
        return {entry.file_name: entry.source for entry in self.entries}


def _check_source(source: str) -> None:
    if source not in constants.SOURCE_TAGS:
        raise DatasetError(f"Unknown source tag '{source}'")


def _write_entry(out_path: str, entry: DetectionEntry) -> None:
    label_location = os.path.join(out_path, constants.DETECTION_LABELS_FOLDER, entry.label_name)
    with open(label_location, 'w', encoding="utf-8") as label_file:
        label_file.write("".join(record.line() + "\n" for record in entry.records))


def _write_index(out_path: str, classes: Sequence[str], entries: Sequence[DetectionEntry]) -> None:
    write_json(os.path.join(out_path, constants.DETECTION_MANIFEST_FILE),
               {"images": {entry.file_name: entry.source for entry in entries}})
    write_json(os.path.join(out_path, constants.DETECTION_CLASSES_FILE), {"classes": list(classes)})


def _prepare(out_path: str) -> None:
    os.makedirs(os.path.join(out_path, constants.DETECTION_IMAGES_FOLDER), exist_ok=True)
    os.makedirs(os.path.join(out_path, constants.DETECTION_LABELS_FOLDER), exist_ok=True)


def export_detection(images: Sequence[AnnotatedImage], out_path: str,
                     class_names: Sequence[str] = ()) -> DetectionExport:
    '''Write images and normalized labels; an image without boxes still gets an (empty) label file'''
    _prepare(out_path)
    entries = []
    stems = set()
    for item in images:
        _check_source(item.source)
        if _stem(item.name) in stems:
            raise DatasetError(f"Duplicate image name '{item.name}' in detection export")
        stems.add(_stem(item.name))
        height, width = item.image.shape[:2]
        records = []
        for box in item.boxes:
            if box.degenerate:
                logger.warning("Skipping zero-area box %s in %s", box.box, item.name)
                continue
            if not box.within(width, height):
                raise DatasetError(f"Box {box.box} lies outside {item.name} ({width}x{height})")
            records.append(DetectionRecord.from_box(box, width, height))

        image_location = os.path.join(out_path, constants.DETECTION_IMAGES_FOLDER, item.name)
        image = item.image if item.image.dtype == np.uint8 else to_uint8(item.image)
        save_png(image_location, image)
        entry = DetectionEntry(item.name, item.source, records, image_location)
        _write_entry(out_path, entry)
        entries.append(entry)

    _write_index(out_path, class_names, entries)
    logger.info("Exported %d images (%d boxes) to %s", len(entries),
                sum(len(entry.records) for entry in entries), out_path)
    return DetectionExport(out_path, list(class_names), entries)


def load_detection_export(path: str) -> DetectionExport:
    manifest_location = os.path.join(path, constants.DETECTION_MANIFEST_FILE)
    result, manifest = check_file_integrity(manifest_location, ("images",))
    if result != Result.VALID:
        raise DatasetError(f"Detection manifest {manifest_location} is missing or unreadable ({result.name})")
    classes_location = os.path.join(path, constants.DETECTION_CLASSES_FILE)
    result, classes = check_file_integrity(classes_location, ("classes",))
    if result != Result.VALID:
        raise DatasetError(f"Class list {classes_location} is missing or unreadable ({result.name})")

    entries = []
    for file_name, source in manifest["images"].items():
        _check_source(source)
        entry = DetectionEntry(file_name, source,
                               image_path=os.path.join(path, constants.DETECTION_IMAGES_FOLDER, file_name))
        if not os.path.isfile(entry.image_path):
            raise DatasetError(f"Detection export {path}: missing image {entry.image_path}")
        label_location = os.path.join(path, constants.DETECTION_LABELS_FOLDER, entry.label_name)
        try:
            with open(label_location, 'r', encoding="utf-8") as label_file:
                entry.records = [DetectionRecord.from_line(line) for line in label_file if line.strip()]
        except FileNotFoundError as error:
            raise DatasetError(f"Detection export {path}: missing labels {label_location}") from error
        except (ValidationError, ValueError) as error:
            raise DatasetError(f"{label_location}: {error}") from error
        entries.append(entry)
    return DetectionExport(path, list(classes["classes"]), entries)


def _free_name(name: str, source: str, taken_stems: set) -> str:
    '''Labels are named after the image stem, so a name is free only if its stem is unused'''
    if _stem(name) not in taken_stems:
        return name
    candidate = f"{source}_{name}"
    counter = 1
    while _stem(candidate) in taken_stems:
        candidate = f"{source}_{counter}_{name}"
        counter += 1
    return candidate


def assemble_hybrid(real: DetectionExport, synthetic: DetectionExport, out_path: str) -> DetectionExport:
    '''Union of two exports; colliding file names are renamed, never overwritten'''
    if real.classes and synthetic.classes and real.classes != synthetic.classes:
        raise DatasetError(f"Class lists differ: {real.classes} vs {synthetic.classes}")
    classes = real.classes or synthetic.classes

    _prepare(out_path)
    taken_stems = set()
    entries = []
    for entry in list(real.entries) + list(synthetic.entries):
        file_name = _free_name(entry.file_name, entry.source, taken_stems)
        if file_name != entry.file_name:
            logger.info("Renamed %s (%s) to %s", entry.file_name, entry.source, file_name)
        taken_stems.add(_stem(file_name))
        image_location = os.path.join(out_path, constants.DETECTION_IMAGES_FOLDER, file_name)
        shutil.copyfile(entry.image_path, image_location)
        merged = DetectionEntry(file_name, entry.source, list(entry.records), image_location)
        _write_entry(out_path, merged)
        entries.append(merged)

    _write_index(out_path, classes, entries)
    logger.info("Merged %d real and %d synthetic images into %s", len(real), len(synthetic), out_path)
    return DetectionExport(out_path, list(classes), entries)

import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from enum import Enum
from typing import Iterable, Iterator, Optional, Tuple

import numpy as np
from PIL import Image

from src.logger import create_logger

logger = create_logger()


class Result(Enum):
    '''Enumeration class for file integrity results'''
    VALID = 0
    ERROR_MISSING_FILE = 1
    ERROR_UNREADABLE_FILE = 2
    ERROR_VERSION_MISMATCH = 3


def check_file_integrity(filename: str, required_fields: Iterable[str] = (),
                         version: Optional[int] = None) -> Tuple[Result, dict]:
    '''Extracts data from a JSON file to determine if it's formatted correctly'''
    json_data = {}

    try:
        with open(filename, 'r', encoding="utf-8", errors="replace") as json_file:
            json_data = json_file.read()
    except (FileNotFoundError, IsADirectoryError):
        return Result.ERROR_MISSING_FILE, {}

    try:
        json_data = json.loads(json_data)
    except json.JSONDecodeError:
        return Result.ERROR_UNREADABLE_FILE, {}

    if not isinstance(json_data, dict):
        return Result.ERROR_UNREADABLE_FILE, {}

    if any(field not in json_data for field in required_fields):
        return Result.ERROR_UNREADABLE_FILE, json_data

    if version is not None and json_data.get("version") != version:
        return Result.ERROR_VERSION_MISMATCH, json_data

    return Result.VALID, json_data


def write_json(file_location: str, data, indent: Optional[int] = 4) -> None:
    '''Write a JSON document atomically (temporary file in the same folder, then rename)'''
    folder = os.path.dirname(os.path.abspath(file_location))
    os.makedirs(folder, exist_ok=True)
    handle, temp_location = tempfile.mkstemp(dir=folder, suffix=".tmp")
    try:
        with os.fdopen(handle, 'w', encoding="utf-8") as json_file:
            json.dump(data, json_file, ensure_ascii=False, indent=indent)
        os.replace(temp_location, file_location)
    except BaseException:
        if os.path.exists(temp_location):
            os.remove(temp_location)
        raise


@contextmanager
def staged_output(out_path: str) -> Iterator[str]:
    '''
    Yield a temporary sibling directory for a command's outputs.
    The directory replaces out_path only when the block finishes without an exception; otherwise it is removed.
    '''
    out_path = os.path.abspath(out_path)
    parent = os.path.dirname(out_path)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(dir=parent, prefix=f".{os.path.basename(out_path)}.staging-")
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if os.path.isdir(out_path):
        shutil.rmtree(out_path)
    elif os.path.exists(out_path):
        os.remove(out_path)
    os.replace(staging, out_path)
    logger.info("Wrote %s", out_path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    '''[0,1] floats to 8-bit with rounding'''
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(file_location: str, image: np.ndarray) -> None:
    '''Write an 8-bit RGB/grayscale or 16-bit grayscale array as PNG'''
    Image.fromarray(np.ascontiguousarray(image)).save(file_location)


def load_png(file_location: str) -> np.ndarray:
    '''Read an image as float RGB in [0,1]'''
    with Image.open(file_location) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0

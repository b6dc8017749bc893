"""
Versioned binary checkpoints of a training state.

Layout (little-endian):

    b"KPLN" | version: uint32 | header length: uint32 | header: UTF-8 JSON | payload

The header holds the field metadata (mode, plane and decoder sizes, step, seed, bounds, background),
free-form user metadata, and a section table. Each section entry names one array with its group
(planes, decoder, first_moments, second_moments), dtype, shape, byte offset into the payload and
byte size. The header also records the payload size and its CRC-32, so truncated or damaged files
are rejected before any state is built.
"""
import json
import os
import struct
import tempfile
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

from src import constants
from src.errors import CheckpointError
from src.field_decoder import DecoderParams
from src.logger import create_logger
from src.plane_field import PlaneGrid, PlaneStack, plane_layout
from src.scene_model import SceneBounds
from src.trainer import TrainState

logger = create_logger()

PREFIX = struct.Struct("<4sII")
SECTION_PLANES = "planes"
SECTION_DECODER = "decoder"
SECTION_FIRST_MOMENTS = "first_moments"
SECTION_SECOND_MOMENTS = "second_moments"


def _field_metadata(state: TrainState) -> dict:
    stack = state.stack
    decoder = state.decoder
    return {
        "mode": stack.mode,
        "feature_dim": stack.feature_dim,
        "base_resolution": list(stack.base_resolution),
        "scale_multipliers": list(stack.scale_multipliers),
        "hidden_width": decoder.hidden_width,
        "activation": decoder.activation,
        "step": state.step,
        "seed": state.seed,
        "bounds": {"min": state.bounds.minimum.tolist(), "max": state.bounds.maximum.tolist()},
        "background": list(state.background),
    }


def encode_checkpoint(state: TrainState, precision: str = constants.CHECKPOINT_PRECISION_DEFAULT,
                      metadata: Optional[dict] = None) -> bytes:
    if precision not in constants.CHECKPOINT_PRECISIONS:
        raise CheckpointError(f"Unknown checkpoint precision '{precision}'")
    dtype = np.dtype(constants.CHECKPOINT_PRECISIONS[precision])
    groups = [(SECTION_PLANES, state.stack.parameters()),
              (SECTION_DECODER, state.decoder.parameters()),
              (SECTION_FIRST_MOMENTS, state.first_moments),
              (SECTION_SECOND_MOMENTS, state.second_moments)]

    sections = []
    chunks = []
    offset = 0
    for group, arrays in groups:
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype=dtype).tobytes()
            sections.append({"group": group, "name": name, "dtype": dtype.str,
                             "shape": list(arrays[name].shape), "offset": offset, "size": len(data)})
            chunks.append(data)
            offset += len(data)
    payload = b"".join(chunks)

    header = {"field": _field_metadata(state), "metadata": metadata or {}, "precision": precision,
              "sections": sections, "payload_size": len(payload), "crc32": zlib.crc32(payload)}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREFIX.pack(constants.CHECKPOINT_MAGIC, constants.CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + payload


def save_checkpoint(state: TrainState, file_location: str,
                    precision: str = constants.CHECKPOINT_PRECISION_DEFAULT,
                    metadata: Optional[dict] = None) -> None:
    '''Write the checkpoint to a temporary file beside file_location and rename it into place'''
    blob = encode_checkpoint(state, precision, metadata)
    folder = os.path.dirname(os.path.abspath(file_location))
    os.makedirs(folder, exist_ok=True)
    handle, temp_location = tempfile.mkstemp(dir=folder, suffix=".tmp")
    try:
        with os.fdopen(handle, 'wb') as checkpoint_file:
            checkpoint_file.write(blob)
        os.replace(temp_location, file_location)
    except BaseException:
        if os.path.exists(temp_location):
            os.remove(temp_location)
        raise
    logger.info("Saved checkpoint at step %d to %s", state.step, file_location)


def decode_checkpoint(blob: bytes) -> Tuple[TrainState, dict]:
    if len(blob) < PREFIX.size:
        raise CheckpointError("Checkpoint is truncated (no header)")
    magic, version, header_length = PREFIX.unpack_from(blob)
    if magic != constants.CHECKPOINT_MAGIC:
        raise CheckpointError("Not a checkpoint file")
    if version != constants.CHECKPOINT_VERSION:
        raise CheckpointError(f"Checkpoint version {version} is not supported (expected {constants.CHECKPOINT_VERSION})")
    start = PREFIX.size + header_length
    if len(blob) < start:
        raise CheckpointError("Checkpoint is truncated (partial header)")
    try:
        header = json.loads(blob[PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"Checkpoint header is unreadable: {error}") from error

    payload = blob[start:]
    try:
        payload_size, crc32 = header["payload_size"], header["crc32"]
    except (KeyError, TypeError) as error:
        raise CheckpointError(f"Checkpoint header is missing {error}") from error
    if len(payload) != payload_size:
        raise CheckpointError(f"Checkpoint payload has {len(payload)} bytes, expected {payload_size}")
    if zlib.crc32(payload) != crc32:
        raise CheckpointError("Checkpoint payload checksum mismatch")

    arrays: Dict[str, Dict[str, np.ndarray]] = {SECTION_PLANES: {}, SECTION_DECODER: {},
                                                 SECTION_FIRST_MOMENTS: {}, SECTION_SECOND_MOMENTS: {}}
    try:
        for section in header["sections"]:
            raw = payload[section["offset"]:section["offset"] + section["size"]]
            values = np.frombuffer(raw, dtype=np.dtype(section["dtype"])).astype(np.float64)
            arrays[section["group"]][section["name"]] = values.reshape(section["shape"])

        info = header["field"]
        stack = _build_stack(info, arrays[SECTION_PLANES])
        decoder = DecoderParams(info["mode"], info["feature_dim"], len(info["scale_multipliers"]),
                                info["hidden_width"], arrays[SECTION_DECODER], info["activation"])
        bounds = SceneBounds(np.array(info["bounds"]["min"]), np.array(info["bounds"]["max"]))
        state = TrainState(stack, decoder, bounds, arrays[SECTION_FIRST_MOMENTS], arrays[SECTION_SECOND_MOMENTS],
                           info["step"], info["seed"], tuple(info["background"]))
        metadata = header["metadata"]
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"Checkpoint contents are inconsistent: {error}") from error
    return state, metadata


def _build_stack(info: dict, planes: Dict[str, np.ndarray]) -> PlaneStack:
    scales = []
    for scale in range(len(info["scale_multipliers"])):
        scales.append({(group, pair): PlaneGrid(pair, planes[PlaneStack.parameter_name(scale, group, pair)], group)
                       for group, pair in plane_layout(info["mode"])})
    return PlaneStack(info["mode"], info["feature_dim"], tuple(info["base_resolution"]),
                      tuple(info["scale_multipliers"]), scales)


def read_checkpoint(file_location: str) -> Tuple[TrainState, dict]:
    '''Training state and the user metadata stored with it'''
    try:
        with open(file_location, 'rb') as checkpoint_file:
            blob = checkpoint_file.read()
    except OSError as error:
        raise CheckpointError(f"Cannot read checkpoint {file_location}: {error}") from error
    return decode_checkpoint(blob)


def load_checkpoint(file_location: str) -> TrainState:
    return read_checkpoint(file_location)[0]

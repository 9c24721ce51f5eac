"""
Checkpoint files.

Layout (little-endian integers)::

    b"DFXT" | u32 version | u32 header_length | JSON header | f32 payload

The payload holds every parameter in declaration order, followed by
``optimizer_slots`` blocks of optimizer moments in the same order.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import ValidationError

from deep_fext.models.checkpoint import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointHeader, ParameterEntry
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.training import TrainState
from deep_fext.services.model_service import DeepFextModel, build_model
from deep_fext.utils.workers import atomic_write_bytes

logger = logging.getLogger(__name__)

_PREAMBLE = struct.Struct("<4sII")
_FLOAT = np.dtype("<f4")


def _header_for(model: DeepFextModel, state: TrainState) -> CheckpointHeader:
    named = model.named_parameters()
    return CheckpointHeader(
        network=model.network.spec,
        head=model.head.spec,
        task=model.task,
        feature_count=model.network.feature_count,
        normalization=model.normalization,
        train_state=state,
        parameters=[ParameterEntry(name=name, shape=list(tensor.shape)) for name, tensor in named],
        parameter_count=model.parameter_count(),
        optimizer_slots=state.optimizer.slots if state.moments else 0
    )


def encode_checkpoint(model: DeepFextModel, state: TrainState) -> bytes:
    """Serialize a model and its training state."""
    header = _header_for(model, state)
    header_bytes = header.model_dump_json().encode("utf-8")
    blocks = [tensor.data.astype(_FLOAT).tobytes() for _, tensor in model.named_parameters()]
    for slot in range(header.optimizer_slots):
        for name, tensor in model.named_parameters():
            moments = state.moments.get(name)
            if moments is None or len(moments) <= slot:
                raise FextError(f"optimizer moment {slot} missing for '{name}'", ErrorTypes.STATE)
            blocks.append(np.asarray(moments[slot]).astype(_FLOAT).reshape(tensor.shape).tobytes())
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(blocks)


def save_checkpoint(model: DeepFextModel, state: TrainState, path: Path) -> Path:
    """Write a checkpoint atomically."""
    path = Path(path)
    atomic_write_bytes(path, encode_checkpoint(model, state))
    logger.info("checkpoint saved: %s (step %d)", path, state.step)
    return path


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Tuple[DeepFextModel, TrainState]:
    """
    Rebuild a model and training state from checkpoint bytes.

    Nothing is constructed until the preamble, header and payload length
    have all been validated.

    Raises:
        FextError: integrity (bad magic, truncation, shape disagreement) or unsupported (version).
    """
    if len(data) < _PREAMBLE.size:
        raise FextError(
            f"{source}: file is {len(data)} bytes, shorter than the {_PREAMBLE.size}-byte preamble",
            ErrorTypes.INTEGRITY
        )
    magic, version, header_length = _PREAMBLE.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FextError(f"{source}: bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}",
                        ErrorTypes.INTEGRITY)
    if version != CHECKPOINT_VERSION:
        raise FextError(
            f"{source}: checkpoint version {version} is not supported (this build reads {CHECKPOINT_VERSION})",
            ErrorTypes.UNSUPPORTED
        )
    payload_offset = _PREAMBLE.size + header_length
    if payload_offset > len(data):
        raise FextError(
            f"{source}: header claims bytes {_PREAMBLE.size}..{payload_offset} but the file ends at {len(data)}",
            ErrorTypes.INTEGRITY
        )
    try:
        header = CheckpointHeader.model_validate_json(data[_PREAMBLE.size:payload_offset])
    except ValidationError as err:
        raise FextError(f"{source}: unreadable header at offset {_PREAMBLE.size}: {err}",
                        ErrorTypes.INTEGRITY) from err

    declared = sum(int(np.prod(entry.shape)) for entry in header.parameters)
    if declared != header.parameter_count:
        raise FextError(
            f"{source}: header lists {declared} parameter values but declares parameter_count={header.parameter_count}",
            ErrorTypes.INTEGRITY
        )
    expected = _FLOAT.itemsize * header.parameter_count * (1 + header.optimizer_slots)
    actual = len(data) - payload_offset
    if actual != expected:
        raise FextError(
            f"{source}: payload at offset {payload_offset} is {actual} bytes, expected {expected} "
            f"(file should end at {payload_offset + expected}, ends at {len(data)})",
            ErrorTypes.INTEGRITY
        )

    model = build_model(header.network, header.head, header.task, normalization=header.normalization)
    if model.network.feature_count != header.feature_count:
        raise FextError(
            f"{source}: network emits {model.network.feature_count} features, header declares {header.feature_count}",
            ErrorTypes.INTEGRITY
        )
    named = model.named_parameters()
    listed = [(entry.name, tuple(entry.shape)) for entry in header.parameters]
    built = [(name, tensor.shape) for name, tensor in named]
    if listed != built:
        raise FextError(f"{source}: parameter table does not match the declared architecture",
                        ErrorTypes.INTEGRITY)

    values = np.frombuffer(data, dtype=_FLOAT, offset=payload_offset)
    cursor = 0
    loaded: List[np.ndarray] = []
    for _, tensor in named:
        loaded.append(values[cursor:cursor + tensor.size].reshape(tensor.shape).astype(np.float32))
        cursor += tensor.size
    moments: Dict[str, List[np.ndarray]] = {name: [] for name, _ in named}
    for _ in range(header.optimizer_slots):
        for name, tensor in named:
            moments[name].append(values[cursor:cursor + tensor.size].reshape(tensor.shape).astype(np.float32))
            cursor += tensor.size

    for (_, tensor), array in zip(named, loaded):
        tensor.data = np.ascontiguousarray(array)
    state = header.train_state.model_copy()
    state.moments = moments if header.optimizer_slots else {}
    return model, state


def load_checkpoint(path: Path) -> Tuple[DeepFextModel, TrainState]:
    """Read and validate a checkpoint file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as err:
        raise FextError(f"checkpoint not found: {path}", ErrorTypes.DATA) from err
    model, state = decode_checkpoint(data, str(path))
    logger.info("checkpoint loaded: %s (step %d, %d parameters)", path, state.step, model.parameter_count())
    return model, state

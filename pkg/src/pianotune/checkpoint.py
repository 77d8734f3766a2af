"""Portable model checkpoints.

Layout (little-endian)::

    magic   b"PTCK"
    u32     format version
    u32     header length H
    H bytes UTF-8 JSON header
    tensor data, float32, in header order

The header holds ``model_config``, ``vocab_fingerprint``, free-form
``metadata`` and a ``tensors`` list of ``{name, shape, offset, numel}`` where
``offset`` is in bytes from the start of the tensor data.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from pianotune.config import ModelConfig
from pianotune.errors import CheckpointError
from pianotune.transformer import CausalTransformer
from pianotune.utils.common import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"PTCK"
FORMAT_VERSION = 1


@dataclass
class CheckpointHeader:
    model_config: ModelConfig
    vocab_fingerprint: str
    metadata: Dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(
    model: CausalTransformer, vocab_fingerprint: str, metadata: Dict[str, Any] | None = None
) -> bytes:
    tensors: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        if not np.all(np.isfinite(array)):
            raise CheckpointError(f"Refusing to save non-finite tensor {name}")
        blob = array.astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(array.shape), "offset": offset, "numel": int(array.size)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "model_config": model.config.model_dump(mode="json"),
        "vocab_fingerprint": vocab_fingerprint,
        "metadata": metadata or {},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes, *blobs])


def save_checkpoint(
    path: Path,
    model: CausalTransformer,
    vocab_fingerprint: str,
    metadata: Dict[str, Any] | None = None,
) -> None:
    """Write a checkpoint atomically (temp file, then rename)."""
    atomic_write_bytes(Path(path), encode_checkpoint(model, vocab_fingerprint, metadata))
    logger.info("Saved checkpoint %s", path)


def decode_checkpoint(data: bytes) -> Tuple[CausalTransformer, CheckpointHeader]:
    if data[:4] != MAGIC:
        raise CheckpointError("Not a pianotune checkpoint (bad magic)")
    try:
        version, header_len = struct.unpack_from("<II", data, 4)
    except struct.error as e:
        raise CheckpointError(f"Truncated checkpoint header: {e}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
        config = ModelConfig.model_validate(header["model_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValidationError) as e:
        raise CheckpointError(f"Corrupt checkpoint header: {e}")

    body = memoryview(data)[12 + header_len :]
    model = CausalTransformer(config)
    expected = model.state_dict()
    state: Dict[str, torch.Tensor] = {}
    for entry in header.get("tensors", []):
        name = entry["name"]
        start, numel = entry["offset"], entry["numel"]
        if start + 4 * numel > len(body):
            raise CheckpointError(f"Tensor {name} extends past the end of the checkpoint")
        array = np.frombuffer(body, dtype="<f4", count=numel, offset=start).reshape(entry["shape"])
        state[name] = torch.from_numpy(array.astype(np.float32))

    missing = set(expected) - set(state)
    unexpected = set(state) - set(expected)
    if missing or unexpected:
        raise CheckpointError(
            f"Checkpoint tensors do not match the model: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint tensor shapes do not match the model: {e}")

    return model, CheckpointHeader(
        model_config=config,
        vocab_fingerprint=header.get("vocab_fingerprint", ""),
        metadata=header.get("metadata", {}),
    )


def load_checkpoint(
    path: Path, expected_fingerprint: str | None = None
) -> Tuple[CausalTransformer, CheckpointHeader]:
    """Load a checkpoint; with `expected_fingerprint`, the vocabularies must agree."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    model, header = decode_checkpoint(data)
    if expected_fingerprint is not None and header.vocab_fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"Checkpoint {path} was trained with a different vocabulary "
            f"({header.vocab_fingerprint[:12]} != {expected_fingerprint[:12]})"
        )
    return model, header

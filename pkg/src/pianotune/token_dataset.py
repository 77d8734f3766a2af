"""Binary token dataset with a JSON vocabulary sidecar.

Layout (little-endian)::

    magic  b"PTTD"
    u32    format version
    u32    record count
    per record:
        u16  file id length, then the UTF-8 file id
        u32  token count n
        n x u16 token ids

The sidecar ``<path>.vocab.json`` lists the exact token strings in id order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List

import numpy as np

from pianotune.errors import DatasetFormatError
from pianotune.tokenizer import TokenIds, Vocab
from pianotune.utils.common import atomic_write_bytes, sha256_hex

logger = logging.getLogger(__name__)

MAGIC = b"PTTD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TokenRecord:
    file_id: str
    ids: TokenIds

    def __len__(self) -> int:
        return len(self.ids)


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".vocab.json")


def write_token_dataset(path: Path, records: Iterable[TokenRecord], vocab: Vocab) -> int:
    """Atomically write records and the vocabulary sidecar; returns the record count."""
    if len(vocab) > 0xFFFF:
        raise DatasetFormatError("Vocabulary too large for 16-bit token ids")

    records = list(records)
    chunks: List[bytes] = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for record in records:
        file_id = record.file_id.encode("utf-8")
        if len(file_id) > 0xFFFF:
            raise DatasetFormatError(f"File id too long: {record.file_id[:40]}...")
        ids = np.asarray(record.ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(vocab)):
            raise DatasetFormatError(f"Token id out of range in record {record.file_id}")
        chunks.append(struct.pack("<H", len(file_id)))
        chunks.append(file_id)
        chunks.append(struct.pack("<I", len(ids)))
        chunks.append(ids.astype("<u2").tobytes())

    sidecar = {"fingerprint": vocab.fingerprint, "tokens": list(vocab.tokens)}
    atomic_write_bytes(sidecar_path(path), json.dumps(sidecar, indent=2).encode("utf-8"))
    atomic_write_bytes(Path(path), b"".join(chunks))
    logger.info("Wrote %d token records to %s", len(records), path)
    return len(records)


def read_token_dataset(path: Path, vocab: Vocab | None = None) -> List[TokenRecord]:
    """Read a token dataset; when `vocab` is given the sidecar must match it exactly."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"Cannot read token dataset {path}: {e}")

    if vocab is not None:
        try:
            sidecar = json.loads(sidecar_path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetFormatError(f"Missing or unreadable vocabulary sidecar for {path}: {e}")
        if sidecar.get("tokens") != list(vocab.tokens):
            raise DatasetFormatError(
                f"Vocabulary sidecar of {path} does not match the active vocabulary "
                f"(sidecar {sha256_hex(json.dumps(sidecar.get('tokens')))[:12]}, "
                f"active {vocab.fingerprint[:12]})"
            )

    if data[:4] != MAGIC:
        raise DatasetFormatError(f"{path} is not a token dataset (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"Unsupported token dataset version {version}")
        offset = 12
        records: List[TokenRecord] = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            file_id = data[offset : offset + id_len].decode("utf-8")
            offset += id_len
            (n,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if offset + 2 * n > len(data):
                raise DatasetFormatError(f"Truncated record {file_id!r} in {path}")
            ids = np.frombuffer(data, dtype="<u2", count=n, offset=offset).astype(np.int64)
            offset += 2 * n
            records.append(TokenRecord(file_id=file_id, ids=ids))
    except (struct.error, UnicodeDecodeError) as e:
        raise DatasetFormatError(f"Corrupt token dataset {path}: {e}")

    if offset != len(data):
        raise DatasetFormatError(f"Trailing bytes after {count} records in {path}")
    return records

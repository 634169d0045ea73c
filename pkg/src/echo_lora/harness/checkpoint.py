"""Self-describing binary checkpoint of named float64 tensors.

Layout::

    b"ECHOCKPT"                 8 bytes magic
    version                     uint32, little-endian
    header length               uint64, little-endian
    header                      UTF-8 JSON (sorted keys): format_version,
                                config_hash, config, meta, tensors[]
    tensor data                 each tensor as '<f8', in header order
    sha256                      32 bytes over everything above

Each entry of ``tensors`` records name, shape, byte offset (from the start of
the data block), byte count and a crc32 of its bytes, so a damaged file can be
traced to the first bad tensor.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"ECHOCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                          "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "config_hash": ckpt.config_hash,
                         "config": ckpt.config, "meta": ckpt.meta, "tensors": directory},
                        sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"{source}: truncated at offset {len(blob)} (file too short)")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic at offset 0")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    data_start = _PREFIX.size + header_len
    try:
        header = json.loads(blob[_PREFIX.size:data_start].decode())
        directory = header["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError):
        header, directory = None, None
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum failure at offset "
                              f"{_locate_damage(blob, data_start, directory)}")
    if header is None:
        raise CheckpointError(f"{source}: unreadable header at offset {_PREFIX.size}")
    tensors = {}
    for entry in directory:
        start = data_start + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(
            entry["shape"])
    return Checkpoint(tensors, header["config"], header["config_hash"], header["meta"])


def _locate_damage(blob: bytes, data_start: int, directory) -> int:
    """Best-effort byte offset of the first damaged region."""
    if directory is None:
        return _PREFIX.size
    for entry in directory:
        start = data_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob) - _DIGEST:
            return min(start, len(blob))
        if zlib.crc32(blob[start:end]) != entry["crc32"]:
            return start
    expected = data_start + sum(e["nbytes"] for e in directory) + _DIGEST
    if expected != len(blob):
        return min(expected, len(blob))
    return 0


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: a reader never observes a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    ckpt = from_bytes(blob, str(path))
    if expected_config_hash is not None and expected_config_hash != ckpt.config_hash:
        warnings.warn(f"{path}: config hash {ckpt.config_hash[:12]} differs from the current "
                      f"config {expected_config_hash[:12]}", stacklevel=2)
    return ckpt

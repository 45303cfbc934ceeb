"""Tensor archive: 8-byte little-endian header length, JSON header, raw float64 LE payloads.

The header holds ``format_version``, a free ``meta`` object and a ``tensors``
directory mapping name -> {"shape", "offset"}, with offsets relative to the
start of the payload section.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class ArchiveError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    directory, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F64)
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": directory}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 8:
        raise ArchiveError("archive truncated before header")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + n])
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"unreadable archive header: {exc.msg}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive version {header.get('format_version')!r}")
    payload = memoryview(data)[8 + n:]
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise ArchiveError(f"tensor {name!r} runs past the end of the archive")
        tensors[name] = np.frombuffer(payload[start:end], dtype=_LE_F64).reshape(shape).astype(np.float64)
    return tensors, header["meta"]


def write_atomic(path, data: bytes) -> None:
    """Write to a temporary file in the target folder, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    write_atomic(path, encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def save_feature_map(path, feature_map: np.ndarray, image_size: tuple[int, int]) -> None:
    """One-tensor archive holding a (C, h, w) map and the size of the image it came from."""
    save(path, {"feature_map": feature_map}, {"image_size": list(image_size)})


def load_feature_map(path) -> tuple[np.ndarray, tuple[int, int]]:
    tensors, meta = load(path)
    if len(tensors) != 1:
        raise ArchiveError(f"{path}: feature-map archive must hold exactly one tensor")
    (fm,) = tensors.values()
    if fm.ndim != 3:
        raise ArchiveError(f"{path}: feature map must be (C, h, w), got {fm.shape}")
    size = meta.get("image_size")
    if size is None:
        size = (fm.shape[1] * 16, fm.shape[2] * 16)
    return fm, tuple(int(x) for x in size)

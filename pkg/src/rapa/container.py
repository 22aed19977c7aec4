"""Binary container shared by checkpoints, datasets and adversarial batches.

Layout (all integers little-endian)::

    magic    4 bytes   e.g. b"RPAC"
    version  uint32    currently 1
    hlen     uint32    header length N
    header   N bytes   UTF-8 JSON object, keys sorted
    payload            raw arrays concatenated in header["tensors"] order

Each ``header["tensors"]`` entry is ``{"name", "dtype", "shape"}`` with dtype tag
one of ``f32``, ``f64``, ``u8``, ``i64``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "i64": np.dtype("<i8"),
}


class ContainerError(ValueError):
    pass


def encode(magic: bytes, header: dict, tensors: list[tuple[str, str, np.ndarray]]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    header = dict(header)
    header["tensors"] = [
        {"name": name, "dtype": tag, "shape": [int(d) for d in arr.shape]}
        for name, tag, arr in tensors
    ]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for name, tag, arr in tensors:
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12:
        raise ContainerError("truncated: shorter than fixed preamble")
    if blob[:4] != magic:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    if len(blob) < 12 + hlen:
        raise ContainerError("truncated: header extends past end of file")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from None
    offset = 12 + hlen
    arrays = {}
    for entry in header.get("tensors", []):
        tag = entry["dtype"]
        if tag not in DTYPES:
            raise ContainerError(f"unknown dtype tag {tag!r} for {entry['name']}")
        dt = DTYPES[tag]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(blob):
            raise ContainerError(
                f"truncated: tensor {entry['name']} declares shape {list(shape)} "
                f"but payload has {len(blob) - offset} bytes left"
            )
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                              offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ContainerError(f"payload length mismatch: {len(blob) - offset} trailing bytes")
    return header, arrays


def write(path, magic: bytes, header: dict, tensors) -> None:
    Path(path).write_bytes(encode(magic, header, tensors))


def read(path, magic: bytes):
    return decode(Path(path).read_bytes(), magic)

"""On-disk formats shared across modules.

Two binary layouts are used:

* sequence files: a header of three little-endian uint32 counts (B, L, D)
  followed by B*L*D little-endian float32 values;
* parameter containers: a plain-text header (version tag on the first line,
  then ``key=value`` lines, terminated by a line holding only ``---``)
  followed by little-endian float32 blobs in declaration order. The
  ``arrays`` header key lists ``name:d0xd1x...`` for each blob.

All writers go through :func:`atomic_write` (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_END = "---"


def atomic_write(path, data, force=True):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_sequence(blocks: np.ndarray) -> bytes:
    blocks = np.asarray(blocks)
    if blocks.ndim != 3:
        raise ValueError(f"expected a B x L x D array, got shape {blocks.shape}")
    head = struct.pack("<3I", *blocks.shape)
    return head + np.ascontiguousarray(blocks, dtype="<f4").tobytes()


def decode_sequence(raw: bytes) -> np.ndarray:
    if len(raw) < 12:
        raise DataError("sequence file truncated before header")
    shape = struct.unpack("<3I", raw[:12])
    n = shape[0] * shape[1] * shape[2]
    if len(raw) != 12 + 4 * n:
        raise DataError(f"sequence payload size mismatch for shape {shape}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(shape).astype(np.float64)


def write_sequence(path, blocks, force=True):
    atomic_write(path, encode_sequence(blocks), force=force)


def read_sequence(path) -> np.ndarray:
    return decode_sequence(Path(path).read_bytes())


def encode_container(tag: str, meta: dict, arrays: dict) -> bytes:
    lines = [tag]
    for key, value in meta.items():
        if "\n" in str(value) or "=" in str(key):
            raise ValueError(f"unencodable header entry {key!r}")
        lines.append(f"{key}={value}")
    spec = ",".join(
        f"{name}:{'x'.join(str(d) for d in np.shape(a)) or 'scalar'}"
        for name, a in arrays.items()
    )
    lines.append(f"arrays={spec}")
    lines.append(HEADER_END)
    head = ("\n".join(lines) + "\n").encode("utf-8")
    blobs = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays.values()
    )
    return head + blobs


def decode_container(raw: bytes, tag: str):
    marker = ("\n" + HEADER_END + "\n").encode()
    cut = raw.find(marker)
    if cut < 0:
        raise DataError("container header terminator not found")
    head = raw[:cut].decode("utf-8").split("\n")
    body = raw[cut + len(marker):]
    if head[0] != tag:
        raise DataError(f"expected version tag {tag!r}, found {head[0]!r}")
    meta = {}
    for line in head[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"malformed header line {line!r}")
        meta[key] = value
    spec = meta.pop("arrays", "")
    arrays = {}
    offset = 0
    for item in filter(None, spec.split(",")):
        name, _, dims = item.partition(":")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        n = int(np.prod(shape)) if shape else 1
        chunk = body[offset:offset + 4 * n]
        if len(chunk) != 4 * n:
            raise DataError(f"blob {name!r} truncated")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        offset += 4 * n
    if offset != len(body):
        raise DataError("trailing bytes after last blob")
    return meta, arrays


def write_container(path, tag, meta, arrays, force=True):
    atomic_write(path, encode_container(tag, meta, arrays), force=force)


def read_container(path, tag):
    return decode_container(Path(path).read_bytes(), tag)

"""SCKP checkpoint container.

Layout (little-endian): magic ``b"SCKP"``, format version ``u32``, then
records until EOF, each ``[name_len u32][name utf-8][rank u32][dims u32 x
rank][payload f32 x prod(dims)]``. Free-form metadata travels as a record
named ``meta.json`` holding the UTF-8 bytes of a JSON document, one byte per
f32 element.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"SCKP"
FORMAT_VERSION = 1
META_KEY = "meta.json"


def _write_record(buf, name: str, arr) -> None:
    arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    for name, arr in tensors.items():
        _write_record(buf, name, arr)
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        _write_record(buf, META_KEY, np.frombuffer(raw, dtype=np.uint8).astype("<f4"))
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not an SCKP checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported SCKP format version {version}")
    pos = 8
    tensors: dict = {}
    meta: dict = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
            if name == META_KEY:
                meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return tensors, meta


def save(path, tensors: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)


def params_sha256(tensors: dict, prefix: str = "") -> str:
    """SHA-256 of the SCKP encoding of all tensors under ``prefix`` (sorted by name)."""
    sel = {k: np.asarray(getattr(v, "data", v)) for k, v in sorted(tensors.items()) if k.startswith(prefix)}
    return hashlib.sha256(dumps(sel)).hexdigest()

"""Binary parameter checkpoints and flat ``key = value`` config files.

Checkpoint layout (little-endian)::

    b"APVT" | u32 version | records...
    record := u32 name_len | utf-8 name | u32 rows | u32 cols | f64[rows*cols]

Tensors of rank other than 2 are stored as (prod(shape[:-1]), shape[-1]).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"APVT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_2d(shape) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return int(np.prod(shape[:-1])), shape[-1]


def dumps(named_params) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, p in named_params:
        raw = name.encode("utf-8")
        rows, cols = _as_2d(p.data.shape)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an APVT checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        size = rows * cols * 8
        if pos + size > len(blob):
            raise CheckpointError(f"truncated record {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += size
    return out


def save(model, path) -> bytes:
    blob = dumps(model.named_parameters())
    Path(path).write_bytes(blob)
    return blob


def load_into(model, source) -> None:
    """Copy stored values into ``model``'s parameters (bytes or a path)."""
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    stored = loads(bytes(blob))
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={missing[:3]} extra={extra[:3]}")
    for name, p in params.items():
        arr = stored[name]
        if arr.size != p.data.size:
            raise CheckpointError(f"{name}: stored {arr.shape}, model {p.data.shape}")
        p.data[...] = arr.reshape(p.data.shape)


def write_config(values: dict, path) -> None:
    lines = [f"{key} = {values[key]}" for key in values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out

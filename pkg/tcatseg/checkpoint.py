"""
Parameter checkpoints in the flat TCAT binary format:

    b"TCAT" | version u32 | count u32 |
    per array: name_len u32 | name utf-8 | rank u32 | extents u64 * rank | f64 LE payload
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from tcatseg import diffcore as dc
from tcatseg.errors import DimensionError, FormatError

MAGIC = b"TCAT"
VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, dc.Tensor | np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, dc.Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a TCAT checkpoint (bad magic)")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            payload = blob[pos : pos + 8 * n]
            if len(payload) != 8 * n:
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return out


def assign_parameters(params: Mapping[str, dc.Tensor], state: Mapping[str, np.ndarray]) -> None:
    """Copy a loaded state into live parameters; names and shapes must agree."""
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise DimensionError(f"checkpoint names differ: missing={missing[:5]} extra={extra[:5]}")
    for name, p in params.items():
        value = state[name]
        if value.shape != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {value.shape} vs model {p.shape}")
        p.data = np.array(value, dtype=np.float64)

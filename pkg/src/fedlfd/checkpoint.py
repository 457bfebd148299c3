"""Binary checkpoint format for parameter vectors.

Layout (all little-endian)::

    b"FLFD" | uint32 version | uint64 count | count x float32 | UTF-8 JSON footer

The footer holds ``shape_meta`` and free-form metadata. Parameters are
stored as float32, so a round trip is exact only up to float32 rounding.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

from .errors import UsageError
from .tensor import ParamVector

MAGIC = b"FLFD"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def encode(params: ParamVector, meta: dict[str, Any] | None = None) -> bytes:
    footer = json.dumps(
        {"shape_meta": [list(m) for m in params.shape_meta], "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    body = params.values.astype("<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, len(params)) + body + footer


def decode(blob: bytes) -> tuple[ParamVector, dict[str, Any]]:
    if len(blob) < _HEADER.size:
        raise UsageError("checkpoint truncated before header end")
    magic, version, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise UsageError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UsageError(f"unsupported checkpoint version {version}")
    end = _HEADER.size + 4 * count
    if len(blob) < end:
        raise UsageError("checkpoint truncated inside parameter block")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=_HEADER.size).astype(np.float64)
    footer = json.loads(blob[end:].decode("utf-8")) if len(blob) > end else {}
    meta = tuple(tuple(m) for m in footer.get("shape_meta", []))
    return ParamVector(values, meta), footer.get("meta", {})


def save(path: str | os.PathLike, params: ParamVector, meta: dict[str, Any] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(params, meta))


def load(path: str | os.PathLike) -> tuple[ParamVector, dict[str, Any]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def describe(path: str | os.PathLike) -> dict[str, Any]:
    """Summary used by ``inspect-checkpoint``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    params, meta = decode(blob)
    _, version, count = _HEADER.unpack_from(blob)
    return {
        "version": version,
        "count": count,
        "layers": [{"name": n, "rows": r, "cols": c} for n, r, c in params.shape_meta],
        "norm": params.norm(),
        "meta": meta,
    }

"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"CLPS" | version
    repeated until EOF:
        name_len | name (utf-8) | ndim | extents[ndim] | float64 payload (LE)

Records are written in a fixed order (model parameters first, then any
extra state such as optimizer moments), so a given state always produces
the same bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CLPS"
VERSION = 1
PARAM_PREFIX = "param."


class CheckpointError(ValueError):
    pass


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in records.items():
        a = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{source}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError(f"{source}: truncated record name at byte {pos}")
            pos += n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(raw):
                raise CheckpointError(f"{source}: truncated payload for record {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated record at byte {pos} ({exc})") from None
    return out


def save(path: str | Path, named_params, extra: Mapping[str, np.ndarray] | None = None) -> None:
    records = {PARAM_PREFIX + n: p.data for n, p in named_params}
    records.update(extra or {})
    Path(path).write_bytes(encode(records))


def load(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{p}: cannot read checkpoint ({exc.strerror})") from None
    return decode(raw, str(p))


def restore_params(records: Mapping[str, np.ndarray], named_params, source: str = "checkpoint") -> None:
    """Copy parameter records into live tensors, checking names and shapes."""
    named = list(named_params)
    stored = {k[len(PARAM_PREFIX):] for k in records if k.startswith(PARAM_PREFIX)}
    expected = {n for n, _ in named}
    if stored != expected:
        missing = sorted(expected - stored)
        extra = sorted(stored - expected)
        raise CheckpointError(f"{source}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for n, p in named:
        a = records[PARAM_PREFIX + n]
        if a.shape != p.shape:
            raise CheckpointError(f"{source}: shape of {n} is {a.shape}, model expects {p.shape}")
        p.data = a.copy()


def extra_records(records: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in records.items() if not k.startswith(PARAM_PREFIX)}

"""Binary parameter checkpoints with a JSON manifest.

Layout of ``<name>.ckpt`` (all integers little-endian)::

    magic      4 bytes  b"PCKP"
    version    uint32   1
    count      uint32   number of parameters
    repeated count times:
        name_len  uint16, name (utf-8)
        ndim      uint8,  dims (uint32 x ndim)
        data      float64 x prod(dims), row-major

The manifest ``<name>.json`` holds the config hash, seed, step count and any
extra metadata, serialized with sorted keys so reruns are byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PCKP"
VERSION = 1


class CheckpointFormatError(FormatError):
    pass


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    try:
        return _parse(buf, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: truncated or corrupt ({exc})") from exc


def _parse(buf: bytes, path) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def save_checkpoint(stem: str | Path, params: dict[str, np.ndarray], manifest: dict) -> tuple[Path, Path]:
    stem = Path(stem)
    ckpt, meta = stem.with_suffix(".ckpt"), stem.with_suffix(".json")
    save_params(ckpt, params)
    meta.write_text(canonical_json(manifest))
    return ckpt, meta


def load_checkpoint(stem: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    if stem.suffix in (".ckpt", ".json"):
        stem = stem.with_suffix("")
    params = load_params(stem.with_suffix(".ckpt"))
    manifest = json.loads(stem.with_suffix(".json").read_text())
    return params, manifest

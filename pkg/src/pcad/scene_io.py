"""Scene interchange format: a binary channel file plus a JSON label sidecar.

``<stem>.pcs`` layout (little-endian)::

    magic       4 bytes  b"PCSN"
    version     uint32   1
    n_points    uint64
    n_channels  uint16
    repeated n_channels times: name_len uint8, name (ascii)
    body: for each channel in order, n_points float64 values (column-major)

Channels are always ``x, y, z`` followed by the appearance channels.

``<stem>.json`` holds the labels (``semantic``, ``instance``, ``anomaly``
lists) and a free-form ``provenance`` object (seed, recipe, config hash,
augmentation moves ...).  It is written with sorted keys so equal scenes
serialize to equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .checkpoint import canonical_json
from .data import LabelSet, PointCloud
from .errors import FormatError

MAGIC = b"PCSN"
VERSION = 1


def scene_bytes(cloud: PointCloud) -> bytes:
    names = ("x", "y", "z") + tuple(cloud.channels)
    head = [MAGIC, struct.pack("<IQH", VERSION, cloud.n, len(names))]
    for name in names:
        raw = name.encode("ascii")
        head.append(struct.pack("<B", len(raw)) + raw)
    body = np.concatenate([cloud.positions, cloud.appearance], axis=1)
    return b"".join(head) + np.asfortranarray(body, dtype="<f8").tobytes(order="F")


def parse_scene_bytes(buf: bytes) -> PointCloud:
    if buf[:4] != MAGIC:
        raise FormatError("not a scene file (bad magic)")
    version, n, nch = struct.unpack_from("<IQH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported scene version {version}")
    pos = 4 + struct.calcsize("<IQH")
    names = []
    for _ in range(nch):
        (ln,) = struct.unpack_from("<B", buf, pos)
        names.append(buf[pos + 1:pos + 1 + ln].decode("ascii"))
        pos += 1 + ln
    if names[:3] != ["x", "y", "z"]:
        raise FormatError(f"first channels must be x, y, z; got {names[:3]}")
    expected = pos + 8 * n * nch
    if len(buf) != expected:
        raise FormatError(f"scene body has {len(buf) - pos} bytes, expected {expected - pos}")
    body = np.frombuffer(buf, dtype="<f8", offset=pos).reshape((n, nch), order="F")
    return PointCloud(body[:, :3].copy(), body[:, 3:].copy(), tuple(names[3:]))


def write_scene(stem: str | Path, cloud: PointCloud, labels: LabelSet,
                provenance: dict | None = None) -> tuple[Path, Path]:
    if len(labels) != cloud.n:
        raise FormatError("labels and cloud differ in length")
    stem = Path(stem)
    data_path, side_path = stem.with_suffix(".pcs"), stem.with_suffix(".json")
    data_path.write_bytes(scene_bytes(cloud))
    sidecar = {
        "format": "pcs",
        "version": VERSION,
        "n_points": cloud.n,
        "labels": {
            "semantic": labels.semantic.tolist(),
            "instance": labels.instance.tolist(),
            "anomaly": labels.anomaly.astype(int).tolist(),
        },
        "provenance": provenance or {},
    }
    side_path.write_text(canonical_json(sidecar))
    return data_path, side_path


def read_scene(stem: str | Path) -> tuple[PointCloud, LabelSet, dict]:
    stem = Path(stem)
    if stem.suffix in (".pcs", ".json"):
        stem = stem.with_suffix("")
    cloud = parse_scene_bytes(stem.with_suffix(".pcs").read_bytes())
    side = json.loads(stem.with_suffix(".json").read_text())
    lab = side["labels"]
    n = len(lab["semantic"])
    instance = lab.get("instance", np.zeros(n, dtype=np.int64))
    anomaly = np.asarray(lab.get("anomaly", np.zeros(n)), dtype=bool)
    labels = LabelSet(lab["semantic"], instance, anomaly)
    if len(labels) != cloud.n:
        raise FormatError(f"{stem}: sidecar has {len(labels)} labels for {cloud.n} points")
    return cloud, labels, side.get("provenance", {})

"""ASCII PLY export with score heat-maps or class colours."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError

ANOMALY_RGB = (255, 0, 0)
# distinct non-red colours for class ids, cycled when there are more classes
CLASS_PALETTE = np.array(
    [
        (128, 128, 128),
        (31, 119, 180),
        (44, 160, 44),
        (255, 187, 51),
        (148, 103, 189),
        (23, 190, 207),
        (140, 86, 75),
        (188, 189, 34),
        (227, 119, 194),
        (0, 0, 128),
    ],
    dtype=np.uint8,
)


def score_colors(scores) -> np.ndarray:
    """Linear blue-to-red ramp: 0 -> (0, 0, 255), 1 -> (255, 0, 0), green fixed at 0."""
    s = np.clip(np.asarray(scores, dtype=np.float64).ravel(), 0.0, 1.0)
    red = np.rint(255 * s)
    return np.column_stack([red, np.zeros_like(red), 255 - red]).astype(np.uint8)


def label_colors(semantic, anomaly=None) -> np.ndarray:
    """Palette colour per class id; anomalous points are painted red."""
    sem = np.asarray(semantic, dtype=np.int64).ravel()
    rgb = CLASS_PALETTE[sem % len(CLASS_PALETTE)].copy()
    if anomaly is not None:
        anomaly = np.asarray(anomaly, dtype=bool).ravel()
        if len(anomaly) != len(sem):
            raise ContractError("anomaly flags not aligned with labels")
        rgb[anomaly] = ANOMALY_RGB
    return rgb


def ply_text(positions, colors, comments=()) -> str:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(colors).reshape(-1, 3)
    if len(pos) != len(rgb):
        raise ContractError(f"{len(rgb)} colours for {len(pos)} points")
    header = ["ply", "format ascii 1.0"]
    header += [f"comment {c}" for c in comments]
    header += [
        f"element vertex {len(pos)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [f"{x!r} {y!r} {z!r} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(pos.tolist(), rgb.tolist())]
    return "\n".join(header + body) + "\n"


def write_ply(path: str | Path, positions, colors, comments=()) -> Path:
    path = Path(path)
    path.write_text(ply_text(positions, colors, comments))
    return path

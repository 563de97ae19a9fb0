"""Synthetic anomalies made from labelled object instances.

The Rubik transform cuts an instance into eighths around its centre and
turns whole halves (four eighths) about the axis through that centre, the
way a face of a Rubik's cube turns.  Shapes become implausible while local
point density stays the same.  The scaling transform is the baseline: it
enlarges or shrinks an instance, which also changes its density.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import ClassMap, LabelSet, PointCloud
from .errors import ContractError

HALVES = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")
MIN_INSTANCE_POINTS = 20
SCALE_RANGES = ((0.25, 0.5), (2.0, 4.0))

# exact integer quarter-turn rotations (right-handed) about each axis
_QUARTER = {
    0: np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=np.float64),
    1: np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]], dtype=np.float64),
    2: np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64),
}


@dataclass(frozen=True)
class RubikMove:
    """Turn the ``half`` side of an instance by ``quarter_turns`` x 90 degrees."""

    half: str
    quarter_turns: int

    def __post_init__(self):
        if self.half not in HALVES:
            raise ContractError(f"half must be one of {HALVES}, got {self.half!r}")
        if self.quarter_turns not in (1, 2, 3):
            raise ContractError("quarter_turns must be 1, 2 or 3")

    @property
    def axis(self) -> int:
        return "XYZ".index(self.half[1])

    @property
    def positive(self) -> bool:
        return self.half[0] == "+"

    def rotation(self) -> np.ndarray:
        return np.linalg.matrix_power(_QUARTER[self.axis], self.quarter_turns)

    def to_dict(self) -> dict:
        return {"half": self.half, "quarter_turns": self.quarter_turns}


def instance_center(points: np.ndarray, center: str = "centroid") -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ContractError("empty instance")
    if center == "centroid":
        return points.mean(axis=0)
    if center == "bbox":
        return (points.min(axis=0) + points.max(axis=0)) / 2
    raise ContractError(f"unknown center rule {center!r}")


def split_eighths(points, center: np.ndarray | None = None) -> list[np.ndarray]:
    """Index groups for the eight octants around the centroid.

    Group ``g`` has bit ``k`` set when the point lies on the positive side
    (``>=``) of axis ``k``.  Groups may be empty.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c = instance_center(points) if center is None else np.asarray(center, dtype=np.float64)
    side = (points >= c).astype(np.int64)
    code = side[:, 0] | (side[:, 1] << 1) | (side[:, 2] << 2)
    return [np.flatnonzero(code == g) for g in range(8)]


def apply_move(points: np.ndarray, move: RubikMove, center: np.ndarray) -> np.ndarray:
    """One half-turn about the axis through ``center``; other points untouched."""
    offset = points[:, move.axis] - center[move.axis]
    sel = offset >= 0 if move.positive else offset < 0
    out = points.copy()
    out[sel] = center + (points[sel] - center) @ move.rotation().T
    return out


def random_moves(rng: np.random.Generator, max_moves: int = 3) -> list[RubikMove]:
    count = int(rng.integers(1, max_moves + 1))
    return [
        RubikMove(HALVES[int(rng.integers(len(HALVES)))], int(rng.integers(1, 4)))
        for _ in range(count)
    ]


def rubik_augment(points, moves=None, rng_seed: int | None = None,
                  center: str = "centroid") -> np.ndarray:
    """Apply Rubik moves to one instance.

    Without ``moves`` a seeded random sequence of one to three moves is drawn.
    All moves turn about axes through the same centre, the centroid of the
    untransformed instance, so that point is fixed throughout.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c = instance_center(points, center)
    if moves is None:
        moves = random_moves(np.random.default_rng(rng_seed))
    moves = list(moves)
    if not moves:
        raise ContractError("at least one move is required")
    for move in moves:
        points = apply_move(points, move, c)
    return points


def random_scale_factor(rng: np.random.Generator) -> float:
    lo, hi = SCALE_RANGES[int(rng.integers(len(SCALE_RANGES)))]
    return float(rng.uniform(lo, hi))


def scale_augment(points, factor: float, center: str = "centroid") -> np.ndarray:
    if not factor > 0:
        raise ContractError(f"scale factor must be positive, got {factor}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c = instance_center(points, center)
    return c + factor * (points - c)


def eligible_instances(labels: LabelSet, cm: ClassMap, min_points: int = MIN_INSTANCE_POINTS) -> list[int]:
    """Instance ids that are not surfaces, not already anomalous and big enough."""
    ok = (labels.instance != 0) & ~np.isin(labels.semantic, sorted(cm.surface_classes)) & ~labels.anomaly
    ids, counts = np.unique(labels.instance[ok], return_counts=True)
    out = []
    for i, n in zip(ids.tolist(), counts.tolist()):
        members = labels.instance == i
        # an instance touching a surface / anomalous point is skipped whole
        if n >= min_points and n == members.sum():
            out.append(i)
    return out


def inject_synthetic_anomalies(scene: PointCloud, labels: LabelSet, cm: ClassMap, mode: str = "rubik",
                               rate: float = 0.5, seed: int = 0, provenance: list | None = None,
                               center: str = "centroid") -> tuple[PointCloud, LabelSet]:
    """Transform a seeded fraction of eligible instances and flag them anomalous.

    ``round(rate * n_eligible)`` instances are picked.  Their semantic ids are
    kept; only the anomaly flag changes, which removes them from the
    semantic loss.  When ``provenance`` is a list, one record per transformed
    instance is appended to it.
    """
    if mode not in ("rubik", "scale"):
        raise ContractError(f"unknown augmentation mode {mode!r}")
    if not 0.0 <= rate <= 1.0:
        raise ContractError("rate must lie in [0, 1]")
    if len(scene) != len(labels):
        raise ContractError(f"{len(labels)} labels for {len(scene)} points")
    candidates = eligible_instances(labels, cm)
    if not candidates:
        warnings.warn("no eligible instances; scene returned unchanged", stacklevel=2)
        return scene, labels
    rng = np.random.default_rng(seed)
    n_pick = int(np.floor(rate * len(candidates) + 0.5))
    picked = sorted(rng.choice(candidates, size=n_pick, replace=False).tolist()) if n_pick else []
    if not picked:
        return scene, labels

    positions = np.array(scene.positions)
    anomaly = np.array(labels.anomaly)
    for inst in picked:
        idx = np.flatnonzero(labels.instance == inst)
        record: dict = {"instance": int(inst), "mode": mode, "points": int(len(idx))}
        if mode == "rubik":
            moves = random_moves(rng)
            positions[idx] = rubik_augment(positions[idx], moves, center=center)
            record["moves"] = [m.to_dict() for m in moves]
        else:
            factor = random_scale_factor(rng)
            positions[idx] = scale_augment(positions[idx], factor, center=center)
            record["factor"] = factor
        anomaly[idx] = True
        if provenance is not None:
            provenance.append(record)
    return scene.with_positions(positions), LabelSet(labels.semantic, labels.instance, anomaly)

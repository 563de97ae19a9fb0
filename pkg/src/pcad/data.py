"""Point clouds, labels, masking operators, reconstruction deltas and scene synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, FormatError
from .octree import snap

__all__ = [
    "ClassMap",
    "DeltaFeatures",
    "LabelSet",
    "PointCloud",
    "PrimitiveSpec",
    "SceneRecipe",
    "compute_delta",
    "default_class_map",
    "default_recipe",
    "generate_synthetic_scene",
    "load_kitti_labels",
    "load_kitti_scan",
    "mask_default",
    "mask_known",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Positions in metres plus appearance channels normalized to [0, 1].

    ``appearance`` has one column per entry of ``channels``; ``intensity`` is
    always the first channel.  Positions are snapped to the octree lattice
    (2**-28 m) on construction so leaf-relative arithmetic is exact.
    """

    positions: np.ndarray
    appearance: np.ndarray
    channels: tuple[str, ...] = ("intensity",)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        app = np.asarray(self.appearance, dtype=np.float64)
        if app.ndim == 1:
            app = app[:, None]
        if len(app) != len(pos):
            raise ContractError(f"appearance has {len(app)} rows for {len(pos)} points")
        if app.shape[1] != len(self.channels):
            raise ContractError(f"{app.shape[1]} appearance columns but channels={self.channels}")
        if not self.channels or self.channels[0] != "intensity":
            raise ContractError("intensity must be the first appearance channel")
        if not np.all(np.isfinite(pos)):
            raise ContractError("positions must be finite")
        if app.size and (app.min() < 0.0 or app.max() > 1.0 or not np.all(np.isfinite(app))):
            raise ContractError("appearance channels must lie in [0, 1]")
        object.__setattr__(self, "positions", _frozen(snap(pos)))
        object.__setattr__(self, "appearance", _frozen(app))
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def n(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.n

    @property
    def intensity(self) -> np.ndarray:
        return self.appearance[:, 0]

    def select(self, index: np.ndarray) -> PointCloud:
        return PointCloud(self.positions[index], self.appearance[index], self.channels)

    def with_positions(self, positions: np.ndarray) -> PointCloud:
        return PointCloud(positions, self.appearance, self.channels)


@dataclass(frozen=True)
class LabelSet:
    """Per-point semantic id, instance id (0 = none) and anomaly flag."""

    semantic: np.ndarray
    instance: np.ndarray
    anomaly: np.ndarray

    def __post_init__(self):
        sem = np.asarray(self.semantic, dtype=np.int64).ravel()
        ins = np.asarray(self.instance, dtype=np.int64).ravel()
        ano = np.asarray(self.anomaly, dtype=bool).ravel()
        if not (len(sem) == len(ins) == len(ano)):
            raise ContractError("label arrays differ in length")
        if len(sem) and sem.min() < 0:
            raise ContractError("semantic ids must be nonnegative")
        object.__setattr__(self, "semantic", _frozen(sem))
        object.__setattr__(self, "instance", _frozen(ins))
        object.__setattr__(self, "anomaly", _frozen(ano))

    def __len__(self) -> int:
        return len(self.semantic)

    def select(self, index: np.ndarray) -> LabelSet:
        return LabelSet(self.semantic[index], self.instance[index], self.anomaly[index])


@dataclass(frozen=True)
class ClassMap:
    """Partition of class ids into known / train-anomaly / test-anomaly sets."""

    known_classes: frozenset[int]
    train_anomaly_classes: frozenset[int] = frozenset()
    test_anomaly_classes: frozenset[int] = frozenset()
    surface_classes: frozenset[int] = frozenset()

    def __post_init__(self):
        for name in ("known_classes", "train_anomaly_classes", "test_anomaly_classes", "surface_classes"):
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        k, tr, te = self.known_classes, self.train_anomaly_classes, self.test_anomaly_classes
        if not k:
            raise ContractError("at least one known class is required")
        if (k & tr) or (k & te) or (tr & te):
            raise ContractError("known, train-anomaly and test-anomaly classes must be disjoint")
        if not self.surface_classes <= k:
            raise ContractError("surface classes must be known classes")

    @property
    def k(self) -> int:
        return len(self.known_classes)

    @property
    def anomaly_classes(self) -> frozenset[int]:
        return self.train_anomaly_classes | self.test_anomaly_classes

    def anomaly_flags(self, semantic: np.ndarray) -> np.ndarray:
        return np.isin(semantic, sorted(self.anomaly_classes))

    def labels(self, semantic, instance) -> LabelSet:
        semantic = np.asarray(semantic, dtype=np.int64)
        return LabelSet(semantic, instance, self.anomaly_flags(semantic))

    def to_dict(self) -> dict:
        return {
            "known_classes": sorted(self.known_classes),
            "train_anomaly_classes": sorted(self.train_anomaly_classes),
            "test_anomaly_classes": sorted(self.test_anomaly_classes),
            "surface_classes": sorted(self.surface_classes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ClassMap:
        return cls(
            frozenset(d["known_classes"]),
            frozenset(d.get("train_anomaly_classes", ())),
            frozenset(d.get("test_anomaly_classes", ())),
            frozenset(d.get("surface_classes", ())),
        )


# ---------------------------------------------------------------------------
# SemanticKITTI ingestion


def load_kitti_scan(path: str | Path) -> PointCloud:
    """Read a ``.bin`` scan of little-endian float32 (x, y, z, intensity) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], np.clip(rec[:, 3:4], 0.0, 1.0))


def load_kitti_labels(
    path: str | Path,
    n: int,
    class_map: ClassMap | None = None,
    id_map: Mapping[int, int] | None = None,
) -> LabelSet:
    """Read a ``.label`` file: one little-endian uint32 per point.

    The low 16 bits are the raw semantic id (remapped through ``id_map`` when
    given), the high 16 bits the instance id.
    """
    raw = Path(path).read_bytes()
    if len(raw) != 4 * n:
        raise FormatError(f"{path}: expected {n} labels ({4 * n} bytes), found {len(raw)} bytes")
    words = np.frombuffer(raw, dtype="<u4")
    sem_raw = (words & 0xFFFF).astype(np.int64)
    instance = (words >> 16).astype(np.int64)
    if id_map is not None:
        lut_keys = np.array(sorted(id_map), dtype=np.int64)
        missing = np.setdiff1d(np.unique(sem_raw), lut_keys)
        if missing.size:
            raise FormatError(f"{path}: raw class ids {missing.tolist()} missing from id map")
        lut_vals = np.array([id_map[k] for k in lut_keys], dtype=np.int64)
        semantic = lut_vals[np.searchsorted(lut_keys, sem_raw)]
    else:
        semantic = sem_raw
    flags = class_map.anomaly_flags(semantic) if class_map is not None else np.zeros(n, bool)
    return LabelSet(semantic, instance, flags)


# ---------------------------------------------------------------------------
# masking operators


def _check_aligned(cloud: PointCloud, labels: LabelSet) -> None:
    if cloud.n != len(labels):
        raise ContractError(f"cloud has {cloud.n} points but labels have {len(labels)}")


def _keep(cloud: PointCloud, labels: LabelSet, removed: frozenset[int]):
    _check_aligned(cloud, labels)
    keep = ~np.isin(labels.semantic, sorted(removed))
    return cloud.select(keep), labels.select(keep)


def mask_known(cloud: PointCloud, labels: LabelSet, cm: ClassMap) -> tuple[PointCloud, LabelSet]:
    """Drop every point of a held-out (test) anomaly class, keeping order."""
    return _keep(cloud, labels, cm.test_anomaly_classes)


def mask_default(cloud: PointCloud, labels: LabelSet, cm: ClassMap) -> tuple[PointCloud, LabelSet]:
    """Drop every anomalous point (train and test classes): the default context."""
    return _keep(cloud, labels, cm.test_anomaly_classes | cm.train_anomaly_classes)


# ---------------------------------------------------------------------------
# reconstruction difference


@dataclass(frozen=True)
class DeltaFeatures:
    """Signed per-channel difference and its per-point L2 norm."""

    signed: np.ndarray
    norm: np.ndarray

    def stacked(self) -> np.ndarray:
        """``(N, C + 1)`` matrix: signed channels followed by the norm."""
        return np.concatenate([self.signed, self.norm[:, None]], axis=1)


def compute_delta(original: np.ndarray, reconstructed: np.ndarray) -> DeltaFeatures:
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape or original.ndim != 2:
        raise ContractError(f"shape mismatch: {original.shape} vs {reconstructed.shape}")
    signed = original - reconstructed
    return DeltaFeatures(signed, np.sqrt(np.einsum("ij,ij->i", signed, signed)))


# ---------------------------------------------------------------------------
# synthetic scenes


PRIMITIVE_KINDS = ("ground", "box", "sphere", "post", "torus", "cross")


@dataclass(frozen=True)
class PrimitiveSpec:
    """One primitive class in a scene recipe.

    ``size`` is the characteristic dimension range in metres: box edge,
    sphere radius, post height, torus major radius, cross bar length.
    """

    kind: str
    class_id: int
    count: tuple[int, int] = (1, 1)
    size: tuple[float, float] = (1.0, 1.0)
    intensity: tuple[float, float] = (0.5, 0.05)
    anomaly: bool = False

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ContractError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "count", tuple(int(c) for c in self.count))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "intensity", tuple(float(s) for s in self.intensity))


@dataclass(frozen=True)
class SceneRecipe:
    primitives: tuple[PrimitiveSpec, ...]
    extent: float = 24.0
    n_points: tuple[int, int] = (4500, 5500)
    ground_density: float = 4.0
    object_density: float = 40.0
    ground_noise: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ContractError("scene recipe lists no primitives")
        if not 0 < self.extent <= 100.0:
            raise ContractError("extent must be in (0, 100] metres")
        lo, hi = self.n_points
        if not 0 < lo <= hi:
            raise ContractError("n_points must be a positive range")

    def to_dict(self) -> dict:
        return {
            "extent": self.extent,
            "n_points": list(self.n_points),
            "ground_density": self.ground_density,
            "object_density": self.object_density,
            "ground_noise": self.ground_noise,
            "primitives": [
                {
                    "kind": p.kind,
                    "class_id": p.class_id,
                    "count": list(p.count),
                    "size": list(p.size),
                    "intensity": list(p.intensity),
                    "anomaly": p.anomaly,
                }
                for p in self.primitives
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SceneRecipe:
        prims = tuple(
            PrimitiveSpec(
                p["kind"], int(p["class_id"]), tuple(p.get("count", (1, 1))),
                tuple(p.get("size", (1.0, 1.0))), tuple(p.get("intensity", (0.5, 0.05))),
                bool(p.get("anomaly", False)),
            )
            for p in d["primitives"]
        )
        return cls(
            prims,
            extent=float(d.get("extent", 24.0)),
            n_points=tuple(d.get("n_points", (4500, 5500))),
            ground_density=float(d.get("ground_density", 4.0)),
            object_density=float(d.get("object_density", 40.0)),
            ground_noise=float(d.get("ground_noise", 0.02)),
        )


def default_recipe() -> SceneRecipe:
    """Four known classes plus two withheld anomaly shapes (torus, cross)."""
    return SceneRecipe(
        primitives=(
            PrimitiveSpec("ground", 0, (1, 1), (0.0, 0.0), (0.30, 0.05)),
            PrimitiveSpec("box", 1, (2, 4), (0.8, 2.2), (0.55, 0.06)),
            PrimitiveSpec("sphere", 2, (1, 3), (0.4, 0.9), (0.45, 0.06)),
            PrimitiveSpec("post", 3, (2, 4), (1.8, 3.2), (0.65, 0.06)),
            PrimitiveSpec("torus", 4, (0, 1), (0.6, 1.0), (0.55, 0.06), anomaly=True),
            PrimitiveSpec("cross", 5, (0, 1), (1.4, 2.4), (0.55, 0.06), anomaly=True),
        )
    )


def default_class_map() -> ClassMap:
    return ClassMap(
        known_classes=frozenset({0, 1, 2, 3}),
        train_anomaly_classes=frozenset(),
        test_anomaly_classes=frozenset({4, 5}),
        surface_classes=frozenset({0}),
    )


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _box_surface(rng, n, dims) -> np.ndarray:
    """Uniform samples on the surface of an origin-cornered box ``[0, dims]``."""
    dx, dy, dz = dims
    areas = np.array([dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 3)) * np.asarray(dims)
    axis = face // 2
    side = face % 2
    u[np.arange(n), axis] = side * np.asarray(dims)[axis]
    return u


def _sample_primitive(rng, kind: str, size: float, n: int):
    """Return ``(points, area, footprint_radius)`` with the base resting on z=0."""
    if kind == "box":
        dims = size * rng.uniform(0.5, 1.0, size=3)
        dims[int(rng.integers(3))] = size
        area = 2 * (dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
        pts = _box_surface(rng, n, dims) - np.array([dims[0] / 2, dims[1] / 2, 0.0])
        return pts, area, 0.5 * np.hypot(dims[0], dims[1])
    if kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * size + np.array([0.0, 0.0, size]), 4 * np.pi * size**2, size
    if kind == "post":
        r = 0.12
        side, top = 2 * np.pi * r * size, np.pi * r * r
        on_top = rng.random(n) < top / (side + top)
        th = rng.uniform(0, 2 * np.pi, n)
        rad = np.where(on_top, r * np.sqrt(rng.random(n)), r)
        z = np.where(on_top, size, rng.uniform(0, size, n))
        return np.column_stack([rad * np.cos(th), rad * np.sin(th), z]), side + top, r
    if kind == "torus":
        big, small = size, 0.3 * size
        u = rng.uniform(0, 2 * np.pi, 4 * n)
        v = rng.uniform(0, 2 * np.pi, 4 * n)
        accept = rng.random(4 * n) < (big + small * np.cos(v)) / (big + small)
        u, v = u[accept][:n], v[accept][:n]
        while len(u) < n:  # pragma: no cover - acceptance rate is > 0.5
            u = np.append(u, rng.uniform(0, 2 * np.pi))
            v = np.append(v, rng.uniform(0, 2 * np.pi))
        ring = big + small * np.cos(v)
        # upright ring: axis along y
        pts = np.column_stack([ring * np.cos(u), small * np.sin(v), ring * np.sin(u)])
        return pts + np.array([0.0, 0.0, big + small]), 4 * np.pi**2 * big * small, big + small
    if kind == "cross":
        t = 0.18
        vertical = np.array([t, t, size])
        horizontal = np.array([0.8 * size, t, t])
        av = 2 * (t * t + 2 * t * size)
        ah = 2 * (t * t + 2 * t * 0.8 * size)
        n_v = int(round(n * av / (av + ah)))
        pv = _box_surface(rng, n_v, vertical) - np.array([t / 2, t / 2, 0.0])
        ph = _box_surface(rng, n - n_v, horizontal) - np.array([0.4 * size, t / 2, 0.0])
        ph[:, 2] += 0.6 * size
        return np.vstack([pv, ph]), av + ah, 0.4 * size
    raise ContractError(f"cannot sample primitive kind {kind!r}")


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    if weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    share = weights / weights.sum() * total
    base = np.floor(share).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(share - base), kind="stable")
    base[order[:rest]] += 1
    return base


def generate_synthetic_scene(seed: int, recipe: SceneRecipe | None = None,
                             class_map: ClassMap | None = None) -> tuple[PointCloud, LabelSet]:
    """Sample a deterministic toy LiDAR scene from ``recipe``.

    Points are spread uniformly over primitive surfaces; the total point count
    is drawn from ``recipe.n_points`` and split between primitives in
    proportion to area times density.  Every non-ground object gets its own
    instance id (1, 2, ...), ground points get 0.
    """
    recipe = recipe or default_recipe()
    rng = np.random.default_rng(seed)
    extent = recipe.extent

    # choose objects and their sizes / placements first
    objects = []  # (spec, size, yaw, centre_xy, footprint)
    grounds = []
    for spec in recipe.primitives:
        lo, hi = spec.count
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            if spec.kind == "ground":
                grounds.append(spec)
            else:
                objects.append([spec, float(rng.uniform(*spec.size)), float(rng.uniform(0, 2 * np.pi))])
    if not grounds and not objects:
        raise ContractError("scene recipe produced no primitives")

    # a 1-point trial sample fixes each object's shape (same seed reused below)
    geo = []
    for spec, size, yaw in objects:
        shape_seed = int(rng.integers(2**63))
        _, area, foot = _sample_primitive(np.random.default_rng(shape_seed), spec.kind, size, 1)
        geo.append((shape_seed, area, foot))

    placed: list[tuple[np.ndarray, float]] = []
    centres = []
    margin = 1.0
    for (spec, size, yaw), (_, _, foot) in zip(objects, geo):
        best = None
        for _ in range(200):
            c = rng.uniform(margin + foot, max(extent - margin - foot, margin + foot + 1e-3), size=2)
            if all(np.linalg.norm(c - pc) > foot + pf + 0.5 for pc, pf in placed):
                best = c
                break
        if best is None:
            best = c
        placed.append((best, foot))
        centres.append(best)

    weights = [extent * extent * recipe.ground_density for _ in grounds]
    weights += [g[1] * recipe.object_density for g in geo]
    total = int(rng.integers(recipe.n_points[0], recipe.n_points[1] + 1))
    counts = _allocate(total, np.asarray(weights, dtype=np.float64))

    positions, intensity, semantic, instance = [], [], [], []
    for spec, n in zip(grounds, counts[: len(grounds)]):
        xy = rng.uniform(0.0, extent, size=(n, 2))
        z = rng.normal(0.0, recipe.ground_noise, size=n)
        positions.append(np.column_stack([xy, z]))
        intensity.append(rng.normal(*spec.intensity, size=n))
        semantic.append(np.full(n, spec.class_id))
        instance.append(np.zeros(n, dtype=np.int64))
    for inst, ((spec, size, yaw), (shape_seed, _, _), c, n) in enumerate(
        zip(objects, geo, centres, counts[len(grounds):]), start=1
    ):
        pts, _, _ = _sample_primitive(np.random.default_rng(shape_seed), spec.kind, size, int(n))
        pts = pts @ _rot_z(yaw).T + np.array([c[0], c[1], 0.0])
        positions.append(pts)
        intensity.append(rng.normal(*spec.intensity, size=len(pts)))
        semantic.append(np.full(len(pts), spec.class_id))
        instance.append(np.full(len(pts), inst, dtype=np.int64))

    positions = np.vstack(positions) if positions else np.zeros((0, 3))
    appearance = np.clip(np.concatenate(intensity), 0.0, 1.0)[:, None]
    semantic = np.concatenate(semantic).astype(np.int64)
    instance = np.concatenate(instance)
    anomaly_ids = {p.class_id for p in recipe.primitives if p.anomaly}
    if class_map is not None:
        flags = class_map.anomaly_flags(semantic)
    else:
        flags = np.isin(semantic, sorted(anomaly_ids))
    return PointCloud(positions, appearance), LabelSet(semantic, instance, flags)


def recipe_ground_only(extent: float = 24.0, n_points: Sequence[int] = (1000, 1000)) -> SceneRecipe:
    return SceneRecipe((PrimitiveSpec("ground", 0),), extent=extent, n_points=tuple(n_points))


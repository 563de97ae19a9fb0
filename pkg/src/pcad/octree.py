"""Cubified octree over a point cloud.

All positions handled here live on a dyadic lattice (multiples of
``LATTICE = 2**-28`` m, see :func:`snap`).  The root origin and cell edges
are chosen on the same lattice, so leaf centres are lattice points too and
``(p - centre) + centre == p`` holds bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ContractError

LATTICE = 2.0**-28
MAX_DEPTH = 16
ROOT_PAD = 1e-6

# 27-neighborhood offsets, z-major, then y, then x
NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.int64
)
CENTER_OFFSET = 13


class OutOfCellWarning(RuntimeWarning):
    """A leaf-relative coordinate lies well outside its cell."""


def snap(x: np.ndarray) -> np.ndarray:
    """Round to the nearest multiple of :data:`LATTICE` (exact in fp64)."""
    return np.round(np.asarray(x, dtype=np.float64) / LATTICE) * LATTICE


def _part1by2(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton3(ijk: np.ndarray) -> np.ndarray:
    """Interleave integer cell coordinates (x lowest bit) into uint64 keys."""
    ijk = np.asarray(ijk, dtype=np.int64)
    return _part1by2(ijk[..., 0]) | (_part1by2(ijk[..., 1]) << np.uint64(1)) | (
        _part1by2(ijk[..., 2]) << np.uint64(2)
    )


@dataclass(frozen=True)
class LeafAddress:
    level: int
    key: int
    center: np.ndarray
    size: float


@dataclass(frozen=True, eq=False)
class Octree:
    """Occupied-cell structure of a point cloud down to ``depth`` levels.

    Level ``L`` has ``2**L`` cells per axis.  For every level the occupied
    cells are stored sorted by Morton key; ``point_node[L][i]`` is the row of
    point ``i``'s cell at level ``L`` and ``parent[L][j]`` the row of node
    ``j``'s parent at level ``L - 1``.
    """

    root_origin: np.ndarray
    root_size: float
    depth: int
    coords: tuple[np.ndarray, ...]
    keys: tuple[np.ndarray, ...]
    point_node: tuple[np.ndarray, ...]
    parent: tuple[np.ndarray | None, ...]

    def cell_size(self, level: int) -> float:
        return self.root_size / (1 << level)

    def n_nodes(self, level: int) -> int:
        return len(self.keys[level])

    def centers(self, level: int) -> np.ndarray:
        cell = self.cell_size(level)
        return self.root_origin + (2 * self.coords[level] + 1) * (cell / 2)

    @property
    def leaf_of_point(self) -> np.ndarray:
        return self.point_node[self.depth]

    def leaf_address(self, point: int) -> LeafAddress:
        node = int(self.point_node[self.depth][point])
        return self.node_address(self.depth, node)

    def node_address(self, level: int, node: int) -> LeafAddress:
        cell = self.cell_size(level)
        center = self.root_origin + (2 * self.coords[level][node] + 1) * (cell / 2)
        return LeafAddress(level, int(self.keys[level][node]), center, cell)

    def children_count(self, level: int) -> np.ndarray:
        """Occupied children per node of ``level - 1``."""
        return np.bincount(self.parent[level], minlength=self.n_nodes(level - 1))

    def relative_positions(self, positions: np.ndarray) -> np.ndarray:
        """Leaf-relative coordinates of every point (rows aligned with the cloud)."""
        return positions - self.centers(self.depth)[self.leaf_of_point]

    def global_positions(self, relative: np.ndarray) -> np.ndarray:
        return relative + self.centers(self.depth)[self.leaf_of_point]

    @cached_property
    def _neighbor_tables(self) -> dict[int, np.ndarray]:
        return {}

    def neighbor_table(self, level: int) -> np.ndarray:
        """``(M, 27)`` node rows of each node's neighbors, -1 where unoccupied."""
        if level < 0 or level > self.depth:
            raise ContractError(f"level {level} outside [0, {self.depth}]")
        cache = self._neighbor_tables
        if level not in cache:
            coords = self.coords[level]
            keys = self.keys[level]
            cand = coords[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]
            inside = np.all((cand >= 0) & (cand < (1 << level)), axis=2)
            ckeys = morton3(np.where(inside[..., None], cand, 0))
            pos = np.searchsorted(keys, ckeys)
            pos_c = np.minimum(pos, len(keys) - 1)
            found = inside & (keys[pos_c] == ckeys)
            cache[level] = np.where(found, pos_c, -1).astype(np.int64)
        return cache[level]


def build_octree(positions, depth: int = 6) -> Octree:
    """Build an octree whose root is the bounding box cubified and padded.

    ``positions`` may be a :class:`~pcad.data.PointCloud` or an ``(N, 3)``
    array; arrays are snapped to the lattice first.  Cells are half-open, so a
    point on an internal boundary belongs to the higher-index cell.
    """
    pts = getattr(positions, "positions", positions)
    pts = snap(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    if len(pts) == 0:
        raise ContractError("cannot build an octree over an empty cloud")
    if not 1 <= depth <= MAX_DEPTH:
        raise ContractError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    edge = float((hi - lo).max())
    size0 = edge + 2 * ROOT_PAD
    origin0 = (lo + hi) / 2 - size0 / 2
    origin = np.floor(origin0 / LATTICE) * LATTICE
    # root edge is a multiple of 2**(depth + 1) lattice units so every centre is a lattice point
    quantum = LATTICE * (1 << (depth + 1))
    need = size0 + float((origin0 - origin).max())
    root_size = float(np.ceil(need / quantum) * quantum)

    n_cells = 1 << depth
    cell = root_size / n_cells
    idx = np.floor((pts - origin) / cell).astype(np.int64)
    idx = np.clip(idx, 0, n_cells - 1)
    # exact boundary fix-up: lower corners are lattice points
    lower = origin + idx * cell
    idx -= (pts < lower).astype(np.int64)
    lower = origin + idx * cell
    idx += (pts >= lower + cell).astype(np.int64)
    idx = np.clip(idx, 0, n_cells - 1)

    coords, keys, point_node, parent = [], [], [], []
    for level in range(depth + 1):
        c = idx >> (depth - level)
        k = morton3(c)
        uk, first, inv = np.unique(k, return_index=True, return_inverse=True)
        coords.append(c[first])
        keys.append(uk)
        point_node.append(inv.ravel().astype(np.int64))
    parent.append(None)
    for level in range(1, depth + 1):
        pk = keys[level] >> np.uint64(3)
        parent.append(np.searchsorted(keys[level - 1], pk).astype(np.int64))
    return Octree(origin, root_size, depth, tuple(coords), tuple(keys), tuple(point_node), tuple(parent))


def relative_coords(p, leaf: LeafAddress) -> np.ndarray:
    """``p - centre`` of the leaf holding ``p``."""
    p = np.asarray(p, dtype=np.float64)
    rel = p - leaf.center
    if np.any(np.abs(rel) > leaf.size / 2):
        raise ContractError(f"point {p} lies outside leaf centred at {leaf.center}")
    return rel


def global_coords(rel, leaf: LeafAddress) -> np.ndarray:
    """Inverse of :func:`relative_coords`; warns when ``rel`` leaves the cell by > 50%."""
    rel = np.asarray(rel, dtype=np.float64)
    if np.any(np.abs(rel) > 1.5 * leaf.size / 2):
        warnings.warn(f"relative coordinate {rel} is outside its cell", OutOfCellWarning, stacklevel=2)
    return rel + leaf.center


def out_of_cell(rel: np.ndarray, size: float) -> np.ndarray:
    """Per-row flag for coordinates more than 1.5 half-edges from the centre."""
    return np.any(np.abs(rel) > 1.5 * size / 2, axis=-1)


def pool_to_level(features: np.ndarray, tree: Octree, level: int) -> np.ndarray:
    """Mean of occupied children: level ``level`` rows -> level ``level - 1`` rows.

    Computed as ``first_child + mean(child - first_child)`` so identical
    children pool back to exactly their shared value.
    """
    if level < 1 or level > tree.depth:
        raise ContractError(f"cannot pool from level {level}")
    features = np.asarray(features, dtype=np.float64)
    if len(features) != tree.n_nodes(level):
        raise ContractError(f"expected {tree.n_nodes(level)} rows at level {level}, got {len(features)}")
    par = tree.parent[level]
    n_par = tree.n_nodes(level - 1)
    # children are sorted by key, so each parent's first child is its first occurrence
    first = np.searchsorted(par, np.arange(n_par))
    ref = features[first]
    dev = features - ref[par]
    total = np.zeros((n_par,) + features.shape[1:])
    np.add.at(total, par, dev)
    counts = np.bincount(par, minlength=n_par).reshape((-1,) + (1,) * (features.ndim - 1))
    return ref + total / counts


def unpool_from_level(features: np.ndarray, tree: Octree, level: int) -> np.ndarray:
    """Broadcast level ``level - 1`` rows to their occupied children at ``level``."""
    if level < 1 or level > tree.depth:
        raise ContractError(f"cannot unpool to level {level}")
    features = np.asarray(features, dtype=np.float64)
    if len(features) != tree.n_nodes(level - 1):
        raise ContractError(f"expected {tree.n_nodes(level - 1)} rows at level {level - 1}, got {len(features)}")
    return features[tree.parent[level]]


def level_neighbors(tree: Octree, level: int) -> list[np.ndarray]:
    """Occupied 27-neighborhood (self included) of each node, in offset order."""
    table = tree.neighbor_table(level)
    return [row[row >= 0] for row in table]

"""Serpentine flattening of a 3D cloud into a 1D sequence.

Points are binned into square XY blocks (2 m by default), blocks are visited
in 2D Morton order, and inside each block points run along z, alternating
ascending / descending from one occupied block to the next.  A vertical
surface spanning two blocks therefore stays contiguous in the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_BLOCK_SIZE = 2.0


@dataclass(frozen=True)
class SequenceOrder:
    """A permutation ``perm`` (sequence position -> point) and its inverse."""

    perm: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_perm(cls, perm: np.ndarray) -> SequenceOrder:
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return cls(perm, inverse)

    def __len__(self) -> int:
        return len(self.perm)


def _positions(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "positions", cloud), dtype=np.float64).reshape(-1, 3)


def block_assign(cloud, block_size: float = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """``(N, 2)`` integer XY block coordinates relative to the cloud minimum."""
    if block_size <= 0:
        raise ContractError("block_size must be positive")
    pos = _positions(cloud)
    if len(pos) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    xy = pos[:, :2]
    return np.floor((xy - xy.min(axis=0)) / block_size).astype(np.int64)


def _part1by1(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x3333333333333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x5555555555555555)
    return v


def morton_key(bx, by):
    """2D Z-order key: bits of ``bx`` on even positions, ``by`` on odd ones.

    Accepts scalars (returns ``int``) or integer arrays (returns uint64).
    """
    bx_a, by_a = np.asarray(bx, dtype=np.int64), np.asarray(by, dtype=np.int64)
    if np.any(bx_a < 0) or np.any(by_a < 0):
        raise ContractError("block coordinates must be nonnegative")
    if np.any(bx_a >= 2**31) or np.any(by_a >= 2**31):
        raise ContractError("block coordinates must be below 2**31")
    key = _part1by1(bx_a) | (_part1by1(by_a) << np.uint64(1))
    return int(key) if key.ndim == 0 else key


def serpentine_permutation(cloud, block_size: float = DEFAULT_BLOCK_SIZE) -> SequenceOrder:
    """Order points block by block (Morton order), z alternating per block rank.

    The block at rank ``r`` among occupied blocks is sorted by ascending z
    when ``r`` is even and descending z when odd; ties keep input order.
    """
    pos = _positions(cloud)
    n = len(pos)
    if n == 0:
        return SequenceOrder.from_perm(np.zeros(0, dtype=np.int64))
    blocks = block_assign(pos, block_size)
    keys = morton_key(blocks[:, 0], blocks[:, 1])
    _, rank = np.unique(keys, return_inverse=True)
    rank = rank.ravel()
    z = pos[:, 2]
    zkey = np.where(rank % 2 == 0, z, -z)
    perm = np.lexsort((np.arange(n), zkey, rank))
    return SequenceOrder.from_perm(perm)


def apply_order(features: np.ndarray, order: SequenceOrder) -> np.ndarray:
    features = np.asarray(features)
    if len(features) != len(order):
        raise ContractError(f"{len(features)} rows for an order of length {len(order)}")
    return features[order.perm]


def invert_order(sequence: np.ndarray, order: SequenceOrder) -> np.ndarray:
    sequence = np.asarray(sequence)
    if len(sequence) != len(order):
        raise ContractError(f"{len(sequence)} rows for an order of length {len(order)}")
    return sequence[order.inverse]

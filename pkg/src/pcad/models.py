"""Scene reconstructor and dual-head open-set detector.

Both networks share one encoder design: a per-point embedding mean-pooled
into octree leaves, then ``len(widths)`` stages of (octree convolution,
bidirectional Mamba blocks over the serpentine order of that level's node
centres, mean pooling), and a bottleneck convolution.  Decoders climb back
with (unpool, octree convolution) per level and finish with per-point linear
layers.

The detector's semantic head concatenates encoder skips and the raw features
(pooled to each level) before every upsampling convolution, and sees the raw
per-point features again in its final layers.  The anomaly head uses only
the upsampled bottleneck.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RowMap, Tensor
from .data import LabelSet, PointCloud, compute_delta
from .errors import ContractError
from .nn import MLP, Module
from .octree import Octree, build_octree
from .serpentine import serpentine_permutation
from .ssm import MambaBlock, OctreeConv, SequenceMaps, bidirectional_apply, neighbor_map

HEIGHT_SCALE = 4.0


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    d_state: int = 16
    blocks_per_stage: int = 2
    depth: int = 6
    block_size: float = 2.0
    scan_chunk: int | None = None
    head_hidden: int = 32


class SceneGeometry:
    """Everything about a scene's layout that stays fixed during training.

    Holds the octree, the per-level neighbor / pooling row maps, the
    serpentine sequence maps and the raw point features.
    """

    def __init__(self, cloud: PointCloud, cfg: ModelConfig):
        if cloud.n == 0:
            raise ContractError("cannot build geometry for an empty cloud")
        n_stages = len(cfg.widths)
        if cfg.depth - n_stages < 0:
            raise ContractError(f"depth {cfg.depth} too shallow for {n_stages} stages")
        self.cloud = cloud
        self.tree: Octree = build_octree(cloud, cfg.depth)
        tree = self.tree
        D = cfg.depth
        self.depth = D
        self.levels = list(range(D, D - n_stages - 1, -1))
        self.leaf_half = tree.cell_size(D) / 2
        leaf = tree.leaf_of_point
        n_leaf = tree.n_nodes(D)
        self.point_pool = RowMap.segment_mean(leaf, n_leaf)
        self.point_unpool = RowMap.gather(leaf, n_leaf)
        self.neighbors = {L: neighbor_map(tree.neighbor_table(L)) for L in self.levels}
        self.sequences = {
            L: SequenceMaps(serpentine_permutation(tree.centers(L), cfg.block_size))
            for L in self.levels[:-1]
        }
        self.pool = {}
        self.unpool = {}
        for L in self.levels[:-1]:
            par = tree.parent[L]
            self.pool[L] = RowMap.segment_mean(par, tree.n_nodes(L - 1))
            self.unpool[L] = RowMap.gather(par, tree.n_nodes(L - 1))

        self.relative = tree.relative_positions(cloud.positions)
        self.targets = np.concatenate([self.relative, cloud.appearance], axis=1)
        self.channel_scale = np.concatenate(
            [np.full(3, self.leaf_half), np.ones(cloud.appearance.shape[1])]
        )
        height = (cloud.positions[:, 2:3] - cloud.positions[:, 2].min()) / HEIGHT_SCALE
        self.raw = np.concatenate([self.relative / self.leaf_half, cloud.appearance, height], axis=1)
        # raw features at every decoder level, for reinjection
        self.raw_levels = {D: self.point_pool.apply(self.raw)}
        for L in self.levels[:-1]:
            self.raw_levels[L - 1] = self.pool[L].apply(self.raw_levels[L])

    @property
    def n_points(self) -> int:
        return self.cloud.n

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    def delta_features(self, reconstruction: np.ndarray) -> np.ndarray:
        """Detector input: scaled signed difference plus its norm."""
        delta = compute_delta(self.targets / self.channel_scale, reconstruction / self.channel_scale)
        return delta.stacked()


def raw_channels(n_appearance: int) -> int:
    return 3 + n_appearance + 1


def delta_channels(n_appearance: int) -> int:
    return 3 + n_appearance + 1


class Encoder(Module):
    def __init__(self, c_in: int, cfg: ModelConfig, rng: np.random.Generator):
        w = cfg.widths
        self.cfg = cfg
        self.embed = MLP([c_in, w[0], w[0]], rng)
        self.convs = []
        self.blocks = []
        prev = w[0]
        for width in w:
            self.convs.append(OctreeConv(prev, width, rng))
            self.blocks.append(
                [
                    MambaBlock(width, cfg.d_state, rng, cfg.scan_chunk)
                    for _ in range(2 * cfg.blocks_per_stage)
                ]
            )
            prev = width
        self.bottleneck = OctreeConv(prev, prev, rng)

    def __call__(self, point_features: Tensor, geo: SceneGeometry) -> tuple[list[Tensor], Tensor]:
        x = ad.row_map(self.embed(point_features), geo.point_pool)
        skips = []
        for s, conv in enumerate(self.convs):
            L = geo.levels[s]
            x = conv(x, geo.neighbors[L])
            blocks = self.blocks[s]
            for j in range(0, len(blocks), 2):
                x = bidirectional_apply(x, geo.sequences[L], blocks[j], blocks[j + 1])
            skips.append(x)
            x = ad.row_map(x, geo.pool[L])
        x = self.bottleneck(x, geo.neighbors[geo.levels[-1]])
        return skips, x


class Decoder(Module):
    """Unpool + octree conv per level; ``extra`` adds input channels per level."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, extra: list[int] | None = None):
        w = cfg.widths
        extra = extra or [0] * len(w)
        self.convs = []
        incoming = w[-1]
        for s in reversed(range(len(w))):
            self.convs.append(OctreeConv(incoming + extra[s], w[s], rng))
            incoming = w[s]

    def __call__(self, x: Tensor, geo: SceneGeometry, extras=None) -> Tensor:
        n_stages = len(self.convs)
        for i, conv in enumerate(self.convs):
            s = n_stages - 1 - i
            L = geo.levels[s]
            x = ad.row_map(x, geo.unpool[L])
            if extras is not None:
                x = ad.concat([x] + list(extras(s, L)), axis=1)
            x = conv(x, geo.neighbors[L])
        return x


class Reconstructor(Module):
    """Autoencoder producing leaf-relative xyz and appearance per point."""

    def __init__(self, n_appearance: int, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_appearance = n_appearance
        self.encoder = Encoder(raw_channels(n_appearance), cfg, rng)
        self.decoder = Decoder(cfg, rng)
        h = cfg.head_hidden
        self.head = MLP([cfg.widths[0], h, h, 3 + n_appearance], rng)

    def __call__(self, geo: SceneGeometry) -> Tensor:
        _, z = self.encoder(Tensor(geo.raw), geo)
        leaf = self.decoder(z, geo)
        out = self.head(ad.row_map(leaf, geo.point_unpool))
        rel = ad.mul(ad.tanh(out[:, :3]), geo.leaf_half)
        app = ad.sigmoid(out[:, 3:])
        return ad.concat([rel, app], axis=1)


def reconstruct_scene(geo: SceneGeometry, model: Reconstructor) -> np.ndarray:
    """Per-point reconstruction (relative xyz in metres, then appearance)."""
    return model(geo).data


def reconstruction_loss(original, reconstructed, mode: str = "mse", mask=None,
                        leaf_half: float | None = None) -> Tensor:
    """Masked reconstruction loss.

    ``mse`` averages squared error over all channels of the selected points;
    with ``leaf_half`` the xyz channels are first divided by it so geometry
    and appearance errors share the same unit range.  ``bce`` maps the xyz
    channels affinely from ``[-leaf_half, leaf_half]`` into [0, 1] and
    averages per-channel binary cross-entropy.
    """
    orig = original if isinstance(original, Tensor) else Tensor(original)
    rec = reconstructed if isinstance(reconstructed, Tensor) else Tensor(reconstructed)
    if orig.shape != rec.shape:
        raise ContractError(f"shape mismatch: {orig.shape} vs {rec.shape}")
    if mask is not None:
        idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
        orig, rec = orig[idx], rec[idx]
    if mode == "mse":
        diff = ad.add(orig, ad.neg(rec))
        if leaf_half is not None:
            scale = np.ones(orig.shape[1])
            scale[:3] = 1.0 / leaf_half
            diff = ad.mul(diff, scale)
        return ad.mean(ad.mul(diff, diff))
    if mode == "bce":
        if leaf_half is None:
            raise ContractError("bce mode needs leaf_half to normalize xyz")
        shift = np.zeros(orig.shape[1])
        scale = np.ones(orig.shape[1])
        shift[:3], scale[:3] = 0.5, 0.5 / leaf_half
        target = orig.data * scale + shift
        pred = ad.add(ad.mul(rec, scale), shift)
        return ad.binary_cross_entropy(pred, np.clip(target, 0.0, 1.0))
    raise ContractError(f"unknown reconstruction loss mode {mode!r}")


class Detector(Module):
    """Shared backbone with a semantic head (skips + raw) and an anomaly head."""

    def __init__(self, n_in: int, n_raw: int, k: int, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.k = k
        self.n_raw = n_raw
        w = cfg.widths
        h = cfg.head_hidden
        self.backbone = Encoder(n_in, cfg, rng)
        self.semantic = Decoder(cfg, rng, extra=[w[s] + n_raw for s in range(len(w))])
        self.semantic_head = MLP([w[0] + n_raw, h, h, k], rng)
        self.anomaly = Decoder(cfg, rng)
        self.anomaly_head = MLP([w[0], h, h, 1], rng)

    def __call__(self, inputs: np.ndarray, raw: np.ndarray, geo: SceneGeometry,
                 zero_skips: bool = False) -> tuple[Tensor, Tensor]:
        if len(inputs) != geo.n_points or len(raw) != geo.n_points:
            raise ContractError("detector inputs are not aligned with the scene")
        skips, z = self.backbone(Tensor(inputs), geo)
        if zero_skips:
            skips = [Tensor(np.zeros_like(s.data)) for s in skips]
        # raw features pooled level by level, matching SceneGeometry.raw_levels but from `raw`
        raw_levels = {geo.depth: geo.point_pool.apply(raw)}
        for L in geo.levels[:-1]:
            raw_levels[L - 1] = geo.pool[L].apply(raw_levels[L])

        def extras(s, L):
            return [skips[s], Tensor(raw_levels[L])]

        sem_leaf = self.semantic(z, geo, extras)
        sem_pts = ad.concat([ad.row_map(sem_leaf, geo.point_unpool), Tensor(raw)], axis=1)
        logits = self.semantic_head(sem_pts)

        ano_leaf = self.anomaly(z, geo)
        score = ad.sigmoid(self.anomaly_head(ad.row_map(ano_leaf, geo.point_unpool)))
        return score.reshape(geo.n_points), logits


def detector_forward(delta, raw, geo: SceneGeometry, model: Detector, zero_skips: bool = False):
    """Plain-array ``(A, C)``: anomaly scores in [0, 1] and ``k`` logits per point."""
    inputs = delta.stacked() if hasattr(delta, "stacked") else np.asarray(delta)
    A, C = model(inputs, np.asarray(raw), geo, zero_skips=zero_skips)
    return A.data, C.data


def total_loss(A: Tensor, C: Tensor, anomaly_gt, semantic_gt) -> tuple[Tensor, Tensor, Tensor]:
    """``L = BCE(A, G_A) + CE(C on non-anomalous points, G_C)``; returns (L, L_A, L_C)."""
    anomaly_gt = np.asarray(anomaly_gt, dtype=bool)
    semantic_gt = np.asarray(semantic_gt, dtype=np.int64)
    l_a = ad.binary_cross_entropy(A, anomaly_gt.astype(np.float64))
    keep = np.nonzero(~anomaly_gt)[0]
    if len(keep) == 0:
        warnings.warn("no non-anomalous points: semantic loss set to 0", RuntimeWarning, stacklevel=2)
        l_c = ad.mul(ad.sum(C), 0.0)
    else:
        l_c = ad.cross_entropy(C[keep], semantic_gt[keep])
    return ad.add(l_a, l_c), l_a, l_c


def semantic_targets(labels: LabelSet, known_ids: list[int]) -> np.ndarray:
    """Map semantic ids of known classes to dense ``[0, k)``; others to -1."""
    known = np.array(sorted(known_ids), dtype=np.int64)
    pos = np.searchsorted(known, labels.semantic)
    hit = (pos < len(known)) & (known[np.minimum(pos, len(known) - 1)] == labels.semantic)
    return np.where(hit, pos, -1)

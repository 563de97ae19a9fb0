"""Selective state-space scan, Mamba block and octree convolution.

The recurrence, per channel ``c`` and state ``j``::

    h[t, c, j] = a[t, c] * h[t-1, c, j] + dt[t, c] * B[t, j] * x[t, c]
    y[t, c]    = sum_j C[t, j] * h[t, c, j] + D[c] * x[t, c]

with ``a = exp(dt * A)`` (one scalar decay per channel, Mamba-2 style) and
the Euler rule ``dt * B`` on the input path.  :func:`selective_scan` wraps the
whole scan as one autodiff node; its backward pass is another linear scan run
in reverse over the adjoint state.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import RowMap, Tensor
from .errors import ContractError
from .nn import Linear, Module, param
from .serpentine import SequenceOrder

DEFAULT_CHUNK = 64


def discretize(A, B_t, dt_t):
    """Per-step discretization: ``(exp(dt * A), dt * B)``.

    ``A`` and ``dt_t`` have one entry per channel, ``B_t`` one per state; the
    returned input matrix has shape ``(channels, states)``.
    """
    A, dt_t, B_t = np.asarray(A, float), np.asarray(dt_t, float), np.asarray(B_t, float)
    return np.exp(dt_t * A), dt_t[..., None] * B_t[..., None, :]


# ---------------------------------------------------------------------------
# linear recurrence kernels: h[t] = a[t] * h[t-1] + u[t], h[-1] = 0


def linear_scan_sequential(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Reference loop. ``a``: (T, d), ``u``: (T, d, n) -> ``h``: (T, d, n)."""
    h = np.empty_like(u)
    state = np.zeros(u.shape[1:])
    for t in range(len(u)):
        state = a[t][:, None] * state + u[t]
        h[t] = state
    return h


def linear_scan_chunked(a: np.ndarray, u: np.ndarray, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Same recurrence, scanned within chunks then stitched across them.

    Inside a chunk the prefix is built by log-step doubling with the
    associative combine ``(a1, u1) o (a2, u2) = (a1 * a2, a2 * u1 + u2)``;
    each chunk then receives the carried state of its predecessor.
    """
    if chunk < 1:
        raise ContractError("chunk must be >= 1")
    T = len(u)
    if T == 0:
        return np.empty_like(u)
    d = u.shape[1:]
    L = min(chunk, T)
    K = -(-T // L)
    pad = K * L - T
    aa = np.concatenate([a, np.ones((pad,) + a.shape[1:])]) if pad else a.copy()
    uu = np.concatenate([u, np.zeros((pad,) + d)]) if pad else u.copy()
    aa = aa.reshape((K, L) + a.shape[1:])
    uu = uu.reshape((K, L) + d)
    step = 1
    while step < L:
        uu[:, step:] = aa[:, step:, :, None] * uu[:, :-step] + uu[:, step:]
        aa[:, step:] = aa[:, step:] * aa[:, :-step]
        step *= 2
    carry = np.zeros(d)
    for k in range(K):
        if k:
            uu[k] += aa[k][:, :, None] * carry
        carry = uu[k, -1]
    return uu.reshape((K * L,) + d)[:T]


def _scan(a, u, chunk):
    return linear_scan_sequential(a, u) if chunk is None else linear_scan_chunked(a, u, chunk)


def scan_forward(x, dt, A, B, C, D, chunk: int | None = DEFAULT_CHUNK):
    """Run the selective scan on plain arrays. Returns ``(y, h)``."""
    a = np.exp(dt * A)
    u = (dt * x)[:, :, None] * B[:, None, :]
    h = _scan(a, u, chunk)
    y = np.einsum("tdn,tn->td", h, C) + D * x
    return y, h


def selective_scan(x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   chunk: int | None = DEFAULT_CHUNK) -> Tensor:
    """Differentiable selective scan over a sequence ``x`` of shape (T, d)."""
    xv, dtv, Av, Bv, Cv, Dv = (t.data for t in (x, dt, A, B, C, D))
    T = len(xv)
    a = np.exp(dtv * Av)
    y, h = scan_forward(xv, dtv, Av, Bv, Cv, Dv, chunk)

    def _bw(gy):
        if T == 0:
            return tuple(np.zeros_like(t.data) for t in (x, dt, A, B, C, D))
        dC = np.einsum("td,tdn->tn", gy, h)
        dD = (gy * xv).sum(axis=0)
        v = gy[:, :, None] * Cv[:, None, :]
        # adjoint: lam[t] = v[t] + a[t+1] * lam[t+1], run as a forward scan on reversed time
        a_rev = np.concatenate([np.zeros((1,) + a.shape[1:]), a[::-1][:-1]])
        lam = _scan(a_rev, v[::-1], chunk)[::-1]
        dtx = dtv * xv
        dB = np.einsum("tdn,td->tn", lam, dtx)
        w = np.einsum("tdn,tn->td", lam, Bv)
        dx = gy * Dv + w * dtv
        h_prev = np.concatenate([np.zeros((1,) + h.shape[1:]), h[:-1]])
        da = np.einsum("tdn,tdn->td", lam, h_prev)
        dlog = da * a
        ddt = w * xv + dlog * Av
        dA = (dlog * dtv).sum(axis=0)
        return dx, ddt, dA, dB, dC, dD

    return ad.custom_op(y, (x, dt, A, B, C, D), _bw)


# ---------------------------------------------------------------------------
# parameterized modules


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """Input-dependent projections producing ``dt``, ``B`` and ``C``.

    The decay is stored as ``A_log`` with ``A = -exp(A_log)`` so it stays
    strictly negative.
    """

    def __init__(self, d: int, n: int, rng: np.random.Generator):
        self.d, self.n = d, n
        self.A_log = param(np.log(rng.uniform(1.0, 16.0, size=d)))
        lim = np.sqrt(3.0 / d)
        self.W_B = param(rng.uniform(-lim, lim, size=(d, n)))
        self.W_C = param(rng.uniform(-lim, lim, size=(d, n)))
        self.W_dt = param(rng.uniform(-lim, lim, size=(d, d)) * 0.1)
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        self.b_dt = param(_inv_softplus(dt0))
        self.D = param(np.ones(d))

    def A(self) -> Tensor:
        return ad.neg(ad.exp(self.A_log))

    def __call__(self, xs: Tensor, chunk: int | None = DEFAULT_CHUNK) -> Tensor:
        dt = ad.softplus(ad.add(ad.matmul(xs, self.W_dt), self.b_dt))
        B = ad.matmul(xs, self.W_B)
        C = ad.matmul(xs, self.W_C)
        return selective_scan(xs, dt, self.A(), B, C, self.D, chunk)

    def project(self, x: np.ndarray):
        """Plain-array ``(dt, A, B, C)`` for a sequence ``x``."""
        z = x @ self.W_dt.data + self.b_dt.data
        dt = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
        return dt, -np.exp(self.A_log.data), x @ self.W_B.data, x @ self.W_C.data


def selective_scan_sequential(x_seq: np.ndarray, params: SsmParams) -> np.ndarray:
    x_seq = np.asarray(x_seq, dtype=np.float64)
    dt, A, B, C = params.project(x_seq)
    return scan_forward(x_seq, dt, A, B, C, params.D.data, chunk=None)[0]


def selective_scan_chunked(x_seq: np.ndarray, params: SsmParams, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    x_seq = np.asarray(x_seq, dtype=np.float64)
    dt, A, B, C = params.project(x_seq)
    return scan_forward(x_seq, dt, A, B, C, params.D.data, chunk=chunk)[0]


class MambaBlock(Module):
    """Pre-norm -> (scan branch, gate branch) -> scan * silu(gate) -> out proj -> residual."""

    def __init__(self, d: int, n: int, rng: np.random.Generator, chunk: int | None = DEFAULT_CHUNK):
        self.d = d
        self.chunk = chunk
        self.norm_scale = param(np.ones(d))
        self.in_proj = Linear(d, 2 * d, rng)
        self.ssm = SsmParams(d, n, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        d = self.d
        xz = self.in_proj(ad.rms_norm(x, self.norm_scale))
        xs, gate = xz[:, :d], xz[:, d:]
        y = self.ssm(xs, self.chunk)
        return ad.add(self.out_proj(ad.mul(y, ad.silu(gate))), x)


def mamba_block_forward(features, block: MambaBlock) -> Tensor:
    return block(features if isinstance(features, Tensor) else Tensor(features))


class SequenceMaps:
    """Row maps for moving features into and out of a serpentine sequence."""

    def __init__(self, order: SequenceOrder):
        n = len(order)
        self.order = order
        self.to_seq = RowMap.gather(order.perm, n)
        self.from_seq = RowMap.gather(order.inverse, n)
        self.flip = RowMap.gather(np.arange(n)[::-1], n)


def bidirectional_apply(features: Tensor, order, block_fwd: MambaBlock, block_bwd: MambaBlock) -> Tensor:
    """Run one block along the sequence and one against it; sum; restore point order."""
    maps = order if isinstance(order, SequenceMaps) else SequenceMaps(order)
    if features.shape[0] != len(maps.order):
        raise ContractError(f"{features.shape[0]} rows for an order of length {len(maps.order)}")
    seq = ad.row_map(features, maps.to_seq)
    fwd = block_fwd(seq)
    bwd = ad.row_map(block_bwd(ad.row_map(seq, maps.flip)), maps.flip)
    return ad.row_map(ad.add(fwd, bwd), maps.from_seq)


class OctreeConv(Module):
    """27-neighborhood convolution on occupied octree nodes followed by SiLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.c_in, self.c_out = c_in, c_out
        lim = np.sqrt(6.0 / (9 * c_in + c_out))
        self.weight = param(rng.uniform(-lim, lim, size=(27, c_in, c_out)))
        self.bias = param(np.zeros(c_out))

    def __call__(self, features: Tensor, neighbors: RowMap) -> Tensor:
        m = features.shape[0]
        stacked = ad.row_map(features, neighbors).reshape(m, 27 * self.c_in)
        w = self.weight.reshape(27 * self.c_in, self.c_out)
        return ad.silu(ad.add(ad.matmul(stacked, w), self.bias))


def neighbor_map(table: np.ndarray) -> RowMap:
    """Row map stacking each node's 27 neighbors (zeros where unoccupied)."""
    m = len(table)
    return RowMap.gather(table.reshape(-1), m)


def octree_conv(leaf_features, tree, level: int, kernel: OctreeConv) -> Tensor:
    x = leaf_features if isinstance(leaf_features, Tensor) else Tensor(leaf_features)
    return kernel(x, neighbor_map(tree.neighbor_table(level)))

import numpy as np
import pytest

from pcad import autodiff as ad
from pcad.autodiff import Tensor
from pcad.octree import CENTER_OFFSET, build_octree
from pcad.optim import grad_check
from pcad.serpentine import SequenceOrder, serpentine_permutation
from pcad.ssm import (
    MambaBlock,
    OctreeConv,
    SsmParams,
    bidirectional_apply,
    discretize,
    linear_scan_chunked,
    linear_scan_sequential,
    mamba_block_forward,
    octree_conv,
    scan_forward,
    selective_scan,
    selective_scan_chunked,
    selective_scan_sequential,
)


def test_discretize_examples():
    a, b = discretize(np.array([-1.0]), np.array([2.0, 3.0]), np.array([np.log(2)]))
    assert a[0] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(b, [[2 * np.log(2), 3 * np.log(2)]])
    a, b = discretize(np.array([-3.0]), np.array([1.0]), np.array([1e-12]))
    assert a[0] == pytest.approx(1.0) and abs(b).max() < 1e-11
    dt = np.random.default_rng(0).uniform(1e-3, 50, 100)
    a, _ = discretize(-np.random.default_rng(1).uniform(0.01, 5, 100), np.ones(1), dt)
    assert np.all((a > 0) & (a < 1))


def test_hand_unrolled_recurrence():
    # a = .5, B-bar = 1, C = 1, D = 0, x = (1, 0, 0)  ->  y = (1, .5, .25)
    dt = np.ones((3, 1))
    y, _ = scan_forward(np.array([[1.0], [0.0], [0.0]]), dt, np.array([np.log(0.5)]),
                        np.ones((3, 1)), np.ones((3, 1)), np.zeros(1), chunk=None)
    np.testing.assert_allclose(y.ravel(), [1.0, 0.5, 0.25], atol=1e-15)


def test_memoryless_when_decay_vanishes(rng):
    x = rng.normal(size=(5, 2))
    dt = rng.uniform(0.5, 1.0, size=(5, 2))
    B, C = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    D = rng.normal(size=2)
    y, _ = scan_forward(x, dt, np.full(2, -1e4), B, C, D, chunk=None)
    expect = (B * C).sum(1)[:, None] * dt * x + D * x
    np.testing.assert_allclose(y, expect, atol=1e-12)


def test_empty_sequence(rng):
    params = SsmParams(4, 3, rng)
    assert selective_scan_sequential(np.zeros((0, 4)), params).shape == (0, 4)
    assert selective_scan_chunked(np.zeros((0, 4)), params, 8).shape == (0, 4)


@pytest.mark.parametrize("chunk", [1, 7, 16, 257])
def test_chunked_matches_sequential(chunk, rng):
    params = SsmParams(8, 4, rng)
    x = rng.normal(size=(257, 8))
    ref = selective_scan_sequential(x, params)
    assert np.abs(selective_scan_chunked(x, params, chunk) - ref).max() < 1e-12


def test_linear_scan_chunk_validation(rng):
    with pytest.raises(ValueError):
        linear_scan_chunked(np.ones((3, 1)), np.ones((3, 1, 1)), 0)
    a, u = rng.random((20, 3)), rng.normal(size=(20, 3, 2))
    np.testing.assert_allclose(linear_scan_chunked(a, u, 6), linear_scan_sequential(a, u), atol=1e-14)


def test_state_bounded_by_geometric_series(rng):
    for _ in range(10):
        T, d, n = 200, 4, 3
        x = rng.normal(size=(T, d))
        dt = rng.uniform(0.01, 0.5, size=(T, d))
        A = -rng.uniform(0.5, 3, size=d)
        B = rng.normal(size=(T, n))
        _, h = scan_forward(x, dt, A, B, rng.normal(size=(T, n)), np.zeros(d), chunk=None)
        a_max = np.exp(dt * A).max()
        u_max = np.abs((dt * x)[:, :, None] * B[:, None, :]).max()
        assert np.abs(h).max() <= u_max / (1 - a_max) + 1e-12


def test_scan_gradient(rng):
    T, d, n = 12, 3, 2
    x = Tensor(rng.normal(size=(T, d)), requires_grad=True)
    dt = Tensor(rng.uniform(0.1, 1.0, size=(T, d)), requires_grad=True)
    A = Tensor(-rng.uniform(0.5, 2, size=d), requires_grad=True)
    B = Tensor(rng.normal(size=(T, n)), requires_grad=True)
    C = Tensor(rng.normal(size=(T, n)), requires_grad=True)
    D = Tensor(rng.normal(size=d), requires_grad=True)
    w = rng.normal(size=(T, d))
    for chunk in (None, 5):
        f = lambda: ad.sum(ad.mul(selective_scan(x, dt, A, B, C, D, chunk), w))  # noqa: E731
        assert grad_check(f, [x, dt, A, B, C, D], n_samples=200) < 1e-6


def test_mamba_block_shapes_and_zero_input(rng):
    block = MambaBlock(6, 4, rng)
    for T in (1, 9):
        assert mamba_block_forward(rng.normal(size=(T, 6)), block).shape == (T, 6)
    # zero biases: zero input gives zero output
    block.in_proj.bias.data[:] = 0
    block.out_proj.bias.data[:] = 0
    np.testing.assert_array_equal(mamba_block_forward(np.zeros((4, 6)), block).data, 0)


def test_mamba_block_gradient(rng):
    block = MambaBlock(5, 3, rng)
    x = Tensor(rng.normal(size=(15, 5)), requires_grad=True)
    w = rng.normal(size=(15, 5))
    err = grad_check(lambda: ad.sum(ad.mul(block(x), w)), block.parameters() + [x], n_samples=150)
    assert err < 1e-3


def test_bidirectional_palindrome(rng):
    fwd = MambaBlock(4, 3, rng)
    half = rng.normal(size=(5, 4))
    x = np.vstack([half, half[::-1]])
    order = SequenceOrder.from_perm(np.arange(10))
    y = bidirectional_apply(Tensor(x), order, fwd, fwd).data
    np.testing.assert_allclose(y, y[::-1], atol=1e-13)


def test_bidirectional_reversal_swaps_blocks(rng):
    fwd, bwd = MambaBlock(4, 3, rng), MambaBlock(4, 3, rng)
    x = rng.normal(size=(11, 4))
    order = SequenceOrder.from_perm(np.arange(11))
    y = bidirectional_apply(Tensor(x), order, fwd, bwd).data
    y_rev = bidirectional_apply(Tensor(x[::-1].copy()), order, bwd, fwd).data
    np.testing.assert_allclose(y_rev, y[::-1], atol=1e-13)


def test_bidirectional_restores_point_order(rng):
    fwd, bwd = MambaBlock(3, 2, rng), MambaBlock(3, 2, rng)
    pts = rng.uniform(0, 6, size=(30, 3))
    order = serpentine_permutation(pts)
    x = rng.normal(size=(30, 3))
    y = bidirectional_apply(Tensor(x), order, fwd, bwd).data
    seq = x[order.perm]
    expect = fwd(Tensor(seq)).data + bwd(Tensor(seq[::-1].copy())).data[::-1]
    np.testing.assert_allclose(y, expect[order.inverse], atol=1e-13)
    one = bidirectional_apply(Tensor(x[:1]), SequenceOrder.from_perm(np.arange(1)), fwd, bwd).data
    np.testing.assert_allclose(one, fwd(Tensor(x[:1])).data + bwd(Tensor(x[:1])).data, atol=1e-15)
    with pytest.raises(ValueError):
        bidirectional_apply(Tensor(x[:5]), order, fwd, bwd)


def silu(z):
    return z / (1 + np.exp(-z))


def test_octree_conv_single_node(rng):
    tree = build_octree(np.array([[1.0, 1, 1]]), depth=3)
    conv = OctreeConv(3, 2, rng)
    conv.bias.data = rng.normal(size=2)
    f = rng.normal(size=(1, 3))
    out = octree_conv(f, tree, 3, conv).data
    np.testing.assert_allclose(out, silu(f @ conv.weight.data[CENTER_OFFSET] + conv.bias.data), atol=1e-15)


def test_octree_conv_zero_weights(rng):
    tree = build_octree(rng.uniform(0, 4, size=(100, 3)), depth=4)
    conv = OctreeConv(3, 2, rng)
    conv.weight.data[:] = 0
    conv.bias.data = np.array([0.3, -1.0])
    out = octree_conv(rng.normal(size=(tree.n_nodes(4), 3)), tree, 4, conv).data
    np.testing.assert_allclose(out, np.tile(silu(conv.bias.data), (tree.n_nodes(4), 1)), atol=1e-15)


def test_octree_conv_matches_loop(rng):
    tree = build_octree(rng.uniform(0, 4, size=(80, 3)), depth=3)
    conv = OctreeConv(2, 3, rng)
    f = rng.normal(size=(tree.n_nodes(3), 2))
    out = octree_conv(f, tree, 3, conv).data
    table = tree.neighbor_table(3)
    for i in range(len(f)):
        acc = conv.bias.data.copy()
        for o, j in enumerate(table[i]):
            if j >= 0:
                acc += f[j] @ conv.weight.data[o]
        np.testing.assert_allclose(out[i], silu(acc), atol=1e-13)


def test_octree_conv_translation_equivariance(rng):
    pts = rng.uniform(0, 8, size=(200, 3))
    tree = build_octree(pts, depth=4)
    shifted = build_octree(pts + np.array([tree.cell_size(4), 0, 0]), depth=4)
    np.testing.assert_array_equal(tree.coords[4], shifted.coords[4])
    conv = OctreeConv(3, 4, rng)
    f = rng.normal(size=(tree.n_nodes(4), 3))
    np.testing.assert_array_equal(octree_conv(f, tree, 4, conv).data, octree_conv(f, shifted, 4, conv).data)


def test_octree_conv_gradient(rng):
    tree = build_octree(rng.uniform(0, 4, size=(60, 3)), depth=3)
    conv = OctreeConv(2, 3, rng)
    f = Tensor(rng.normal(size=(tree.n_nodes(3), 2)), requires_grad=True)
    w = rng.normal(size=(tree.n_nodes(3), 3))
    err = grad_check(lambda: ad.sum(ad.mul(octree_conv(f, tree, 3, conv), w)), conv.parameters() + [f])
    assert err < 1e-6

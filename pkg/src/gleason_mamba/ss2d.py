"""2-D selective scan: four directional traversals of a feature map, one S6
per direction, fold back and sum.

Direction names map onto the cross-scan rasterizations:

    row_forward   top-left -> bottom-right, row-major
    row_reverse   bottom-right -> top-left, row-major reversed
    col_forward   column-major starting top-left
    col_reverse   column-major reversed
"""
import numpy as np

from .core.ops import DifferentiableOp, DimensionError, as_tensor
from .s6 import S6Params, s6_backward, s6_forward

DIRECTIONS = ("row_forward", "row_reverse", "col_forward", "col_reverse")


def traversal(H, W, direction):
    """Flat grid indices ``h * W + w`` in visiting order."""
    grid = np.arange(H * W).reshape(H, W)
    if direction == "row_forward":
        return grid.reshape(-1)
    if direction == "row_reverse":
        return grid.reshape(-1)[::-1].copy()
    if direction == "col_forward":
        return grid.T.reshape(-1)
    if direction == "col_reverse":
        return grid.T.reshape(-1)[::-1].copy()
    raise ValueError(f"unknown scan direction {direction!r}")


def scan_expand(fmap):
    """``(B, C, H, W)`` -> four token sequences ``(B, H*W, C)`` in :data:`DIRECTIONS` order."""
    fmap = as_tensor(fmap)
    B, C, H, W = fmap.shape
    flat = fmap.reshape(B, C, H * W)
    return [np.ascontiguousarray(flat[:, :, traversal(H, W, k)].transpose(0, 2, 1))
            for k in DIRECTIONS]


def scan_merge(seqs, H, W):
    """Invert each traversal and sum the four grids. Returns ``(B, C, H, W)``."""
    if len(seqs) != len(DIRECTIONS):
        raise DimensionError(f"expected {len(DIRECTIONS)} sequences, got {len(seqs)}")
    grids = []
    for seq, k in zip(seqs, DIRECTIONS):
        seq = as_tensor(seq)
        if seq.ndim != 3 or seq.shape[1] != H * W:
            raise DimensionError(f"{k}: sequence shape {seq.shape} does not cover a {H}x{W} grid")
        order = traversal(H, W, k)
        grid = np.empty((seq.shape[0], seq.shape[2], H * W))
        grid[:, :, order] = seq.transpose(0, 2, 1)
        grids.append(grid.reshape(seq.shape[0], seq.shape[2], H, W))
    # pairwise: (rf + rr) + (cf + cr) keeps the 180-degree symmetry bit-exact
    return (grids[0] + grids[1]) + (grids[2] + grids[3])


def _check_params(C, params):
    if len(params) != len(DIRECTIONS):
        raise DimensionError(f"need {len(DIRECTIONS)} S6 parameter sets, got {len(params)}")
    for k, p in zip(DIRECTIONS, params):
        if p.d != C:
            raise DimensionError(f"{k}: S6 has {p.d} channels, feature map has {C}")


def ss2d_forward(fmap, params):
    return ss2d_forward_cached(fmap, params)[0]


def ss2d_forward_cached(fmap, params):
    fmap = as_tensor(fmap)
    B, C, H, W = fmap.shape
    _check_params(C, params)
    outs, caches = [], []
    for seq, p in zip(scan_expand(fmap), params):
        y, cache = s6_forward(seq, p)
        outs.append(y)
        caches.append(cache)
    return scan_merge(outs, H, W), (caches, (H, W))


def ss2d_backward(state, dy):
    """Returns ``(dfmap, [S6Params grads per direction])``."""
    caches, (H, W) = state
    dseqs = scan_expand(dy)
    dxs, grads = [], []
    for cache, dseq in zip(caches, dseqs):
        dx, g = s6_backward(cache, dseq)
        dxs.append(dx)
        grads.append(g)
    return scan_merge(dxs, H, W), grads


def ss2d_op():
    """Differentiable over ``(fmap, *dir0_params, *dir1_params, ...)``."""
    k = len(S6Params.names())

    def unpack(arrays):
        return [S6Params(*arrays[i * k:(i + 1) * k]) for i in range(len(DIRECTIONS))]

    def fwd(fmap, *arrays):
        return ss2d_forward(fmap, unpack(arrays))

    def bwd(inputs, dy):
        _, state = ss2d_forward_cached(inputs[0], unpack(inputs[1:]))
        dx, grads = ss2d_backward(state, dy)
        return (dx, *[a for g in grads for a in g.arrays()])

    return DifferentiableOp(fwd, bwd, name="ss2d")

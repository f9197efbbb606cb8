"""Block-local multi-head self-attention over 3D volumes.

Each layer partitions a (T', H', W') slice into non-overlapping blocks of a
per-layer shape, runs pre-layernorm multi-head attention with an additive
per-axis relative-distance bias inside every block, projects and adds the
residual, then applies a two-matrix ReLU feed-forward with its own residual.
Varying block shapes between layers is what propagates information across
blocks; blocks never overlap.

Masked (decoder) layers allow position i to attend to j iff j's global
raster index is <= i's.  Attending to self is safe because the decoder input
representation never contains the current pixel's value (the masked
convolution in front of the stack excludes its center).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import ConfigError, Tensor

MASK_NEG = -1e9  # additive pre-softmax value for disallowed pairs


@dataclass(frozen=True)
class BlockShape:
    t: int
    h: int
    w: int

    @property
    def n_positions(self):
        return self.t * self.h * self.w

    def as_tuple(self):
        return (self.t, self.h, self.w)

    def check_divides(self, slice_shape):
        if slice_shape[0] % self.t or slice_shape[1] % self.h or slice_shape[2] % self.w:
            raise ConfigError(
                f"block shape {self.as_tuple()} does not divide slice shape {slice_shape}")


@dataclass(frozen=True)
class AttentionLayerSpec:
    block: BlockShape
    n_heads: int
    d_head: int


def block_partition(x, bs):
    """(B, T', H', W', d) -> (B*num_blocks, n_p, d), raster within blocks."""
    B, T, H, W, d = x.data.shape
    bs.check_divides((T, H, W))
    nt, nh, nw = T // bs.t, H // bs.h, W // bs.w
    x = tc.reshape(x, (B, nt, bs.t, nh, bs.h, nw, bs.w, d))
    x = tc.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return tc.reshape(x, (B * nt * nh * nw, bs.n_positions, d))


def block_merge(x, bs, slice_shape, batch):
    """Inverse of block_partition."""
    T, H, W = slice_shape
    nt, nh, nw = T // bs.t, H // bs.h, W // bs.w
    d = x.data.shape[-1]
    x = tc.reshape(x, (batch, nt, nh, nw, bs.t, bs.h, bs.w, d))
    x = tc.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return tc.reshape(x, (batch, T, H, W, d))


def block_coordinates(slice_shape, bs):
    """Global (t,h,w) of every block position: (num_blocks, n_p, 3) int array."""
    T, H, W = slice_shape
    bs.check_divides(slice_shape)
    nt, nh, nw = T // bs.t, H // bs.h, W // bs.w
    bt, bh, bw = np.meshgrid(np.arange(nt) * bs.t, np.arange(nh) * bs.h,
                             np.arange(nw) * bs.w, indexing="ij")
    base = np.stack([bt.ravel(), bh.ravel(), bw.ravel()], axis=1)  # (NB, 3)
    lt, lh, lw = np.meshgrid(np.arange(bs.t), np.arange(bs.h), np.arange(bs.w),
                             indexing="ij")
    local = np.stack([lt.ravel(), lh.ravel(), lw.ravel()], axis=1)  # (n_p, 3)
    return base[:, None, :] + local[None, :, :]


def _local_coords(bs):
    lt, lh, lw = np.meshgrid(np.arange(bs.t), np.arange(bs.h), np.arange(bs.w),
                             indexing="ij")
    return np.stack([lt.ravel(), lh.ravel(), lw.ravel()], axis=1)


def relative_bias_indices(bs):
    """Index matrices (n_p, n_p) into the (2t-1), (2h-1), (2w-1) bias tables."""
    loc = _local_coords(bs)
    delta = loc[:, None, :] - loc[None, :, :]  # i - j
    return (delta[..., 0] + bs.t - 1, delta[..., 1] + bs.h - 1, delta[..., 2] + bs.w - 1)


def relative_bias_matrix(bs, table_t, table_h, table_w):
    """(n_heads, n_p, n_p) additive bias: sum of the per-axis distance terms."""
    it, ih, iw = relative_bias_indices(bs)
    bt = tc.gather(table_t, it, axis=1)
    bh = tc.gather(table_h, ih, axis=1)
    bw = tc.gather(table_w, iw, axis=1)
    return tc.add(tc.add(bt, bh), bw)


def relative_bias(bs, tables, i, j):
    """Scalar bias between in-block coordinates i and j (reference form)."""
    bt, bh, bw = tables
    dt, dh, dw = (i[0] - j[0], i[1] - j[1], i[2] - j[2])
    return float(bt[dt + bs.t - 1] + bh[dh + bs.h - 1] + bw[dw + bs.w - 1])


def causal_mask(bs, block_offset=(0, 0, 0), slice_shape=None):
    """Boolean (n_p, n_p): entry [i, j] True iff i may attend to j.

    j is attendable iff its global raster index is <= i's.  Because both
    positions share the block offset, the result is independent of the
    offset; global coordinates are still formed so the contract is explicit.
    """
    loc = _local_coords(bs) + np.asarray(block_offset)
    if slice_shape is None:
        slice_shape = (block_offset[0] + bs.t, block_offset[1] + bs.h,
                       block_offset[2] + bs.w)
    _, H, W = slice_shape
    raster = (loc[:, 0] * H + loc[:, 1]) * W + loc[:, 2]
    return raster[None, :] <= raster[:, None]


def block_attention(z, w_qkv, tables, n_heads, d_head, mask=None):
    """Multi-head attention inside one block (or a stack of blocks).

    z: (G, n_p, d) pre-normalized block representations.  Returns the
    concatenated head outputs (G, n_p, n_heads*d_head); projection and
    residual are the caller's job.
    """
    G, n_p, d = z.data.shape
    qkv = tc.matmul(z, w_qkv)  # (G, n_p, 3*n_heads*d_head)
    qkv = tc.reshape(qkv, (G, n_p, 3, n_heads, d_head))
    qkv = tc.transpose(qkv, (2, 0, 3, 1, 4))  # (3, G, heads, n_p, d_head)
    q = tc.reshape(tc.narrow(qkv, 0, 0, 1), (G, n_heads, n_p, d_head))
    k = tc.reshape(tc.narrow(qkv, 0, 1, 1), (G, n_heads, n_p, d_head))
    v = tc.reshape(tc.narrow(qkv, 0, 2, 1), (G, n_heads, n_p, d_head))
    scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))),
                    1.0 / np.sqrt(d_head))
    if tables is not None:
        scores = tc.add(scores, tables)  # (heads, n_p, n_p) broadcast over G
    if mask is not None:
        add = np.where(mask, 0.0, MASK_NEG).astype(z.data.dtype)
        scores = tc.add(scores, Tensor(add))
    att = tc.softmax(scores, axis=-1)
    out = tc.matmul(att, v)  # (G, heads, n_p, d_head)
    out = tc.transpose(out, (0, 2, 1, 3))
    return tc.reshape(out, (G, n_p, n_heads * d_head))


def attention_layer(x, params, spec, causal):
    """One full block-local layer on a (B, T', H', W', d) tensor.

    params is a mapping with keys ln1_gain, ln1_bias, w_qkv, w_p, bias_t,
    bias_h, bias_w, ln2_gain, ln2_bias, t1, t2.
    """
    B = x.data.shape[0]
    slice_shape = x.data.shape[1:4]
    bs = spec.block
    zb = block_partition(x, bs)
    normed = tc.layernorm(zb, params["ln1_gain"], params["ln1_bias"])
    bias = relative_bias_matrix(bs, params["bias_t"], params["bias_h"], params["bias_w"])
    mask = causal_mask(bs, slice_shape=slice_shape) if causal else None
    heads = block_attention(normed, params["w_qkv"], bias, spec.n_heads,
                            spec.d_head, mask)
    ztil = tc.add(tc.matmul(heads, params["w_p"]), zb)
    ff = tc.layernorm(ztil, params["ln2_gain"], params["ln2_bias"])
    ff = tc.matmul(tc.relu(tc.matmul(ff, params["t1"])), params["t2"])
    out = tc.add(ff, ztil)
    return block_merge(out, bs, slice_shape, B)

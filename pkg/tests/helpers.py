"""Shared test harnesses: causality sweeps and analyzer gradient oracles."""

import numpy as np

from svt import model as M
from svt import tensor as tc
from svt.attention import AttentionLayerSpec, attention_layer
from svt.subscale import slice_order, visibility_mask
from svt.tensor import Tensor


def allowed_influence_mask(cfg, idx, pixel, channel):
    """(T,H,W,n_channels) bool: inputs the order permits to reach this logit.

    Allowed: any channel of a pixel in a strictly preceding slice, any
    channel of a same-slice pixel strictly before ``pixel`` in raster order,
    and channels < ``channel`` of the pixel itself.
    """
    T, H, W = cfg.video_shape
    nc = cfg.n_channels
    allowed = np.zeros((T, H, W, nc), dtype=bool)
    allowed |= visibility_mask((T, H, W), cfg.s, idx)[..., None]
    a, b, c = idx
    Ts, Hs, Ws = cfg.slice_shape
    t, h, w = pixel // (Hs * Ws), (pixel // Ws) % Hs, pixel % Ws
    raster = np.arange(Ts * Hs * Ws).reshape(Ts, Hs, Ws)
    before = raster < raster[t, h, w]
    sl = (slice(a, None, cfg.s.t), slice(b, None, cfg.s.h), slice(c, None, cfg.s.w))
    allowed[sl] |= before[..., None]
    gt, gh, gw = t * cfg.s.t + a, h * cfg.s.h + b, w * cfg.s.w + c
    allowed[gt, gh, gw, :channel] = True
    return allowed


def causality_sweep(params, cfg, video, seed, on_violation=None):
    """Check every logit's input gradient against the generation order.

    Returns the number of (slice, pixel, channel) logit groups checked.
    Raises AssertionError on the first violation unless ``on_violation`` is
    given (then it is called with a description and the sweep continues).
    """
    rng = np.random.default_rng(seed)
    Ts, Hs, Ws = cfg.slice_shape
    P = Ts * Hs * Ws
    checked = 0
    for idx in slice_order(cfg.s):
        leaf = Tensor(M.video_onehot(cfg, video), requires_grad=True)
        _, _, logits = M.forward_slices(params, cfg, [video], [idx],
                                        prime_frames=0, onehots=[leaf])
        for pixel in range(P):
            for chan in range(cfg.n_channels):
                tc.clear_graph_grads(logits)
                seed_grad = np.zeros_like(logits.data)
                seed_grad[0, pixel, chan, :] = rng.standard_normal(M.N_VALUES)
                tc.backward(logits, seed_grad)
                grad = np.abs(leaf.grad).sum(axis=-1)  # (T,H,W,nc)
                nonzero = grad > 0.0
                allowed = allowed_influence_mask(cfg, idx, pixel, chan)
                if not np.array_equal(nonzero, allowed):
                    msg = (f"slice {idx} pixel {pixel} channel {chan}: "
                           f"forbidden-but-nonzero={int((nonzero & ~allowed).sum())} "
                           f"allowed-but-zero={int((allowed & ~nonzero).sum())}")
                    if on_violation is None:
                        raise AssertionError(msg)
                    on_violation(msg)
                checked += 1
    return checked


def gradient_reachability(slice_shape, blocks, kernel, seed, d_in=3, d=6):
    """Oracle for the connectivity analyzer: the exact nonzero-gradient
    pattern of a random-parameter masked decoder stack, float64."""
    T, H, W = slice_shape
    P = T * H * W
    rng = np.random.default_rng(seed)

    def p64(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)

    n_taps = len(tc.masked_taps(kernel))
    kern, kb = p64(n_taps * d_in, d), p64(d)
    specs = [AttentionLayerSpec(b, 2, 4) for b in blocks]
    layers = []
    for b in blocks:
        layers.append({
            "ln1_gain": p64(d), "ln1_bias": p64(d),
            "w_qkv": p64(d, 3 * 2 * 4), "w_p": p64(2 * 4, d),
            "bias_t": p64(2, 2 * b.t - 1), "bias_h": p64(2, 2 * b.h - 1),
            "bias_w": p64(2, 2 * b.w - 1),
            "ln2_gain": p64(d), "ln2_bias": p64(d),
            "t1": p64(d, d), "t2": p64(d, d)})
    x = Tensor(rng.standard_normal((1, T, H, W, d_in)), requires_grad=True,
               dtype=np.float64)
    y = tc.masked_conv3d(x, kern, kb, kernel)
    for spec, lp in zip(specs, layers):
        y = attention_layer(y, lp, spec, causal=True)
    yf = tc.reshape(y, (P, d))
    reach = np.zeros((P, P), dtype=bool)
    for p in range(P):
        tc.clear_graph_grads(yf)
        seed_grad = np.zeros((P, d))
        seed_grad[p] = rng.standard_normal(d)
        tc.backward(yf, seed_grad)
        reach[p] = np.abs(x.grad[0]).sum(axis=-1).reshape(P) > 0.0
    return reach


def tiny_config(**overrides):
    """Small spatiotemporal config with no structural blind spots.

    Full-volume attention blocks plus a masked-conv kernel wide enough to
    hold every pixel's raster successor make the decoder realize the whole
    generation order, so "forbidden by the order" and "structurally absent"
    coincide and the causality sweep can assert exact equality.
    """
    kwargs = dict(d_e=12, d=16, n_heads=2, d_head=8, layers=2, seed=5,
                  kernel=(3, 3, 3))
    kwargs.update(overrides)
    video_shape = kwargs.pop("video_shape", (4, 8, 8))
    s = kwargs.pop("s", (2, 2, 2))
    cfg = M.build_variant("spatiotemporal", video_shape, s=s, **kwargs)
    Ts, Hs, Ws = cfg.slice_shape
    kwargs.setdefault("mconv", (3, 2 * Hs - 1, 2 * Ws - 1))
    full = [cfg.slice_shape] * len(cfg.enc_schedule)
    return M.build_variant("spatiotemporal", video_shape, s=s,
                           enc_blocks=full, dec_blocks=full, **kwargs)

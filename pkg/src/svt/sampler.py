"""Autoregressive generation: slice by slice, pixel by pixel, channel by
channel, with temperature and frame priming.

Randomness comes from one counter-based stream per (slice, pixel, channel),
derived from the seed with a Philox counter, so priming or re-running never
shifts the randomness consumed by later positions: extending the prime with
frames the model would have sampled anyway leaves every remaining pixel
bit-identical.

Positions inside primed frames are copied from the prime and never sampled.
The decoder forward is recomputed per pixel (no incremental cache); at desk
scale this is fast enough and trivially correct.
"""

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as tc
from .subscale import merge_slice, primed_plane_mask, slice_order, slice_rank
from .tensor import ConfigError, Tensor

# below this temperature the categorical collapses to argmax even in float64,
# so we take the argmax directly (no rng draw is consumed either way)
ARGMAX_TEMPERATURE = 1e-4


@dataclass
class SampleConfig:
    prime_frames: int = 1
    temperature: float = 0.9
    seed: int = 0
    count: int = 1

    def validate(self, video_t):
        if not (0 < self.temperature <= 2.0):
            raise ConfigError(f"temperature must be in (0, 2], got {self.temperature}")
        if not (0 <= self.prime_frames <= video_t):
            raise ConfigError(f"prime frame count {self.prime_frames} out of range")
        return self


def apply_temperature(logits, tau):
    """Scale logits by 1/tau before the softmax; tau < 1 sharpens."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return np.asarray(logits, dtype=np.float64) / tau


def _position_stream(seed, video_index, slice_rank_, pixel, channel):
    """Independent generator for one sampled value."""
    bits = np.random.Philox(key=[seed & (2**64 - 1), video_index],
                            counter=[0, channel, pixel, slice_rank_])
    return np.random.Generator(bits)


def sample_categorical(logits, tau, stream):
    """Temperature-sample one value from unnormalized logits (float64 path)."""
    z = apply_temperature(logits, tau)
    if tau <= ARGMAX_TEMPERATURE:
        return int(np.argmax(z))
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    u = stream.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


def _layernorm_np(x, gain, bias, eps=1e-6):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _pixel_logits(params, cfg, y_vec, chan_vals, c):
    """Channel-c head at one pixel, plain numpy (sampling runs gradient-free)."""
    ln = _layernorm_np(y_vec, params["head/ln_gain"].data, params["head/ln_bias"].data)
    if c:
        prev = tc.one_hot(np.asarray(chan_vals[:c]), M.N_VALUES).reshape(-1)
        ln = np.concatenate([ln, prev])
    u = np.maximum(ln @ params[f"head/u{c}"].data, 0.0)
    return u @ params["head/p"].data


def _pixel_intensity(params, cfg, y_vec):
    ln = _layernorm_np(y_vec, params["head/ln_gain"].data, params["head/ln_bias"].data)
    u = np.maximum(ln @ params["head/u_det"].data, 0.0)
    x = float((u @ params["head/p_det"].data)[0])
    return 1.0 / (1.0 + np.exp(-x))


def sample_slice(params, cfg, canvas, idx, scfg, video_index=0):
    """Sample the pixels of slice ``idx`` given a canvas holding all
    preceding slices (and primed frames).  Returns (T',H',W',n_channels)
    split-channel values; primed planes are copied, never sampled."""
    Ts, Hs, Ws = cfg.slice_shape
    rank = slice_rank(cfg.s, idx)
    primed = primed_plane_mask(cfg.s, idx, Ts, scfg.prime_frames)
    slice_u8 = M.extract_slice_u8(canvas, cfg.s, idx)
    chans = M.split_channels(slice_u8).astype(np.int64)
    chans[~primed] = 0  # not yet generated
    if primed.all():
        return chans
    with tc.no_grad():
        use_dec0 = cfg.first_slice_decoder and rank == 0
        z = None if use_dec0 else M.encode_slices(params, cfg, [canvas], [idx])
        for t in range(Ts):
            if primed[t]:
                continue
            for h in range(Hs):
                for w in range(Ws):
                    pixel = (t * Hs + h) * Ws + w
                    oh = Tensor(tc.one_hot(chans, M.N_VALUES))
                    if use_dec0:
                        y = M.decode_slices(params, cfg, [oh], None, prefix="dec0")
                    else:
                        y = M.decode_slices(params, cfg, [oh], z)
                    y_vec = y.data.reshape(Ts * Hs * Ws, cfg.d)[pixel]
                    if cfg.head == "categorical":
                        vals = chans[t, h, w]
                        for c in range(cfg.n_channels):
                            logits = _pixel_logits(params, cfg, y_vec, vals, c)
                            stream = _position_stream(scfg.seed, video_index,
                                                      rank, pixel, c)
                            vals[c] = sample_categorical(logits, scfg.temperature,
                                                         stream)
                    else:
                        byte = int(round(_pixel_intensity(params, cfg, y_vec) * 255.0))
                        chans[t, h, w] = M.split_channels(
                            np.array([byte], dtype=np.uint8))
    return chans


def sample_video(params, cfg, prime_video, scfg, video_index=0):
    """Generate a full video.  Returns (joined uint8 video, split channels).

    ``prime_video`` supplies at least the primed frames; slices are visited
    in generation order and merged into the canvas as they complete."""
    scfg.validate(cfg.video_shape[0])
    T, H, W = cfg.video_shape
    if prime_video.shape != (T, H, W, cfg.bytes_per_pixel):
        raise ConfigError(
            f"prime video shape {prime_video.shape} != {(T, H, W, cfg.bytes_per_pixel)}")
    canvas = np.zeros_like(prime_video)
    canvas[:scfg.prime_frames] = prime_video[:scfg.prime_frames]
    split_out = np.zeros((T, H, W, cfg.n_channels), dtype=np.uint8)
    for idx in slice_order(cfg.s):
        chans = sample_slice(params, cfg, canvas, idx, scfg, video_index)
        joined = M.join_channels(chans)
        canvas = merge_slice(canvas, cfg.s, idx, joined)
        split_out = merge_slice(split_out, cfg.s, idx, chans.astype(np.uint8))
    return canvas, split_out

"""The subscale video model: slice encoder, masked slice decoder, heads.

Pixels are modeled channel-by-channel: each 8-bit intensity is split into a
coarse (high) and fine (low) 4-bit value, and the coarse values of all color
channels are predicted before the fine ones.  A slice is generated by

  * encoding the partially masked video (only preceding slices visible) with
    a strided 3D convolution whose signed padding centers the kernel on the
    current slice, followed by unmasked block-local attention layers;
  * decoding the slice pixels through a center-excluded masked convolution
    plus causal block-local attention, conditioned on the encoder output;
  * predicting each 4-bit channel with a one-hidden-layer MLP that sees the
    decoder state and the one-hot values of the channels before it.

Parameters live in a flat name -> Tensor store; the checkpoint format is a
simple little-endian container of named float32 arrays.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .attention import AttentionLayerSpec, BlockShape, attention_layer
from .subscale import (SubscaleFactor, context_padding, primed_plane_mask,
                       slice_frame_globals, slice_rank, visibility_mask)
from .tensor import ConfigError, Tensor

N_VALUES = 16  # each split channel holds a 4-bit value

CHECKPOINT_MAGIC = b"SVTC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# channel codec
# ---------------------------------------------------------------------------

def split_channels(video):
    """(..., B) uint8 -> (..., 2B) values in 0..15, coarse bytes first.

    Coarse is the high nibble, fine the low nibble; for RGB the order is
    [R_coarse, G_coarse, B_coarse, R_fine, G_fine, B_fine].
    """
    v = np.asarray(video)
    return np.concatenate([v >> 4, v & 0x0F], axis=-1).astype(np.uint8)


def join_channels(chans):
    """Inverse of split_channels."""
    c = np.asarray(chans)
    nb = c.shape[-1] // 2
    coarse = c[..., :nb].astype(np.uint8)
    fine = c[..., nb:].astype(np.uint8)
    return ((coarse << 4) | fine).astype(np.uint8)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

VARIANTS = ("spatiotemporal", "spatial", "single_frame")

_PRESETS = {
    "base": dict(d_e=128, d=512, n_heads=8, d_head=128, layers=8),
    "large": dict(d_e=128, d=2048, n_heads=8, d_head=128, layers=8),
}


@dataclass
class ModelConfig:
    variant: str
    video_shape: tuple          # (T, H, W)
    channels: str = "rgb"       # "rgb" | "gray"
    head: str = "categorical"   # "categorical" | "deterministic"
    s: SubscaleFactor = None
    kernel: tuple = None
    d_e: int = 128
    d: int = 512
    enc_schedule: list = field(default_factory=list)
    dec_schedule: list = field(default_factory=list)
    mconv: tuple = (3, 3, 3)
    aux_dim: int = 0
    first_slice_decoder: bool = False
    first_slice_schedule: list = field(default_factory=list)
    seed: int = 1

    @property
    def bytes_per_pixel(self):
        return 3 if self.channels == "rgb" else 1

    @property
    def n_channels(self):
        return 2 * self.bytes_per_pixel

    @property
    def slice_shape(self):
        return self.s.slice_shape(self.video_shape)

    @property
    def n_slices(self):
        return self.s.count

    @property
    def input_channels(self):
        return self.n_channels * N_VALUES

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.channels not in ("rgb", "gray"):
            raise ConfigError(f"channels must be rgb or gray, got {self.channels!r}")
        if self.head not in ("categorical", "deterministic"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.head == "deterministic" and self.channels != "gray":
            raise ConfigError("the deterministic head models grayscale video only")
        self.s.check_divides(self.video_shape)
        if self.variant == "single_frame":
            if self.s.as_tuple() != (self.video_shape[0], 1, 1):
                raise ConfigError("single_frame requires s = (T, 1, 1)")
            if self.kernel != (6, 1, 1):
                raise ConfigError("single_frame requires kernel (6, 1, 1)")
        ss = self.slice_shape
        for name, sched in (("encoder", self.enc_schedule), ("decoder", self.dec_schedule),
                            ("first-slice decoder", self.first_slice_schedule)):
            for spec in sched:
                spec.block.check_divides(ss)
        for e in self.mconv:
            if e % 2 == 0:
                raise ConfigError(f"masked conv extents must be odd, got {self.mconv}")
        if not self.enc_schedule or not self.dec_schedule:
            raise ConfigError("empty layer schedule")
        if self.first_slice_decoder and not self.first_slice_schedule:
            raise ConfigError("first-slice decoder enabled but has no schedule")
        return self


def _largest_divisor_leq(n, cap):
    cap = max(1, min(n, cap))
    for d in range(cap, 0, -1):
        if n % d == 0:
            return d
    return 1


def _scaled_blocks(slice_shape, divisors):
    """Block shapes from per-axis divisor targets, snapped to real divisors."""
    T, H, W = slice_shape
    out = []
    for ft, fh, fw in divisors:
        bt = _largest_divisor_leq(T, max(1, T // ft))
        bh = _largest_divisor_leq(H, max(1, H // fh))
        bw = _largest_divisor_leq(W, max(1, W // fw))
        out.append(BlockShape(bt, bh, bw))
    return out


def default_block_pattern(variant, slice_shape):
    """Four block shapes per the variant, scaled from the canonical slice.

    The canonical 4x32x32 slice yields (4,8,4); (4,4,8); (1,32,4); (1,4,32)
    for subscaling variants, and a 1x64x64 single-frame slice yields
    (1,8,16); (1,16,8); (1,2,64); (1,64,2); other slice shapes scale
    proportionally.
    """
    if variant == "single_frame":
        divisors = [(1, 8, 4), (1, 4, 8), (1, 32, 1), (1, 1, 32)]
    else:
        t_full = slice_shape[0]
        divisors = [(1, 4, 8), (1, 8, 4), (t_full, 1, 8), (t_full, 8, 1)]
    return _scaled_blocks(slice_shape, divisors)


def schedule_for(variant, slice_shape, layers, n_heads, d_head, wide_heads=None):
    """Length-``layers`` schedule: the 4-shape pattern followed by its reverse.

    ``wide_heads`` doubles the head count on the last 4 layers (large preset).
    """
    pattern = default_block_pattern(variant, slice_shape)
    cycle = pattern + pattern[::-1]
    blocks = [cycle[i % len(cycle)] for i in range(layers)]
    sched = []
    for i, b in enumerate(blocks):
        heads = n_heads
        if wide_heads and layers - i <= 4:
            heads = wide_heads
        sched.append(AttentionLayerSpec(b, heads, d_head))
    return sched


def default_subscale(variant, video_shape):
    T, H, W = video_shape
    if variant == "single_frame":
        return SubscaleFactor(T, 1, 1)
    st = 1
    if variant == "spatiotemporal":
        if T % 4 == 0 and T >= 16:
            st = 4
        elif T % 2 == 0 and T >= 4:
            st = 2
    sh = 2 if H % 2 == 0 and H >= 8 else 1
    sw = 2 if W % 2 == 0 and W >= 8 else 1
    return SubscaleFactor(st, sh, sw)


def build_variant(variant, video_shape, preset="base", **overrides):
    """Assemble a ModelConfig for one of the named variants.

    Overrides accept s, kernel, d_e, d, n_heads, d_head, layers, channels,
    head, mconv, aux_dim, first_slice_decoder, first_slice_layers, seed, and
    explicit enc_blocks/dec_blocks lists of (t, h, w) tuples.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    dims = dict(_PRESETS[preset])
    for key in ("d_e", "d", "n_heads", "d_head", "layers"):
        if key in overrides:
            dims[key] = overrides.pop(key)
    s = overrides.pop("s", None) or default_subscale(variant, video_shape)
    if not isinstance(s, SubscaleFactor):
        s = SubscaleFactor(*s)
    kernel = overrides.pop("kernel", None)
    if kernel is None:
        kernel = (6, 1, 1) if variant == "single_frame" else s.as_tuple()
    slice_shape = s.slice_shape(video_shape)
    wide = 16 if preset == "large" else None
    enc_blocks = overrides.pop("enc_blocks", None)
    dec_blocks = overrides.pop("dec_blocks", None)

    def sched(blocks):
        if blocks is None:
            return schedule_for(variant, slice_shape, dims["layers"],
                                dims["n_heads"], dims["d_head"], wide)
        return [AttentionLayerSpec(BlockShape(*b), dims["n_heads"], dims["d_head"])
                for b in blocks]

    first = overrides.pop("first_slice_decoder", False)
    first_layers = overrides.pop("first_slice_layers", 16)
    first_sched = []
    if first:
        pattern = schedule_for(variant, slice_shape, first_layers,
                               dims["n_heads"], dims["d_head"], None)
        first_sched = pattern
    cfg = ModelConfig(
        variant=variant,
        video_shape=tuple(video_shape),
        channels=overrides.pop("channels", "rgb"),
        head=overrides.pop("head", "categorical"),
        s=s,
        kernel=tuple(kernel),
        d_e=dims["d_e"],
        d=dims["d"],
        enc_schedule=sched(enc_blocks),
        dec_schedule=sched(dec_blocks),
        mconv=tuple(overrides.pop("mconv", (3, 3, 3))),
        aux_dim=overrides.pop("aux_dim", 0),
        first_slice_decoder=first,
        first_slice_schedule=first_sched,
        seed=overrides.pop("seed", 1),
    )
    if overrides:
        raise ConfigError(f"unknown build_variant overrides: {sorted(overrides)}")
    return cfg.validate()


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Flat name -> Tensor map with deterministic iteration order."""

    def __init__(self, params):
        self._params = dict(params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def tensors(self):
        return [self._params[n] for n in self.names()]

    def zero_grads(self):
        tc.zero_grads(self.tensors())

    def grads(self):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.items()}

    def arrays(self):
        return {n: t.data for n, t in self.items()}

    def layer(self, prefix, i):
        keys = ("ln1_gain", "ln1_bias", "w_qkv", "w_p", "bias_t", "bias_h",
                "bias_w", "ln2_gain", "ln2_bias", "t1", "t2")
        return {k: self._params[f"{prefix}/l{i}/{k}"] for k in keys}

    def n_parameters(self):
        return sum(t.data.size for t in self.tensors())


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with draws beyond 2 std resampled."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2 * std
    return x.astype(np.float32)


def _layer_param_arrays(sample, d, spec):
    na, da, b = spec.n_heads, spec.d_head, spec.block
    return {
        "ln1_gain": np.ones(d, dtype=np.float32),
        "ln1_bias": np.zeros(d, dtype=np.float32),
        "w_qkv": sample((d, 3 * na * da)),
        "w_p": sample((na * da, d)),
        "bias_t": np.zeros((na, 2 * b.t - 1), dtype=np.float32),
        "bias_h": np.zeros((na, 2 * b.h - 1), dtype=np.float32),
        "bias_w": np.zeros((na, 2 * b.w - 1), dtype=np.float32),
        "ln2_gain": np.ones(d, dtype=np.float32),
        "ln2_bias": np.zeros(d, dtype=np.float32),
        "t1": sample((d, d)),
        "t2": sample((d, d)),
    }


def _decoder_arrays(sample, cfg, prefix, schedule, with_z_proj):
    T, H, W = cfg.slice_shape
    k_taps = len(tc.masked_taps(cfg.mconv))
    out = {
        f"{prefix}/chan_embed": sample((cfg.input_channels, cfg.d_e)),
        f"{prefix}/mconv_kernel": sample((k_taps * cfg.d_e, cfg.d)),
        f"{prefix}/mconv_bias": np.zeros(cfg.d, dtype=np.float32),
        f"{prefix}/pos_t": sample((T, cfg.d)),
        f"{prefix}/pos_h": sample((H, cfg.d)),
        f"{prefix}/pos_w": sample((W, cfg.d)),
    }
    if with_z_proj:
        out[f"{prefix}/z_proj"] = sample((cfg.d, cfg.d))
    for i, spec in enumerate(schedule):
        for k, v in _layer_param_arrays(sample, cfg.d, spec).items():
            out[f"{prefix}/l{i}/{k}"] = v
    return out


def _all_param_arrays(sample, cfg, head_init):
    T, H, W = cfg.slice_shape
    kk = int(np.prod(cfg.kernel))
    arrays = {
        "enc/conv_kernel": sample((kk * cfg.input_channels, cfg.d_e)),
        "enc/conv_bias": np.zeros(cfg.d_e, dtype=np.float32),
        "enc/pos_t": sample((T, cfg.d_e)),
        "enc/pos_h": sample((H, cfg.d_e)),
        "enc/pos_w": sample((W, cfg.d_e)),
        "enc/slice_embed": sample((cfg.n_slices, cfg.d_e)),
        "enc/in_proj": sample((cfg.d_e + cfg.aux_dim, cfg.d)),
    }
    for i, spec in enumerate(cfg.enc_schedule):
        for k, v in _layer_param_arrays(sample, cfg.d, spec).items():
            arrays[f"enc/l{i}/{k}"] = v
    arrays.update(_decoder_arrays(sample, cfg, "dec", cfg.dec_schedule, True))
    if cfg.first_slice_decoder:
        arrays.update(_decoder_arrays(sample, cfg, "dec0", cfg.first_slice_schedule, False))
    arrays["head/ln_gain"] = np.ones(cfg.d, dtype=np.float32)
    arrays["head/ln_bias"] = np.zeros(cfg.d, dtype=np.float32)
    if cfg.head == "categorical":
        for k in range(cfg.n_channels):
            arrays[f"head/u{k}"] = sample((cfg.d + k * N_VALUES, cfg.d))
        arrays["head/p"] = (sample((cfg.d, N_VALUES)) if head_init == "normal"
                            else np.zeros((cfg.d, N_VALUES), dtype=np.float32))
    else:
        arrays["head/u_det"] = sample((cfg.d, cfg.d))
        arrays["head/p_det"] = (sample((cfg.d, 1)) if head_init == "normal"
                                else np.zeros((cfg.d, 1), dtype=np.float32))
    return arrays


def init_params(cfg, head_init="zero"):
    """Fresh ParamStore for ``cfg``; head output matrices start at zero so
    training begins at the uniform distribution (set head_init='normal' for
    the randomized heads the causality tests need)."""
    rng = np.random.default_rng(cfg.seed)
    arrays = _all_param_arrays(lambda shape: trunc_normal(rng, shape), cfg, head_init)
    return ParamStore({n: Tensor(a, requires_grad=True) for n, a in arrays.items()})


def parameter_shapes(cfg):
    """name -> shape for every parameter, without allocating the values."""
    arrays = _all_param_arrays(
        lambda shape: np.broadcast_to(np.float32(0), shape), cfg, "zero")
    return {n: tuple(a.shape) for n, a in arrays.items()}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def video_onehot(cfg, video):
    """(T,H,W,bytes) uint8 video -> (T,H,W,n_channels,16) float32 one-hots."""
    chans = split_channels(video)
    return tc.one_hot(chans, N_VALUES)


def _add_positional(x, pt, ph, pw):
    B, T, H, W, D = x.data.shape
    x = tc.add(x, tc.reshape(pt, (1, T, 1, 1, D)))
    x = tc.add(x, tc.reshape(ph, (1, 1, H, 1, D)))
    return tc.add(x, tc.reshape(pw, (1, 1, 1, W, D)))


def encode_slices(params, cfg, videos, idxs, aux=None, onehots=None):
    """Encode a batch of (video, slice index) pairs -> (B, T', H', W', d).

    ``onehots`` may carry pre-built (possibly gradient-tracked) one-hot
    Tensors of shape (T,H,W,n_channels,16); otherwise they are built from the
    uint8 videos.  ``aux`` is an optional list of (T, aux_dim) arrays.
    """
    T, H, W = cfg.video_shape
    Ts, Hs, Ws = cfg.slice_shape
    cin = cfg.input_channels
    z0 = []
    for b, idx in enumerate(idxs):
        oh = onehots[b] if onehots is not None else Tensor(video_onehot(cfg, videos[b]))
        vis = visibility_mask((T, H, W), cfg.s, idx)
        visf = Tensor(vis.astype(oh.data.dtype).reshape(T, H, W, 1))
        x = tc.mul(tc.reshape(oh, (T, H, W, cin)), visf)
        x = tc.reshape(x, (1, T, H, W, cin))
        pad = context_padding(cfg.kernel, idx)
        z = tc.conv3d(x, params["enc/conv_kernel"], params["enc/conv_bias"],
                      cfg.kernel, cfg.s.as_tuple(), pad, (Ts, Hs, Ws))
        z0.append(z)
    z = z0[0] if len(z0) == 1 else tc.concat(z0, axis=0)
    z = _add_positional(z, params["enc/pos_t"], params["enc/pos_h"], params["enc/pos_w"])
    ranks = np.array([slice_rank(cfg.s, idx) for idx in idxs])
    se = tc.gather(params["enc/slice_embed"], ranks)  # (B, d_e)
    z = tc.add(z, tc.reshape(se, (len(idxs), 1, 1, 1, cfg.d_e)))
    if cfg.aux_dim:
        if aux is None:
            aux = [np.zeros((T, cfg.aux_dim), dtype=np.float32) for _ in idxs]
        tracks = []
        for b, idx in enumerate(idxs):
            frames = slice_frame_globals(cfg.s, idx[0], Ts)
            tr = np.asarray(aux[b], dtype=np.float32)[frames]  # (T', aux)
            tracks.append(np.broadcast_to(tr[:, None, None, :],
                                          (Ts, Hs, Ws, cfg.aux_dim)))
        z = tc.concat([z, Tensor(np.stack(tracks))], axis=-1)
    z = tc.matmul(z, params["enc/in_proj"])
    for i, spec in enumerate(cfg.enc_schedule):
        z = attention_layer(z, params.layer("enc", i), spec, causal=False)
    return z


def decode_slices(params, cfg, slice_onehots, z, prefix="dec", schedule=None):
    """Decode a batch of slices -> (B, T', H', W', d).

    ``slice_onehots``: list of (T',H',W',n_channels,16) Tensors (the current
    slice's own pixels).  ``z`` is the encoder output to condition on, or
    None for the stand-alone first-slice decoder.
    """
    if schedule is None:
        schedule = cfg.dec_schedule if prefix == "dec" else cfg.first_slice_schedule
    Ts, Hs, Ws = cfg.slice_shape
    cin = cfg.input_channels
    flat = [tc.reshape(oh, (1, Ts, Hs, Ws, cin)) for oh in slice_onehots]
    x = flat[0] if len(flat) == 1 else tc.concat(flat, axis=0)
    emb = tc.matmul(x, params[f"{prefix}/chan_embed"])  # summed channel embeddings
    y = tc.masked_conv3d(emb, params[f"{prefix}/mconv_kernel"],
                         params[f"{prefix}/mconv_bias"], cfg.mconv)
    y = _add_positional(y, params[f"{prefix}/pos_t"], params[f"{prefix}/pos_h"],
                        params[f"{prefix}/pos_w"])
    if z is not None:
        y = tc.add(y, tc.matmul(z, params[f"{prefix}/z_proj"]))
    for i, spec in enumerate(schedule):
        y = attention_layer(y, params.layer(prefix, i), spec, causal=True)
    return y


def head_logits(params, cfg, y, slice_onehots_flat):
    """Channel MLP heads -> logits (B, P', n_channels, 16).

    Channel k conditions on layernormed decoder state plus the one-hot values
    of channels < k; the output projection is shared across channels.
    """
    B = y.data.shape[0]
    P = int(np.prod(cfg.slice_shape))
    yf = tc.reshape(y, (B, P, cfg.d))
    ln = tc.layernorm(yf, params["head/ln_gain"], params["head/ln_bias"])
    per_channel = []
    for k in range(cfg.n_channels):
        inp = ln
        if k:
            prev = tc.narrow(slice_onehots_flat, -1, 0, k * N_VALUES)
            inp = tc.concat([ln, prev], axis=-1)
        u = tc.relu(tc.matmul(inp, params[f"head/u{k}"]))
        logits = tc.matmul(u, params["head/p"])
        per_channel.append(tc.reshape(logits, (B, P, 1, N_VALUES)))
    return tc.concat(per_channel, axis=2)


def head_intensity(params, cfg, y):
    """Deterministic head -> sigmoid intensities (B, P', 1)."""
    B = y.data.shape[0]
    P = int(np.prod(cfg.slice_shape))
    yf = tc.reshape(y, (B, P, cfg.d))
    ln = tc.layernorm(yf, params["head/ln_gain"], params["head/ln_bias"])
    u = tc.relu(tc.matmul(ln, params["head/u_det"]))
    return tc.sigmoid(tc.matmul(u, params["head/p_det"]))


def predict_channels(params, cfg, y_slice, channel_values):
    """Logits (P', n_channels, 16) for one decoded slice.

    ``channel_values``: (T',H',W',n_channels) ints; only channels before k
    feed channel k's head.
    """
    oh = Tensor(tc.one_hot(channel_values, N_VALUES))
    P = int(np.prod(cfg.slice_shape))
    flat = tc.reshape(oh, (1, P, cfg.n_channels * N_VALUES))
    logits = head_logits(params, cfg, y_slice, flat)
    return tc.reshape(logits, (P, cfg.n_channels, N_VALUES))


def nll_loss(logits, targets, pixel_mask):
    """Summed negative log-likelihood in nats over unmasked pixels.

    logits (B,P,nc,16); targets (B,P,nc) ints; pixel_mask (B,P) with 1 where
    the pixel contributes.  Returns (loss Tensor, number of unmasked pixels).
    """
    lp = tc.log_softmax(logits, axis=-1)
    picked = tc.take_index_last(lp, targets)  # (B, P, nc)
    m = np.asarray(pixel_mask, dtype=lp.data.dtype)
    masked = tc.mul(picked, Tensor(m[..., None]))
    return tc.neg(tc.sum_all(masked)), float(m.sum())


def deterministic_loss(pred, target, pixel_mask=None):
    """Binary cross-entropy H(z, y) summed over pixels, y clamped away from
    0 and 1.  pred: Tensor (B, P, 1) in (0,1); target: array-like in [0,1]."""
    z = np.asarray(target, dtype=pred.data.dtype).reshape(pred.data.shape)
    y = tc.clip(pred, 1e-7, 1.0 - 1e-7)
    ll = tc.add(tc.mul(tc.log(y), Tensor(z)),
                tc.mul(tc.log(tc.sub(1.0, y)), Tensor(1.0 - z)))
    if pixel_mask is not None:
        m = np.asarray(pixel_mask, dtype=pred.data.dtype).reshape(pred.data.shape[:2])
        ll = tc.mul(ll, Tensor(m[..., None]))
    return tc.neg(tc.sum_all(ll))


def pixel_loss_mask(cfg, idx, prime_frames):
    """(T',H',W') float: 1 where the pixel's loss counts (not a primed frame)."""
    Ts, Hs, Ws = cfg.slice_shape
    planes = primed_plane_mask(cfg.s, idx, Ts, prime_frames)
    mask = np.ones((Ts, Hs, Ws), dtype=np.float32)
    mask[planes] = 0.0
    return mask


# ---------------------------------------------------------------------------
# assembled forward passes
# ---------------------------------------------------------------------------

def forward_slices(params, cfg, videos, idxs, prime_frames=0, aux=None,
                   onehots=None):
    """Teacher-forced forward for a batch of slices of equal geometry.

    Returns (loss Tensor in nats, n_pixels, logits-or-intensity Tensor).
    When ``cfg.first_slice_decoder`` is set the caller must not mix rank-0
    and later slices in one call (the training loop splits them).
    """
    use_dec0 = cfg.first_slice_decoder and any(
        slice_rank(cfg.s, i) == 0 for i in idxs)
    if use_dec0 and not all(slice_rank(cfg.s, i) == 0 for i in idxs):
        raise ConfigError("rank-0 slices must be decoded in their own batch")
    Ts, Hs, Ws = cfg.slice_shape
    P = Ts * Hs * Ws
    slice_oh = []
    for b, idx in enumerate(idxs):
        if onehots is not None:
            slc = tc.subsample3d(onehots[b], idx, cfg.s.as_tuple())
        else:
            slc = Tensor(video_onehot(cfg, extract_slice_u8(videos[b], cfg.s, idx)))
        slice_oh.append(slc)
    if use_dec0:
        y = decode_slices(params, cfg, slice_oh, None, prefix="dec0")
    else:
        z = encode_slices(params, cfg, videos, idxs, aux=aux, onehots=onehots)
        y = decode_slices(params, cfg, slice_oh, z)
    mask = np.stack([pixel_loss_mask(cfg, idx, prime_frames) for idx in idxs])
    mask = mask.reshape(len(idxs), P)
    if cfg.head == "categorical":
        flat = [tc.reshape(oh, (1, P, cfg.input_channels)) for oh in slice_oh]
        oh_flat = flat[0] if len(flat) == 1 else tc.concat(flat, axis=0)
        logits = head_logits(params, cfg, y, oh_flat)
        targets = np.stack([
            split_channels(extract_slice_u8(videos[b], cfg.s, idx)).reshape(P, cfg.n_channels)
            for b, idx in enumerate(idxs)]).astype(np.int64)
        loss, n_pix = nll_loss(logits, targets, mask)
        return loss, n_pix, logits
    pred = head_intensity(params, cfg, y)
    targets = np.stack([
        extract_slice_u8(videos[b], cfg.s, idx).reshape(P, 1)
        for b, idx in enumerate(idxs)]).astype(np.float32) / 255.0
    loss = deterministic_loss(pred, targets, mask)
    return loss, float(mask.sum()), pred


def extract_slice_u8(video, s, idx):
    a, b, c = idx
    return np.ascontiguousarray(video[a::s.t, b::s.h, c::s.w])


def encode_slice(params, cfg, video, idx, aux=None):
    """Single-slice convenience wrapper; returns a (T',H',W',d) Tensor."""
    z = encode_slices(params, cfg, [video], [idx], aux=None if aux is None else [aux])
    return tc.reshape(z, z.data.shape[1:])


def decode_slice(params, cfg, slice_values, z, idx=None):
    """Single-slice convenience wrapper: slice_values (T',H',W',nc) ints,
    z the (T',H',W',d) encoder output Tensor."""
    oh = Tensor(tc.one_hot(np.asarray(slice_values), N_VALUES))
    zb = tc.reshape(z, (1,) + z.data.shape)
    y = decode_slices(params, cfg, [oh], zb)
    return tc.reshape(y, y.data.shape[1:])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, arrays):
    """Write named float32 arrays: magic, version, count, then per entry the
    path, rank, extents and little-endian payload.  Bit-exact round trip."""
    names = sorted(arrays)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    from .data import DataError

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    off = 4
    version, count = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", raw, off)
            off += 8 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = arr.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated checkpoint ({e})") from e
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes in checkpoint")
    return out


def params_from_checkpoint(cfg, arrays):
    """Rebuild a ParamStore, checking every expected name and shape."""
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        got = arrays[name]
        if tuple(got.shape) != shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {got.shape}, expected {shape}")
        params[name] = Tensor(got.astype(np.float32), requires_grad=True)
    return ParamStore(params)

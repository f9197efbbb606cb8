"""RMSProp-with-momentum training over shuffled video slices.

The optimizer is the non-centered variant with momentum applied to the
preconditioned gradient and epsilon inside the square root:

    acc <- decay*acc + (1-decay)*g^2
    mom <- momentum*mom + lr*g/sqrt(acc + eps)
    p   <- p - mom

Batches shuffle the full (video x slice) product every epoch so one batch
rarely concentrates on a single video; videos longer than the training
length are cropped randomly in time.  No gradient clipping and no explicit
regularization.  Everything is seeded: a fixed seed in single-threaded mode
reproduces the loss trajectory, checkpoints and logs bit for bit.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as tc
from .subscale import slice_order
from .tensor import ConfigError


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class RmsPropConfig:
    lr: float = 2e-5
    decay: float = 0.95
    momentum: float = 0.9
    eps: float = 1e-8


class OptimizerState:
    """Per-parameter second-moment and momentum buffers."""

    def __init__(self, params, hyper=None):
        self.hyper = hyper or RmsPropConfig()
        self.acc = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.mom = {n: np.zeros_like(t.data) for n, t in params.items()}

    def arrays(self):
        out = {}
        for n, a in self.acc.items():
            out[f"opt/acc/{n}"] = a
        for n, a in self.mom.items():
            out[f"opt/mom/{n}"] = a
        return out

    def load_arrays(self, arrays):
        for n in self.acc:
            self.acc[n] = arrays[f"opt/acc/{n}"].reshape(self.acc[n].shape).copy()
            self.mom[n] = arrays[f"opt/mom/{n}"].reshape(self.mom[n].shape).copy()


def rmsprop_step(params, grads, state):
    """One elementwise-independent update of every parameter in place."""
    h = state.hyper
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != param {name} shape {t.data.shape}")
        acc = state.acc[name]
        mom = state.mom[name]
        acc *= h.decay
        acc += (1.0 - h.decay) * g * g
        mom *= h.momentum
        mom += h.lr * g / np.sqrt(acc + h.eps)
        t.data -= mom


def make_batches(n_videos, s, batch_size, seed):
    """Endless stream of [(video_index, slice_index), ...] batches.

    Every epoch reshuffles the full (video x slice) product with a seed
    derived from (seed, epoch), so the stream is reproducible and a resumed
    run can fast-forward to any step.
    """
    if n_videos < 1:
        raise ConfigError("empty dataset")
    order = slice_order(s)
    pairs = [(v, idx) for v in range(n_videos) for idx in order]
    epoch = 0
    while True:
        rng = np.random.default_rng((seed, epoch))
        perm = rng.permutation(len(pairs))
        for lo in range(0, len(pairs), batch_size):
            chunk = perm[lo:lo + batch_size]
            yield [pairs[i] for i in chunk]
        epoch += 1


def random_temporal_crop(video, t_target, rng):
    """Contiguous t_target frames at a uniform offset."""
    T = video.shape[0]
    if T < t_target:
        raise ConfigError(f"video has {T} frames, need at least {t_target}")
    if T == t_target:
        return video
    off = int(rng.integers(0, T - t_target + 1))
    return video[off:off + t_target]


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_slices: int = 64
    seed: int = 0
    prime_frames: int = 1
    ckpt_every: int = 0           # 0: final checkpoint only
    log_every: int = 1
    rmsprop: RmsPropConfig = field(default_factory=RmsPropConfig)
    stop_bits_per_dim: float = 0.0  # 0: never stop early
    stop_window: int = 20


def _nats_to_bpd(nats, n_pixels, dims_per_pixel):
    return nats / (math.log(2.0) * dims_per_pixel * n_pixels)


def train(cfg, tcfg, videos, params=None, opt=None, start_step=0,
          log_path=None, ckpt_path=None, log_fn=None):
    """Train on a list of uint8 videos; returns (params, opt, records).

    Each record is (step, nats, dims, bits_per_dim, wall_ms); the same record
    is appended to ``log_path`` when given.  Raises NumericError on a
    non-finite loss.  For the deterministic head the bits/dim column carries
    nats-per-pixel converted to bits over the byte dimension, so the early
    stop knob works for both heads.
    """
    if tcfg.batch_slices < 1:
        raise ConfigError("batch size must be >= 1")
    for v in videos:
        if v.shape[1:3] != cfg.video_shape[1:3]:
            raise ConfigError(f"video spatial shape {v.shape[1:3]} != config {cfg.video_shape[1:3]}")
        if v.shape[3] != cfg.bytes_per_pixel:
            raise ConfigError(f"video has {v.shape[3]} channels, config wants {cfg.bytes_per_pixel}")
    if params is None:
        params = M.init_params(cfg)
    if opt is None:
        opt = OptimizerState(params, tcfg.rmsprop)
    batches = make_batches(len(videos), cfg.s, tcfg.batch_slices, tcfg.seed)
    crop_rng = np.random.default_rng((tcfg.seed, 0x0C0F))
    # fast-forward deterministic streams when resuming
    for _ in range(start_step):
        batch = next(batches)
        for v_id, _ in batch:
            if videos[v_id].shape[0] != cfg.video_shape[0]:
                crop_rng.integers(0, videos[v_id].shape[0] - cfg.video_shape[0] + 1)
    records = []
    recent = []
    log_file = open(log_path, "a") if log_path else None
    try:
        for step in range(start_step, tcfg.steps):
            t0 = time.monotonic()
            batch = next(batches)
            clips, idxs = [], []
            for v_id, idx in batch:
                clip = videos[v_id]
                if clip.shape[0] != cfg.video_shape[0]:
                    clip = random_temporal_crop(clip, cfg.video_shape[0], crop_rng)
                clips.append(clip)
                idxs.append(idx)
            params.zero_grads()
            nats = 0.0
            n_pix = 0.0
            for group in _split_rank0(cfg, clips, idxs):
                g_clips, g_idxs = group
                loss, pix, _ = M.forward_slices(params, cfg, g_clips, g_idxs,
                                                prime_frames=tcfg.prime_frames)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss at step {step}: {loss.data!r}")
                tc.backward(loss)
                nats += loss.item()
                n_pix += pix
            rmsprop_step(params, params.grads(), opt)
            dims = cfg.bytes_per_pixel * n_pix
            bpd = nats / (math.log(2.0) * dims) if dims else float("nan")
            wall_ms = int((time.monotonic() - t0) * 1000)
            rec = (step, nats, int(dims), bpd, wall_ms)
            records.append(rec)
            if log_file and step % tcfg.log_every == 0:
                log_file.write("step=%d nats=%r dims=%d bits_per_dim=%r wall_ms=%d\n" % rec)
                log_file.flush()
            if log_fn and step % tcfg.log_every == 0:
                log_fn(rec)
            if ckpt_path and tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0:
                save_training_checkpoint(ckpt_path, params, opt, step + 1)
            recent.append(bpd)
            if len(recent) > tcfg.stop_window:
                recent.pop(0)
            if (tcfg.stop_bits_per_dim > 0 and len(recent) == tcfg.stop_window
                    and max(recent) < tcfg.stop_bits_per_dim):
                break
    finally:
        if log_file:
            log_file.close()
    if ckpt_path:
        save_training_checkpoint(ckpt_path, params, opt, records[-1][0] + 1 if records else start_step)
    return params, opt, records


def _split_rank0(cfg, clips, idxs):
    """Separate rank-0 slices when a dedicated first-slice decoder exists."""
    if not cfg.first_slice_decoder:
        yield clips, idxs
        return
    from .subscale import slice_rank
    zero = [i for i, idx in enumerate(idxs) if slice_rank(cfg.s, idx) == 0]
    rest = [i for i in range(len(idxs)) if i not in zero]
    for group in (zero, rest):
        if group:
            yield [clips[i] for i in group], [idxs[i] for i in group]


def save_training_checkpoint(path, params, opt, step):
    arrays = dict(params.arrays())
    arrays.update(opt.arrays())
    arrays["meta/step"] = np.array([step], dtype=np.float32)
    M.save_checkpoint(path, arrays)


def load_training_checkpoint(path, cfg, hyper=None):
    """Returns (params, opt, step); opt state is zero if absent."""
    arrays = M.load_checkpoint(path)
    params = M.params_from_checkpoint(cfg, arrays)
    opt = OptimizerState(params, hyper)
    if any(n.startswith("opt/") for n in arrays):
        opt.load_arrays(arrays)
    step = int(arrays.get("meta/step", np.zeros(1))[0])
    return params, opt, step

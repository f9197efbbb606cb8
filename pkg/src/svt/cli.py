"""Command-line entry point: gen-data, train, eval, sample, analyze.

Configuration is a flat ``key = value`` text file ('#' starts a comment);
unknown keys are rejected and all geometry checks run at load time.  Any
command that takes --config also accepts --dump-config to echo the resolved
configuration and exit, which round-trips through the parser.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numeric error.
The --threads flag (or the SVT_THREADS environment variable) pins the BLAS
thread pools before numpy loads; --threads 1 is the reproducibility
reference.
"""

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


def _configure_threads(argv):
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is None:
        n = os.environ.get("SVT_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# flat config files
# ---------------------------------------------------------------------------

_SCHEMA = {
    # model
    "variant": (str, "spatiotemporal"),
    "preset": (str, "base"),
    "video_t": (int, 16),
    "video_h": (int, 64),
    "video_w": (int, 64),
    "channels": (str, "rgb"),
    "head": (str, "categorical"),
    "subscale_t": (int, 0),       # 0: derived from the variant
    "subscale_h": (int, 0),
    "subscale_w": (int, 0),
    "kernel_t": (int, 0),         # 0: defaults to the subscale factor
    "kernel_h": (int, 0),
    "kernel_w": (int, 0),
    "d_embed": (int, 0),          # 0: preset value
    "d_model": (int, 0),
    "n_heads": (int, 0),
    "d_head": (int, 0),
    "layers": (int, 0),
    "enc_blocks": (str, ""),      # e.g. "2x8x8;2x8x8"; empty: derived
    "dec_blocks": (str, ""),
    "mconv": (int, 3),
    "aux_dim": (int, 0),
    "first_slice_decoder": (bool, False),
    "first_slice_layers": (int, 16),
    "model_seed": (int, 1),
    # training
    "batch_slices": (int, 64),
    "steps": (int, 1000),
    "train_seed": (int, 0),
    "prime_frames": (int, 1),
    "lr": (float, 2e-5),
    "rms_decay": (float, 0.95),
    "rms_momentum": (float, 0.9),
    "rms_eps": (float, 1e-8),
    "ckpt_every": (int, 0),
    "log_every": (int, 1),
    "stop_bits_per_dim": (float, 0.0),
    "stop_window": (int, 20),
    # sampling
    "temperature": (float, 0.9),
    "sample_seed": (int, 0),
    "sample_count": (int, 1),
}


def _parse_value(key, raw):
    kind = _SCHEMA[key][0]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false for {key}, got {raw!r}")
    return kind(raw)


def load_config(path):
    from .tensor import ConfigError

    conf = {k: v for k, (_, v) in _SCHEMA.items()}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for ln_no, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{ln_no}: expected 'key = value', got {line.rstrip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{ln_no}: unknown key {key!r}")
        try:
            conf[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"{path}:{ln_no}: bad value for {key}: {e}") from e
    return conf


def dump_config(conf):
    return "".join(f"{k} = {str(conf[k]).lower() if isinstance(conf[k], bool) else conf[k]}\n"
                   for k in _SCHEMA)


def _parse_blocks(text):
    out = []
    for part in text.split(";"):
        dims = tuple(int(x) for x in part.strip().split("x"))
        if len(dims) != 3:
            raise ValueError(f"block {part!r} is not TxHxW")
        out.append(dims)
    return out


def model_config_from(conf):
    from . import model as M
    from .subscale import SubscaleFactor
    from .tensor import ConfigError

    overrides = {}
    if conf["subscale_t"] or conf["subscale_h"] or conf["subscale_w"]:
        overrides["s"] = SubscaleFactor(conf["subscale_t"] or 1,
                                        conf["subscale_h"] or 1,
                                        conf["subscale_w"] or 1)
    if conf["kernel_t"] or conf["kernel_h"] or conf["kernel_w"]:
        overrides["kernel"] = (conf["kernel_t"] or 1, conf["kernel_h"] or 1,
                               conf["kernel_w"] or 1)
    for conf_key, build_key in (("d_embed", "d_e"), ("d_model", "d"),
                                ("n_heads", "n_heads"), ("d_head", "d_head"),
                                ("layers", "layers")):
        if conf[conf_key]:
            overrides[build_key] = conf[conf_key]
    for key in ("enc_blocks", "dec_blocks"):
        if conf[key]:
            try:
                overrides[key] = _parse_blocks(conf[key])
            except ValueError as e:
                raise ConfigError(f"bad {key}: {e}") from e
    return M.build_variant(
        conf["variant"],
        (conf["video_t"], conf["video_h"], conf["video_w"]),
        preset=conf["preset"],
        channels=conf["channels"],
        head=conf["head"],
        mconv=(conf["mconv"],) * 3,
        aux_dim=conf["aux_dim"],
        first_slice_decoder=conf["first_slice_decoder"],
        first_slice_layers=conf["first_slice_layers"],
        seed=conf["model_seed"],
        **overrides,
    )


def train_config_from(conf, args):
    from .optim import RmsPropConfig, TrainConfig

    return TrainConfig(
        steps=args.steps if args.steps is not None else conf["steps"],
        batch_slices=conf["batch_slices"],
        seed=conf["train_seed"],
        prime_frames=conf["prime_frames"],
        ckpt_every=conf["ckpt_every"],
        log_every=conf["log_every"],
        rmsprop=RmsPropConfig(lr=conf["lr"], decay=conf["rms_decay"],
                              momentum=conf["rms_momentum"], eps=conf["rms_eps"]),
        stop_bits_per_dim=conf["stop_bits_per_dim"],
        stop_window=conf["stop_window"],
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args):
    from .data import gen_sprites, write_container

    videos = gen_sprites(args.frames, args.height, args.width, args.videos,
                         n_sprites=args.sprites, sprite_size=args.sprite_size,
                         vel_max=args.vel_max, channels=1 if args.gray else 3,
                         seed=args.seed)
    write_container(args.out, videos)
    print(f"wrote {len(videos)} videos "
          f"({args.frames}x{args.height}x{args.width}x{1 if args.gray else 3}) to {args.out}")
    return EXIT_OK


def _cmd_import_raw(args):
    from .data import import_raw, write_container

    videos = import_raw(args.raw, args.frames, args.height, args.width,
                        args.channels)
    write_container(args.out, videos)
    print(f"imported {len(videos)} videos from {args.raw} to {args.out}")
    return EXIT_OK


def _load_for(args):
    conf = load_config(args.config)
    if getattr(args, "dump_config", False):
        sys.stdout.write(dump_config(conf))
        return conf, None
    return conf, model_config_from(conf)


def _cmd_train(args):
    from . import optim
    from .data import read_container

    conf, cfg = _load_for(args)
    if cfg is None:
        return EXIT_OK
    videos = read_container(args.data)
    tcfg = train_config_from(conf, args)
    params = opt = None
    start = 0
    if args.resume:
        params, opt, start = optim.load_training_checkpoint(args.resume, cfg, tcfg.rmsprop)
    def echo(rec):
        print("step=%d nats=%r dims=%d bits_per_dim=%r wall_ms=%d" % rec)
    params, opt, records = optim.train(cfg, tcfg, videos, params=params, opt=opt,
                                       start_step=start, log_path=args.log,
                                       ckpt_path=args.out_ckpt, log_fn=echo)
    if records:
        print(f"finished at step {records[-1][0]} bits_per_dim={records[-1][3]!r}")
    return EXIT_OK


def _cmd_eval(args):
    from . import metrics, model as M
    from .data import read_container

    conf, cfg = _load_for(args)
    if cfg is None:
        return EXIT_OK
    params = M.params_from_checkpoint(cfg, M.load_checkpoint(args.ckpt))
    videos = read_container(args.data)
    prime = args.prime if args.prime is not None else conf["prime_frames"]
    result = metrics.evaluate(params, cfg, videos, prime)
    text = "\n".join(result.lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return EXIT_OK


def _cmd_sample(args):
    from . import model as M
    from .data import read_container, write_container, write_ppm_frames
    from .sampler import SampleConfig, sample_video

    conf, cfg = _load_for(args)
    if cfg is None:
        return EXIT_OK
    params = M.params_from_checkpoint(cfg, M.load_checkpoint(args.ckpt))
    primes = read_container(args.prime_video)
    scfg = SampleConfig(
        prime_frames=args.prime_frames if args.prime_frames is not None else conf["prime_frames"],
        temperature=args.temperature if args.temperature is not None else conf["temperature"],
        seed=args.seed if args.seed is not None else conf["sample_seed"],
        count=args.count if args.count is not None else conf["sample_count"],
    )
    outputs = []
    for i in range(scfg.count):
        video, _split = sample_video(params, cfg, primes[i % len(primes)], scfg,
                                     video_index=i)
        outputs.append(video)
    write_container(args.out, outputs)
    if args.ppm:
        for i, v in enumerate(outputs):
            write_ppm_frames(f"{args.ppm}_{i:03d}", v)
    print(f"wrote {len(outputs)} sampled videos to {args.out}")
    return EXIT_OK


def _cmd_analyze(args):
    from .connectivity import report_text

    conf, cfg = _load_for(args)
    if cfg is None:
        return EXIT_OK
    text = report_text(cfg.slice_shape, cfg.dec_schedule, cfg.mconv,
                       enc_schedule=cfg.enc_schedule, max_pairs=args.max_blind,
                       stack=args.stack)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="svt",
        description="Train, evaluate, sample and analyze subscale video models.")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread count (1 = reproducibility reference); "
                             "SVT_THREADS is the fallback")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic bouncing-sprite dataset")
    g.add_argument("--out", required=True, help="output container path")
    g.add_argument("--preset", default="sprites", choices=["sprites"],
                   help="generator preset")
    g.add_argument("--videos", type=int, default=4, help="number of videos")
    g.add_argument("--frames", type=int, default=16, help="frames per video")
    g.add_argument("--height", type=int, default=64, help="frame height")
    g.add_argument("--width", type=int, default=64, help="frame width")
    g.add_argument("--sprites", type=int, default=2, help="sprites per video")
    g.add_argument("--sprite-size", type=int, default=3, help="square sprite side")
    g.add_argument("--vel-max", type=int, default=1, help="max |velocity| component")
    g.add_argument("--gray", action="store_true", help="grayscale instead of RGB")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.set_defaults(fn=_cmd_gen_data)

    i = sub.add_parser("import-raw",
                       help="wrap a raw uint8 video file into a container")
    i.add_argument("--raw", required=True, help="raw bytes, N stacked videos")
    i.add_argument("--out", required=True, help="output container path")
    i.add_argument("--frames", type=int, required=True)
    i.add_argument("--height", type=int, required=True)
    i.add_argument("--width", type=int, required=True)
    i.add_argument("--channels", type=int, default=3, choices=[1, 3])
    i.set_defaults(fn=_cmd_import_raw)

    t = sub.add_parser("train", help="train a model on a video container")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--data", required=True, help="training container")
    t.add_argument("--out-ckpt", required=True, help="checkpoint output path")
    t.add_argument("--steps", type=int, default=None, help="override config steps")
    t.add_argument("--log", default=None, help="append metrics log here")
    t.add_argument("--resume", default=None, help="resume from this checkpoint")
    t.add_argument("--dump-config", action="store_true", help="echo config and exit")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="bits/dim or nats/frame on a container")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--prime", type=int, default=None, help="primed frame count")
    e.add_argument("--out", default=None, help="also write the report here")
    e.add_argument("--dump-config", action="store_true", help="echo config and exit")
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("sample", help="generate videos from a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prime-video", required=True, help="container with priming videos")
    s.add_argument("--prime-frames", type=int, default=None)
    s.add_argument("--temperature", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--count", type=int, default=None, help="number of samples")
    s.add_argument("--out", required=True, help="output container path")
    s.add_argument("--ppm", default=None, help="also dump frames with this prefix")
    s.add_argument("--dump-config", action="store_true", help="echo config and exit")
    s.set_defaults(fn=_cmd_sample)

    a = sub.add_parser("analyze", help="connectivity and blind spots of the schedules")
    a.add_argument("--config", required=True)
    a.add_argument("--stack", default="both", choices=["encoder", "decoder", "both"])
    a.add_argument("--max-blind", type=int, default=16, help="blind pairs to list")
    a.add_argument("--out", default=None, help="also write the report here")
    a.add_argument("--dump-config", action="store_true", help="echo config and exit")
    a.set_defaults(fn=_cmd_analyze)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    from .data import DataError
    from .optim import NumericError
    from .tensor import ConfigError

    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"error[io]: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as e:
        print(f"error[numeric]: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

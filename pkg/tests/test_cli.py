"""Command-line interface: config handling, commands, exit codes,
determinism of whole runs."""

import subprocess
import sys

import numpy as np
import pytest

from svt import cli
from svt.data import read_container, write_container

TINY_CONFIG = """
# tiny spatiotemporal model for CLI tests
variant = spatiotemporal
video_t = 4
video_h = 8
video_w = 8
subscale_t = 2
subscale_h = 2
subscale_w = 2
kernel_t = 3
kernel_h = 3
kernel_w = 3
d_embed = 8
d_model = 16
n_heads = 2
d_head = 8
layers = 2
enc_blocks = 2x4x4;2x4x4
dec_blocks = 2x4x4;2x4x4
model_seed = 3
batch_slices = 4
steps = 3
train_seed = 1
prime_frames = 1
lr = 0.001
temperature = 1.0
sample_seed = 7
"""


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "svt.cli", *map(str, args)],
                          capture_output=True, text=True)


@pytest.fixture
def tiny_setup(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY_CONFIG)
    data = tmp_path / "train.svt"
    rng = np.random.default_rng(0)
    videos = [rng.integers(0, 256, (4, 8, 8, 3)).astype(np.uint8) for _ in range(2)]
    write_container(data, videos)
    return tmp_path, config, data


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("variant = spatial\nbananas = 4\n")
        with pytest.raises(Exception, match="unknown key"):
            cli.load_config(cfg)

    def test_bad_value_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("video_t = soon\n")
        with pytest.raises(Exception, match="video_t"):
            cli.load_config(cfg)

    def test_dump_round_trips(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text(TINY_CONFIG)
        conf = cli.load_config(cfg)
        echoed = tmp_path / "b.cfg"
        echoed.write_text(cli.dump_config(conf))
        assert cli.load_config(echoed) == conf

    def test_geometry_checked_at_load(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("variant = spatiotemporal\nvideo_t = 5\nsubscale_t = 2\n")
        conf = cli.load_config(cfg)
        with pytest.raises(Exception, match="divide"):
            cli.model_config_from(conf)


class TestExitCodes:
    def test_config_error_is_one(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nope = 1\n")
        r = run_cli("analyze", "--config", cfg)
        assert r.returncode == 1
        assert "error[config]" in r.stderr

    def test_io_error_is_two(self, tiny_setup):
        tmp, config, data = tiny_setup
        r = run_cli("train", "--config", config, "--data", tmp / "missing.svt",
                    "--out-ckpt", tmp / "m.ckpt")
        assert r.returncode == 2
        assert "error[io]" in r.stderr

    def test_success_is_zero(self, tiny_setup):
        tmp, config, data = tiny_setup
        r = run_cli("analyze", "--config", config, "--max-blind", 4)
        assert r.returncode == 0


class TestCommands:
    def test_gen_data_deterministic(self, tmp_path):
        a, b = tmp_path / "a.svt", tmp_path / "b.svt"
        for out in (a, b):
            r = run_cli("gen-data", "--out", out, "--videos", 2, "--frames", 4,
                        "--height", 8, "--width", 8, "--seed", 5)
            assert r.returncode == 0
        assert a.read_bytes() == b.read_bytes()

    def test_analyze_reports_blind_and_connected(self, tiny_setup):
        tmp, config, _ = tiny_setup
        r = run_cli("analyze", "--config", config, "--stack", "both",
                    "--max-blind", 4)
        assert r.returncode == 0
        assert "blind pairs:" in r.stdout
        assert "encoder connectivity: connected" in r.stdout

    def test_train_eval_sample_pipeline(self, tiny_setup):
        tmp, config, data = tiny_setup
        ckpt = tmp / "model.ckpt"
        log = tmp / "train.log"
        r = run_cli("--threads", 1, "train", "--config", config, "--data", data,
                    "--out-ckpt", ckpt, "--log", log)
        assert r.returncode == 0, r.stderr
        assert ckpt.exists() and len(log.read_text().splitlines()) == 3

        r = run_cli("eval", "--config", config, "--ckpt", ckpt, "--data", data,
                    "--prime", 1)
        assert r.returncode == 0, r.stderr
        assert "bits_per_dim=" in r.stdout

        out = tmp / "samples.svt"
        r = run_cli("sample", "--config", config, "--ckpt", ckpt,
                    "--prime-video", data, "--prime-frames", 4, "--out", out)
        assert r.returncode == 0, r.stderr
        # priming with every frame echoes the prime video
        assert np.array_equal(read_container(out)[0], read_container(data)[0])

    def test_dump_config_flag(self, tiny_setup):
        tmp, config, data = tiny_setup
        r = run_cli("train", "--config", config, "--data", data,
                    "--out-ckpt", tmp / "x.ckpt", "--dump-config")
        assert r.returncode == 0
        assert "variant = spatiotemporal" in r.stdout
        assert not (tmp / "x.ckpt").exists()

    def test_help_lists_flags(self):
        r = run_cli("sample", "--help")
        assert r.returncode == 0
        for flag in ("--config", "--ckpt", "--prime-video", "--prime-frames",
                     "--temperature", "--seed", "--out"):
            assert flag in r.stdout

    def test_import_raw_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        payload = rng.integers(0, 256, 2 * 4 * 8 * 8 * 3).astype(np.uint8)
        raw = tmp_path / "clips.bin"
        raw.write_bytes(payload.tobytes())
        out = tmp_path / "clips.svt"
        r = run_cli("import-raw", "--raw", raw, "--out", out, "--frames", 4,
                    "--height", 8, "--width", 8, "--channels", 3)
        assert r.returncode == 0, r.stderr
        videos = read_container(out)
        assert len(videos) == 2
        assert np.array_equal(np.concatenate([v.reshape(-1) for v in videos]), payload)

    def test_import_raw_bad_size_is_io_error(self, tmp_path):
        raw = tmp_path / "clips.bin"
        raw.write_bytes(b"\x00" * 100)
        r = run_cli("import-raw", "--raw", raw, "--out", tmp_path / "o.svt",
                    "--frames", 4, "--height", 8, "--width", 8)
        assert r.returncode == 2
        assert "error[io]" in r.stderr


class TestThreadsAndNumeric:
    def test_threads_flag_sets_blas_env(self, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        cli._configure_threads(["--threads", "1", "analyze"])
        import os
        assert all(os.environ[v] == "1" for v in cli._THREAD_VARS)

    def test_svt_threads_env_fallback(self, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        monkeypatch.setenv("SVT_THREADS", "2")
        cli._configure_threads(["train"])
        import os
        assert all(os.environ[v] == "2" for v in cli._THREAD_VARS)

    def test_nonfinite_loss_exits_three(self, tiny_setup):
        from svt import model as M, optim as O
        from svt.cli import load_config, model_config_from

        tmp, config, data = tiny_setup
        cfg = model_config_from(load_config(config))
        params = M.init_params(cfg)
        params["enc/in_proj"].data[0, 0] = np.nan
        poisoned = tmp / "poisoned.ckpt"
        O.save_training_checkpoint(poisoned, params, O.OptimizerState(params), 0)
        r = run_cli("train", "--config", config, "--data", data,
                    "--out-ckpt", tmp / "out.ckpt", "--resume", poisoned)
        assert r.returncode == 3
        assert "error[numeric]" in r.stderr


class TestDeterminism:
    def test_two_runs_bit_identical(self, tiny_setup):
        """Same seed, --threads 1: loss logs (minus wall time), checkpoints
        and samples agree byte for byte."""
        tmp, config, data = tiny_setup
        results = []
        for tag in ("one", "two"):
            ck, lg, sm = (tmp / f"{tag}.ckpt", tmp / f"{tag}.log", tmp / f"{tag}.svt")
            r = run_cli("--threads", 1, "train", "--config", config, "--data",
                        data, "--out-ckpt", ck, "--log", lg)
            assert r.returncode == 0, r.stderr
            r = run_cli("--threads", 1, "sample", "--config", config, "--ckpt",
                        ck, "--prime-video", data, "--prime-frames", 1,
                        "--out", sm, "--seed", 3)
            assert r.returncode == 0, r.stderr
            strip = [" ".join(kv for kv in line.split() if not kv.startswith("wall_ms"))
                     for line in lg.read_text().splitlines()]
            results.append((ck.read_bytes(), strip, sm.read_bytes()))
        assert results[0] == results[1]

import numpy as np
import pytest

from twostream.cli import main
from twostream.retina import SpikingTensor
from twostream.snn import SpikingConvLayer

from helpers import SMALL_CONFIG


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(SMALL_CONFIG)
    return str(p)


def run(*args):
    return main([str(a) for a in args])


def test_staged_commands_reproduce_monolithic_report(tmp_path, cfg_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    c = ["--config", cfg_path]
    assert run("synth", *c, "--out", "data") == 0
    m = ["--manifest", "data/manifest.tsv"]
    for role in ("spatial", "temporal"):
        assert run("encode", *c, "--stream", role, *m, "--out", f"enc_{role}") == 0
    for seed in (1, 2):
        for role in ("spatial", "temporal"):
            assert run("train-stream", *c, "--seed", seed, "--stream", role, *m, "--encoded", f"enc_{role}",
                       "--out", f"{role}{seed}.ckpt") == 0
            assert run("extract", *c, "--seed", seed, "--stream", role, *m, "--encoded", f"enc_{role}",
                       "--layer", f"{role}{seed}.ckpt", "--out", f"f_{role}{seed}") == 0
            assert run("classify", *c, "--seed", seed, "--column", role, *m, "--features", f"f_{role}{seed}",
                       "--out", "results.csv") == 0
        assert run("fuse", *c, "--a", f"f_spatial{seed}", "--b", f"f_temporal{seed}", "--out", f"f_fused{seed}") == 0
        assert run("classify", *c, "--seed", seed, "--column", "fused", *m, "--features", f"f_fused{seed}",
                   "--out", "results.csv") == 0
    assert run("report", *c, "--results", "results.csv", "--out", "staged.txt") == 0
    assert run("run", *c, "--out", "mono.txt") == 0
    assert (tmp_path / "staged.txt").read_bytes() == (tmp_path / "mono.txt").read_bytes()


def test_encode_single_clip_prints_stats(tmp_path, cfg_path, capsys):
    assert run("synth", "--config", cfg_path, "--out", tmp_path / "d") == 0
    clip = tmp_path / "d" / "clips" / "bar-up_0000.vt"
    capsys.readouterr()
    assert run("encode", "--config", cfg_path, "--clip", clip, "--out", tmp_path / "c.spk") == 0
    out = capsys.readouterr().out
    spikes = SpikingTensor.load(tmp_path / "c.spk")
    spikes.check()
    assert f"events={len(spikes)}" in out and f"mean_time={spikes.t.mean():.6f}" in out


def test_train_stream_with_named_temporal_kind(tmp_path, cfg_path):
    assert run("synth", "--config", cfg_path, "--out", tmp_path / "d") == 0
    m = tmp_path / "d" / "manifest.tsv"
    stream = "temporal.frame-subtraction+conv3d"
    assert run("encode", "--config", cfg_path, "--stream", stream, "--manifest", m, "--out", tmp_path / "e") == 0
    assert run("train-stream", "--config", cfg_path, "--stream", stream, "--manifest", m,
               "--encoded", tmp_path / "e", "--out", tmp_path / "t.ckpt") == 0
    layer = SpikingConvLayer.from_bytes((tmp_path / "t.ckpt").read_bytes())
    assert layer.config.kernel == (5, 5, 2) and layer.config.filters == 4


def test_missing_upstream_artifact_names_producer(tmp_path, cfg_path, capsys):
    code = run("train-stream", "--config", cfg_path, "--manifest", tmp_path / "none.tsv",
               "--encoded", tmp_path / "e", "--out", tmp_path / "x.ckpt")
    assert code == 2 and "run `synth` first" in capsys.readouterr().err
    assert run("synth", "--config", cfg_path, "--out", tmp_path / "d") == 0
    code = run("extract", "--config", cfg_path, "--manifest", tmp_path / "d" / "manifest.tsv",
               "--encoded", tmp_path / "e", "--layer", tmp_path / "x.ckpt", "--out", tmp_path / "f")
    assert code == 2 and "run `train-stream` first" in capsys.readouterr().err
    code = run("report", "--config", cfg_path, "--results", tmp_path / "r.csv")
    assert code == 2 and "run `classify` first" in capsys.readouterr().err


def test_usage_errors_exit_one(cfg_path, capsys):
    assert run() == 1
    assert run("bogus") == 1
    assert run("train-stream", "--config", cfg_path) == 1
    assert run("run", "--config", cfg_path, "--set", "layer.filterz=3") == 1
    assert run("encode", "--config", cfg_path, "--out", "x") == 1


def test_corrupt_artifact_is_data_error(tmp_path, cfg_path):
    (tmp_path / "bad.vt").write_bytes(b"junk")
    assert run("encode", "--config", cfg_path, "--clip", tmp_path / "bad.vt", "--out", tmp_path / "o.spk") == 2


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "train-stream" in capsys.readouterr().out


def test_synth_seed_flag_changes_content(tmp_path, cfg_path):
    run("synth", "--config", cfg_path, "--seed", 1, "--out", tmp_path / "a")
    run("synth", "--config", cfg_path, "--seed", 2, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "clips" / "bar-up_0000.vt").read_bytes()
    b = (tmp_path / "b" / "clips" / "bar-up_0000.vt").read_bytes()
    assert a != b and np.frombuffer(a[:4], "S4")[0] == b"VTNS"

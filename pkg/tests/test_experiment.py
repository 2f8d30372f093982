from pathlib import Path

import numpy as np
import pytest

from twostream import experiment as ex
from twostream.config import ExperimentConfig
from twostream.errors import StageError, StreamConfigError
from twostream.experiment import PipelineCache, format_report, parse_result_lines, run_experiment

from helpers import SMALL_CONFIG


@pytest.fixture
def cfg():
    return ExperimentConfig.from_text(SMALL_CONFIG)


def test_report_has_three_columns(cfg):
    report = format_report(run_experiment(cfg))
    lines = report.splitlines()
    assert lines[0] == "experiment: tiny"
    assert [h.strip() for h in lines[3].split("|")] == ["Raw vid (2D conv)", "FS (2D conv)", "Fused"]
    cells = [c.strip() for c in lines[5].split("|")]
    assert len(cells) == 3 and all(" ± " in c for c in cells)
    rows = [line for line in lines if line.startswith("tiny,")]
    assert len(rows) == 6


def test_repeat_runs_are_byte_identical(cfg):
    assert format_report(run_experiment(cfg)) == format_report(run_experiment(cfg))


def test_conv3d_temporal_stream(cfg):
    cfg.temporal.kind = "conv3d"
    result = run_experiment(cfg)
    assert result.labels["temporal"] == "Raw vid (3D conv)"


def test_parse_result_lines_rebuilds_report(cfg):
    result = run_experiment(cfg)
    text = format_report(result)
    back = parse_result_lines(text, result.labels)
    back.seeds = result.seeds
    assert format_report(back) == text


def test_cache_hits_reproduce_results(cfg, tmp_path, monkeypatch):
    cache = PipelineCache(tmp_path)
    fresh = format_report(run_experiment(cfg))
    first = format_report(run_experiment(cfg, cache))
    assert first == fresh
    stored = sorted(p.relative_to(tmp_path).parts[0] for p in tmp_path.rglob("*") if p.is_file())
    assert set(stored) == {"encode", "layer", "features"}
    assert not list(tmp_path.rglob(".tmp-*"))

    def boom(*args, **kwargs):
        raise AssertionError("recomputed a cached stage")

    monkeypatch.setattr(ex, "train_layer", boom)
    monkeypatch.setattr(ex, "retina_transform", boom)
    monkeypatch.setattr(ex, "forward_times", boom)
    assert format_report(run_experiment(cfg, cache)) == fresh


def test_cache_invalidates_on_relevant_change(cfg, tmp_path):
    cache = PipelineCache(tmp_path)
    run_experiment(cfg, cache)
    layers_before = len(list((tmp_path / "layer").iterdir()))
    encodes_before = len(list((tmp_path / "encode").iterdir()))
    cfg.layer.target_time = 0.7
    run_experiment(cfg, cache)
    assert len(list((tmp_path / "layer").iterdir())) == 2 * layers_before
    assert len(list((tmp_path / "encode").iterdir())) == encodes_before
    cfg.codec.cutoff = 10
    run_experiment(cfg, cache)
    assert len(list((tmp_path / "encode").iterdir())) == 2 * encodes_before
    # svm settings never touch cached artifacts
    n_files = len(list(tmp_path.rglob("*")))
    cfg.svm.C = 3.0
    run_experiment(cfg, cache)
    assert len(list(tmp_path.rglob("*"))) == n_files


def test_cache_from_env(monkeypatch, tmp_path):
    monkeypatch.delenv(ex.CACHE_ENV, raising=False)
    assert PipelineCache.from_env() is None
    monkeypatch.setenv(ex.CACHE_ENV, str(tmp_path))
    assert PipelineCache.from_env().root == Path(tmp_path)


def test_cache_write_is_atomic(tmp_path, monkeypatch):
    cache = PipelineCache(tmp_path)
    cache.put("s", "k", b"old")

    def fail(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(ex.os, "replace", fail)
    with pytest.raises(OSError):
        cache.put("s", "k", b"new")
    assert cache.get("s", "k") == b"old"
    assert [p.name for p in (tmp_path / "s").iterdir()] == ["k"]


def test_stage_errors_name_stage_and_sample(cfg, monkeypatch):
    def broken(clip, kind, flow_params):
        raise StreamConfigError("bad clip")

    monkeypatch.setattr(ex, "stream_input", broken)
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "encode" and info.value.sample == "bar-left_0000"


def test_parallel_runs_match_sequential(cfg):
    seq = format_report(run_experiment(cfg))
    cfg.experiment.workers = 2
    assert format_report(run_experiment(cfg)) == seq


def test_single_stream_inputs_are_normalized(cfg):
    vec = ex.FeatureVector(np.array([3.0, 4.0]), [("spatial", 0, 2)])
    np.testing.assert_allclose(ex.svm_input(vec, True), [0.6, 0.8])
    np.testing.assert_allclose(ex.svm_input(vec, False), [3.0, 4.0])

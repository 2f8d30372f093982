import pytest

from twostream.config import TEMPORAL_KINDS, ExperimentConfig
from twostream.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig.from_text("")
    assert cfg.experiment.seeds == [1, 2, 3] and cfg.experiment.runs == 3
    assert cfg.layer.filters == 64 and cfg.codec.size == 7 and cfg.svm.C == 1.0


def test_parse_with_comments_and_lists():
    cfg = ExperimentConfig.from_text("""
        # micro benchmark
        experiment.runs = 2
        experiment.seeds = 4, 9
        temporal.kind = motion-grid   # single frame
        dataset.classes = bar-left,bar-up
        fusion.normalize = false
    """)
    assert cfg.experiment.seeds == [4, 9]
    assert cfg.temporal.kind == "motion-grid" and cfg.dataset.classes == ["bar-left", "bar-up"]
    assert cfg.fusion.normalize is False


def test_overrides_win():
    cfg = ExperimentConfig.from_text("layer.filters = 8", {"layer.filters": "16"})
    assert cfg.layer.filters == 16


@pytest.mark.parametrize("text", [
    "layer.filterz = 3", "nosection.x = 1", "layer.filters", "layer.filters = many",
    "experiment.seeds = 1,2", "temporal.kind = optical-flow+conv3d", "spatial.conv = 4d",
    "codec.sigma1 = 5", "dataset.kind = manifest", "temporal.pool_depth = 3", "layer.target_time = 1.5",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


def test_text_round_trip():
    cfg = ExperimentConfig.from_text("codec.cutoff = 20\nlayer.filters = 16\ntemporal.kind = conv3d")
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg and back.digest() == cfg.digest()
    assert cfg.digest("layer") != ExperimentConfig.from_text("").digest("layer")
    assert cfg.digest("svm") == ExperimentConfig.from_text("").digest("svm")


def test_six_temporal_configurations():
    labels = {}
    for name in TEMPORAL_KINDS:
        cfg = ExperimentConfig.from_text(f"temporal.kind = {name}")
        labels[name] = cfg.stream("temporal").label
    assert labels == {
        "early-fusion": "EF (2D conv)", "optical-flow": "OF (2D conv)", "frame-subtraction": "FS (2D conv)",
        "motion-grid": "MG (2D conv)", "conv3d": "Raw vid (3D conv)", "frame-subtraction+conv3d": "FS (3D conv)",
    }


def test_pool_depth_defaults():
    cfg = ExperimentConfig.from_text("")
    assert cfg.stream("spatial").pool_depth == 1
    assert cfg.stream("temporal").pool_depth == 2
    assert ExperimentConfig.from_text("temporal.kind = early-fusion").stream("temporal").pool_depth == 1
    assert ExperimentConfig.from_text("temporal.pool_depth = 1").stream("temporal").pool_depth == 1


def test_layer_config_view():
    cfg = ExperimentConfig.from_text("layer.kernel_depth = 2\nlayer.target_time = 0.75")
    assert cfg.layer_config(2, "3d").kernel == (5, 5, 2)
    assert cfg.layer_config(2, "2d").kernel == (5, 5, 1)
    assert cfg.layer_config(6, "2d").target_time == 0.75


def test_missing_file():
    with pytest.raises(ConfigError):
        ExperimentConfig.load("/nonexistent/experiment.cfg")

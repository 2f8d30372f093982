"""Experiment configuration: flat ``section.key = value`` text.

Blank lines and ``#`` comments are ignored. Lists are comma separated. Unknown
keys are rejected so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .motion import STREAM_KINDS, FlowParams
from .retina import DoGParams
from .snn import HomeostasisParams, LayerConfig, STDPParams
from .video import ClipSpec, SyntheticSpec

# The six temporal-stream configurations: name -> (input kind, convolution)
TEMPORAL_KINDS = {
    "early-fusion": ("early-fusion", "2d"),
    "optical-flow": ("optical-flow", "2d"),
    "frame-subtraction": ("frame-subtraction", "2d"),
    "motion-grid": ("motion-grid", "2d"),
    "conv3d": ("raw", "3d"),
    "frame-subtraction+conv3d": ("frame-subtraction", "3d"),
}
SINGLE_FRAME_KINDS = ("early-fusion", "motion-grid")


@dataclass
class ExperimentSection:
    name: str = "experiment"
    runs: int = 3
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    workers: int = 1  # runs executed in parallel processes


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    manifest: str = ""
    protocol: str = ""
    classes: list[str] = field(default_factory=lambda: ["bar-left", "bar-right", "bar-up", "bar-down"])
    n_per_class: int = 30
    seed: int = 7
    height: int = 28
    width: int = 28
    frames: int = 10
    textures: list[str] = field(default_factory=lambda: ["A", "B"])
    noise: float = 0.03
    dynamic_noise: float = 0.0


@dataclass
class ClipSection:
    frames_per_clip: int = 10
    frame_stride: int = 4
    spatial_scale: float = 0.5


@dataclass
class CodecSection:
    size: int = 7
    sigma1: float = 1.0
    sigma2: float = 4.0
    cutoff: float = 0.0
    t_exposition: float = 1.0


@dataclass
class FlowSection:
    levels: int = 3
    window: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    pyr_scale: float = 0.5


@dataclass
class SpatialSection:
    kind: str = "raw"
    conv: str = "2d"
    pool_depth: int = 0  # 0 picks the default for the stream


@dataclass
class TemporalSection:
    kind: str = "frame-subtraction"
    pool_depth: int = 0


@dataclass
class LayerSection:
    filters: int = 64
    kernel: int = 5
    kernel_depth: int = 2  # temporal kernel size of 3D layers
    stride: int = 1
    target_time: float = 0.65
    eta_w: float = 0.1
    tau: float = 0.1
    eta_th: float = 1.0
    th_min: float = 1.0
    th_init_mean: float = 5.0
    th_init_sd: float = 1.0
    patches_per_clip: int = 20
    epochs: int = 1


@dataclass
class PoolSection:
    grid_w: int = 20
    grid_h: int = 20


@dataclass
class FusionSection:
    normalize: bool = True


@dataclass
class SvmSection:
    C: float = 1.0
    epochs: int = 100


SECTIONS = {
    "experiment": ExperimentSection,
    "dataset": DatasetSection,
    "clip": ClipSection,
    "codec": CodecSection,
    "flow": FlowSection,
    "spatial": SpatialSection,
    "temporal": TemporalSection,
    "layer": LayerSection,
    "pool": PoolSection,
    "fusion": FusionSection,
    "svm": SvmSection,
}


@dataclass(frozen=True)
class StreamSpec:
    role: str  # "spatial" or "temporal"
    kind: str  # input representation, one of motion.STREAM_KINDS
    conv: str  # "2d" or "3d"
    pool_depth: int

    @property
    def label(self) -> str:
        short = {"raw": "Raw vid", "early-fusion": "EF", "optical-flow": "OF",
                 "frame-subtraction": "FS", "motion-grid": "MG"}[self.kind]
        return f"{short} ({self.conv.upper()} conv)"


def _parse_value(raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ == list[int]:
            return [int(v) for v in raw.split(",") if v.strip()]
        if typ == list[str]:
            return [v.strip() for v in raw.split(",") if v.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {typ}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    clip: ClipSection = field(default_factory=ClipSection)
    codec: CodecSection = field(default_factory=CodecSection)
    flow: FlowSection = field(default_factory=FlowSection)
    spatial: SpatialSection = field(default_factory=SpatialSection)
    temporal: TemporalSection = field(default_factory=TemporalSection)
    layer: LayerSection = field(default_factory=LayerSection)
    pool: PoolSection = field(default_factory=PoolSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    svm: SvmSection = field(default_factory=SvmSection)

    # -- text form ---------------------------------------------------------

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        hints = get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _parse_value(raw, hints[name]))

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"config line {lineno}: expected 'key = value'")
            cfg.set(key.strip(), value)
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, overrides)

    def to_text(self, sections=None) -> str:
        lines = []
        for section in sections or SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self, *sections: str) -> str:
        return hashlib.sha256(self.to_text(sections or None).encode()).hexdigest()

    def validate(self) -> None:
        e = self.experiment
        if e.runs < 1:
            raise ConfigError("experiment.runs must be >= 1")
        if len(e.seeds) != e.runs:
            raise ConfigError(f"experiment.seeds has {len(e.seeds)} entries for {e.runs} runs")
        if e.workers < 1:
            raise ConfigError("experiment.workers must be >= 1")
        if self.temporal.kind not in TEMPORAL_KINDS:
            raise ConfigError(f"temporal.kind must be one of {sorted(TEMPORAL_KINDS)}")
        if self.spatial.kind not in STREAM_KINDS:
            raise ConfigError(f"spatial.kind must be one of {STREAM_KINDS}")
        if self.spatial.conv not in ("2d", "3d"):
            raise ConfigError("spatial.conv must be 2d or 3d")
        if self.dataset.kind not in ("synthetic", "manifest"):
            raise ConfigError("dataset.kind must be synthetic or manifest")
        if self.dataset.kind == "manifest" and not self.dataset.manifest:
            raise ConfigError("dataset.manifest is required for manifest datasets")
        for section in (self.spatial, self.temporal):
            if section.pool_depth not in (0, 1, 2):
                raise ConfigError("pool_depth must be 0 (default), 1 or 2")
        # constructing the parameter objects runs their own checks
        self.dog_params().validate()
        self.flow_params()
        self.clip_spec()
        self.layer_config(2, "2d")

    # -- typed views -------------------------------------------------------

    def dog_params(self) -> DoGParams:
        c = self.codec
        return DoGParams(c.size, c.sigma1, c.sigma2, c.cutoff)

    def flow_params(self) -> FlowParams:
        f = self.flow
        return FlowParams(f.levels, f.window, f.iterations, f.poly_n, f.poly_sigma, f.pyr_scale)

    def clip_spec(self) -> ClipSpec:
        c = self.clip
        return ClipSpec(c.frames_per_clip, c.frame_stride, c.spatial_scale)

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.dataset
        return SyntheticSpec(d.height, d.width, d.frames, tuple(d.textures), d.noise, d.dynamic_noise)

    def stream(self, role: str) -> StreamSpec:
        if role == "spatial":
            kind, conv, depth = self.spatial.kind, self.spatial.conv, self.spatial.pool_depth
            default = 1 if (kind == "raw" and conv == "2d") or kind in SINGLE_FRAME_KINDS else 2
        elif role == "temporal":
            kind, conv = TEMPORAL_KINDS[self.temporal.kind]
            depth = self.temporal.pool_depth
            default = 1 if kind in SINGLE_FRAME_KINDS else 2
        else:
            raise ConfigError(f"unknown stream role {role!r}")
        return StreamSpec(role, kind, conv, depth or default)

    def layer_config(self, in_channels: int, conv: str) -> LayerConfig:
        ly = self.layer
        depth = ly.kernel_depth if conv == "3d" else 1
        return LayerConfig(
            kernel=(ly.kernel, ly.kernel, depth), filters=ly.filters, stride=(ly.stride,) * 3,
            in_channels=in_channels, target_time=ly.target_time, t_exposition=self.codec.t_exposition,
            stdp=STDPParams(ly.eta_w, ly.tau),
            homeo=HomeostasisParams(ly.eta_th, ly.th_min, ly.th_init_mean, ly.th_init_sd),
        )

"""Single-layer spiking convolution with integrate-and-fire neurons.

Every input coordinate spikes at most once, so a neuron's membrane potential
is a step function: the sum of the weights whose input has already spiked.
A neuron fires at the first input time where that sum reaches its threshold.
That gives an exact event-driven simulation by sorting the receptive-field
spike times and scanning a running sum of weights, with no time stepping.

Weights are stored as ``(filters, f_td, in_channels, f_h, f_w)``, the same
layout used for receptive-field vectors, so a patch flattens directly against
a weight row. Thresholds are per filter and shared across positions.

Training presents random receptive-field patches. All filters integrate, the
earliest one wins (ties go to the lowest index), only the winner's weights move
under STDP, and every filter's threshold adapts toward the target firing time.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError
from .retina import T_EXPOSITION, SpikingTensor

CHECKPOINT_MAGIC = b"SCLK"
CHECKPOINT_VERSION = 1
_CONFIG_STRUCT = struct.Struct("<3I I 3I I 8d")
# Cap on the (filters x positions x synapses) block evaluated at once.
_CHUNK_ELEMENTS = 1 << 22


class TrainingStallWarning(UserWarning):
    pass


@dataclass(frozen=True)
class STDPParams:
    eta: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if self.eta <= 0 or self.tau <= 0:
            raise ConfigError("STDP learning rate and time constant must be positive")


@dataclass(frozen=True)
class HomeostasisParams:
    eta_th: float = 1.0
    th_min: float = 1.0
    th_init_mean: float = 5.0
    th_init_sd: float = 1.0

    def __post_init__(self):
        if self.eta_th <= 0 or self.th_min <= 0:
            raise ConfigError("threshold learning rate and minimum must be positive")


@dataclass(frozen=True)
class LayerConfig:
    kernel: tuple[int, int, int] = (5, 5, 1)  # (f_w, f_h, f_td)
    filters: int = 64
    stride: tuple[int, int, int] = (1, 1, 1)  # (x, y, t)
    in_channels: int = 2
    target_time: float = 0.65
    t_exposition: float = T_EXPOSITION
    stdp: STDPParams = STDPParams()
    homeo: HomeostasisParams = HomeostasisParams()

    def __post_init__(self):
        if len(self.kernel) != 3 or min(self.kernel) < 1:
            raise ConfigError(f"kernel sizes must be three positive ints, got {self.kernel}")
        if len(self.stride) != 3 or min(self.stride) < 1:
            raise ConfigError(f"strides must be three positive ints, got {self.stride}")
        if self.filters < 1 or self.in_channels < 1:
            raise ConfigError("filter and input channel counts must be positive")
        if not 0 < self.target_time < self.t_exposition:
            raise ConfigError("target time must lie strictly inside the exposition window")

    @property
    def is_3d(self) -> bool:
        return self.kernel[2] > 1

    @property
    def weight_shape(self) -> tuple[int, ...]:
        f_w, f_h, f_td = self.kernel
        return (self.filters, f_td, self.in_channels, f_h, f_w)

    @property
    def synapses(self) -> int:
        f_w, f_h, f_td = self.kernel
        return f_td * self.in_channels * f_h * f_w


@dataclass
class TrainingStats:
    """Instrumentation counters accumulated across train_layer calls."""

    presented: int = 0
    fired: int = 0
    stdp_updates: int = 0
    wins: np.ndarray | None = None


def output_shape(in_dims: tuple[int, int, int], kernel: tuple[int, int, int],
                 stride: tuple[int, int, int]) -> tuple[int, int, int]:
    """``floor((in - f) / stride) + 1`` per axis; all tuples are (x, y, t)."""
    out = []
    for n, f, s in zip(in_dims, kernel, stride):
        if f > n:
            raise ConfigError(f"kernel {kernel} larger than input {in_dims}")
        out.append((n - f) // s + 1)
    return tuple(out)


class SpikingConvLayer:
    def __init__(self, config: LayerConfig, seed: int | np.random.SeedSequence | None = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.weights = self.rng.uniform(0.0, 1.0, size=config.weight_shape)
        th = self.rng.normal(config.homeo.th_init_mean, config.homeo.th_init_sd, size=config.filters)
        self.thresholds = np.maximum(th, config.homeo.th_min)
        self.stats = TrainingStats(wins=np.zeros(config.filters, dtype=np.int64))

    @property
    def weight_matrix(self) -> np.ndarray:
        """Writable ``(filters, synapses)`` view of the weights."""
        return self.weights.reshape(self.config.filters, -1)

    def to_bytes(self) -> bytes:
        """Checkpoint: magic, version, config block, weights, thresholds, rng state, counters."""
        c = self.config
        block = _CONFIG_STRUCT.pack(*c.kernel, c.filters, *c.stride, c.in_channels,
                                    c.target_time, c.t_exposition, c.stdp.eta, c.stdp.tau,
                                    c.homeo.eta_th, c.homeo.th_min, c.homeo.th_init_mean, c.homeo.th_init_sd)
        state = self.rng.bit_generator.state
        if state["bit_generator"] != "PCG64":
            raise FormatError("only PCG64 generator state can be checkpointed")
        rng_block = (state["state"]["state"].to_bytes(16, "little")
                     + state["state"]["inc"].to_bytes(16, "little")
                     + struct.pack("<2I", state["has_uint32"], state["uinteger"]))
        counters = struct.pack("<3Q", self.stats.presented, self.stats.fired, self.stats.stdp_updates)
        return b"".join([
            CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), block,
            self.weights.astype("<f8").tobytes(), self.thresholds.astype("<f8").tobytes(),
            self.stats.wins.astype("<u8").tobytes(), rng_block, counters,
        ])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SpikingConvLayer":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise FormatError("not a layer checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        vals = _CONFIG_STRUCT.unpack_from(raw, 8)
        config = LayerConfig(kernel=tuple(vals[0:3]), filters=vals[3], stride=tuple(vals[4:7]),
                             in_channels=vals[7], target_time=vals[8], t_exposition=vals[9],
                             stdp=STDPParams(vals[10], vals[11]),
                             homeo=HomeostasisParams(vals[12], vals[13], vals[14], vals[15]))
        off = 8 + _CONFIG_STRUCT.size
        n_w = int(np.prod(config.weight_shape))
        k = config.filters
        expected = off + 8 * n_w + 8 * k + 8 * k + 40 + 24
        if len(raw) != expected:
            raise FormatError(f"checkpoint has {len(raw)} bytes, expected {expected}")
        layer = cls.__new__(cls)
        layer.config = config
        layer.weights = np.frombuffer(raw, "<f8", n_w, off).astype(np.float64).reshape(config.weight_shape)
        off += 8 * n_w
        layer.thresholds = np.frombuffer(raw, "<f8", k, off).astype(np.float64)
        off += 8 * k
        wins = np.frombuffer(raw, "<u8", k, off).astype(np.int64)
        off += 8 * k
        rng = np.random.Generator(np.random.PCG64())
        has_uint32, uinteger = struct.unpack_from("<2I", raw, off + 32)
        rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int.from_bytes(raw[off:off + 16], "little"),
                      "inc": int.from_bytes(raw[off + 16:off + 32], "little")},
            "has_uint32": has_uint32, "uinteger": uinteger,
        }
        layer.rng = rng
        presented, fired, updates = struct.unpack_from("<3Q", raw, off + 40)
        layer.stats = TrainingStats(presented, fired, updates, wins)
        return layer


# -- neuron dynamics ---------------------------------------------------------

def integrate(times: Sequence[float], weights: Sequence[float], threshold: float,
              t_exposition: float = T_EXPOSITION) -> float | None:
    """Fire time of one IF neuron, or None if the threshold is never reached.

    ``times`` must be sorted ascending; ``weights[i]`` is the synapse carrying spike i.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        return None
    potential = np.cumsum(np.asarray(weights, dtype=np.float64))
    crossed = np.flatnonzero((potential >= threshold) & (times <= t_exposition))
    if crossed.size == 0:
        return None
    return float(times[crossed[0]])


def fire_times(patches: np.ndarray, weights: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """First-spike times for many neurons.

    ``patches`` is ``(positions, synapses)`` of input spike times (``inf`` for
    silence), ``weights`` is ``(filters, synapses)``. Returns ``(positions,
    filters)`` fire times with ``inf`` where a neuron stays silent.
    """
    n_pos, n_syn = patches.shape
    n_filt = weights.shape[0]
    out = np.full((n_pos, n_filt), np.inf)
    if n_pos == 0:
        return out
    order = np.argsort(patches, axis=1, kind="stable")
    sorted_t = np.take_along_axis(patches, order, axis=1)
    n_active = int(np.isfinite(sorted_t).sum(axis=1).max())
    if n_active == 0:
        return out
    order = order[:, :n_active]
    sorted_t = sorted_t[:, :n_active]
    active = np.isfinite(sorted_t)
    step = max(1, _CHUNK_ELEMENTS // (n_filt * n_active))
    th = thresholds[:, None, None]
    for lo in range(0, n_pos, step):
        hi = min(lo + step, n_pos)
        potential = np.cumsum(weights[:, order[lo:hi]], axis=2)  # (filters, chunk, active)
        crossed = (potential >= th) & active[None, lo:hi]
        has = crossed.any(axis=2)
        first = crossed.argmax(axis=2)
        t = np.take_along_axis(sorted_t[lo:hi], first.T, axis=1)  # (chunk, filters)
        out[lo:hi] = np.where(has.T, t, np.inf)
    return out


def unfold(time_map: np.ndarray, config: LayerConfig) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Receptive-field vectors for every output position.

    ``time_map`` is ``(depth, channels, height, width)``. Returns
    ``((positions, synapses), (out_t, out_h, out_w))`` with positions in
    ``(t, y, x)`` C order.
    """
    d, c, h, w = time_map.shape
    if c != config.in_channels:
        raise ConfigError(f"layer expects {config.in_channels} input channels, got {c}")
    f_w, f_h, f_td = config.kernel
    s_x, s_y, s_t = config.stride
    o_w, o_h, o_t = output_shape((w, h, d), config.kernel, config.stride)
    win = sliding_window_view(time_map, (f_td, f_h, f_w), axis=(0, 2, 3))
    win = win[::s_t, :, ::s_y, ::s_x][:o_t, :, :o_h, :o_w]
    # (t, c, y, x, m, j, i) -> (t, y, x, m, c, j, i)
    patches = win.transpose(0, 2, 3, 4, 1, 5, 6).reshape(o_t * o_h * o_w, -1)
    return patches, (o_t, o_h, o_w)


def forward_times(time_map: np.ndarray, layer: SpikingConvLayer, competition: bool = False) -> np.ndarray:
    """Dense output fire times ``(out_t, filters, out_h, out_w)``, ``inf`` where silent."""
    patches, (o_t, o_h, o_w) = unfold(time_map, layer.config)
    ft = fire_times(patches, layer.weight_matrix, layer.thresholds)
    if competition:
        winner = ft.argmin(axis=1)
        best = ft[np.arange(len(ft)), winner]
        ft = np.full_like(ft, np.inf)
        ft[np.arange(len(ft)), winner] = best
    return ft.reshape(o_t, o_h, o_w, -1).transpose(0, 3, 1, 2)


def conv_forward(sample: SpikingTensor, layer: SpikingConvLayer, competition: bool = False) -> SpikingTensor:
    """Output feature maps as spikes; channel index is the filter."""
    return SpikingTensor.from_time_map(forward_times(sample.time_map(), layer, competition))


def infer(sample: SpikingTensor, layer: SpikingConvLayer) -> SpikingTensor:
    """Feature maps of a trained layer: no competition, no learning."""
    return conv_forward(sample, layer, competition=False)


# -- plasticity --------------------------------------------------------------

def stdp_delta(t_pre, t_post: float, params: STDPParams = STDPParams(),
               t_exposition: float = T_EXPOSITION) -> np.ndarray:
    """Weight change per synapse. Silent inputs (``inf`` or NaN) count as spikes at the window end."""
    t_pre = np.asarray(t_pre, dtype=np.float64)
    silent = ~np.isfinite(t_pre)
    pre = np.where(silent, t_exposition, t_pre)
    potentiate = (pre <= t_post) & ~silent
    gap = np.abs(t_post - pre)
    return np.where(potentiate, params.eta, -params.eta) * np.exp(-gap / params.tau)


def stdp_update(w, t_pre, t_post: float, params: STDPParams = STDPParams(),
                t_exposition: float = T_EXPOSITION):
    """New weight(s), clamped to [0, 1]. ``t_pre=None`` marks a silent input."""
    pre = np.inf if t_pre is None else t_pre
    new = np.clip(np.asarray(w, dtype=np.float64) + stdp_delta(pre, t_post, params, t_exposition), 0.0, 1.0)
    return float(new) if new.ndim == 0 else new


def adapt_thresholds(thresholds: np.ndarray, winner: int, t: float, target_time: float,
                     homeo: HomeostasisParams = HomeostasisParams(),
                     n_competing: int | None = None) -> np.ndarray:
    """Threshold update after ``winner`` fired at ``t``.

    Every competitor moves by ``-eta_th * (t - target)``. When two or more
    neurons compete, the winner also gains ``eta_th`` and the others lose
    ``eta_th / n_competing``. The result is floored at ``th_min``.
    """
    th = np.asarray(thresholds, dtype=np.float64)
    n = len(th) if n_competing is None else n_competing
    delta = np.full(th.shape, -homeo.eta_th * (t - target_time))
    if n > 1:
        competition = np.full(th.shape, -homeo.eta_th / n)
        competition[winner] = homeo.eta_th
        delta = delta + competition
    return np.maximum(homeo.th_min, th + delta)


# -- training ----------------------------------------------------------------

@dataclass
class Patch:
    origin: tuple[int, int, int]  # (t, y, x) of the window's first corner in the input
    times: np.ndarray  # (f_td, channels, f_h, f_w), inf where silent

    def events(self) -> SpikingTensor:
        """Window events with coordinates relative to the window origin."""
        return SpikingTensor.from_time_map(self.times)


def _as_time_map(sample) -> np.ndarray:
    return sample.time_map() if isinstance(sample, SpikingTensor) else np.asarray(sample, dtype=np.float64)


def patch_positions(in_shape: tuple[int, int, int, int], config: LayerConfig, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """``count`` uniform draws over valid output positions, as ``(count, 3)`` (t, y, x) input corners."""
    d, _, h, w = in_shape
    o_w, o_h, o_t = output_shape((w, h, d), config.kernel, config.stride)
    if count <= 0:
        return np.empty((0, 3), dtype=np.int64)
    flat = rng.integers(0, o_t * o_h * o_w, size=count)
    t, y, x = np.unravel_index(flat, (o_t, o_h, o_w))
    s_x, s_y, s_t = config.stride
    return np.stack([t * s_t, y * s_y, x * s_x], axis=1)


def sample_patches(sample, config: LayerConfig, count: int, rng: np.random.Generator) -> list[Patch]:
    tm = _as_time_map(sample)
    f_w, f_h, f_td = config.kernel
    return [Patch((int(t), int(y), int(x)), tm[t:t + f_td, :, y:y + f_h, x:x + f_w])
            for t, y, x in patch_positions(tm.shape, config, count, rng)]


def present_patch(layer: SpikingConvLayer, patch_times: np.ndarray) -> tuple[int, float] | None:
    """One training step on a single receptive field; returns (winner, fire time) or None."""
    cfg = layer.config
    t_pre = np.asarray(patch_times, dtype=np.float64).ravel()
    layer.stats.presented += 1
    ft = fire_times(t_pre[None, :], layer.weight_matrix, layer.thresholds)[0]
    winner = int(ft.argmin())
    t_post = float(ft[winner])
    if not np.isfinite(t_post):
        return None
    layer.stats.fired += 1
    row = layer.weight_matrix[winner]
    row += stdp_delta(t_pre, t_post, cfg.stdp, cfg.t_exposition)
    np.clip(row, 0.0, 1.0, out=row)
    layer.stats.stdp_updates += 1
    layer.stats.wins[winner] += 1
    layer.thresholds = adapt_thresholds(layer.thresholds, winner, t_post, cfg.target_time, cfg.homeo, cfg.filters)
    return winner, t_post


def train_layer(layer: SpikingConvLayer, clips: Sequence, patches_per_clip: int = 20, epochs: int = 1,
                rng: np.random.Generator | None = None) -> SpikingConvLayer:
    """Unsupervised STDP training on random patches; mutates and returns ``layer``."""
    rng = layer.rng if rng is None else rng
    maps = [_as_time_map(c) for c in clips]
    for epoch in range(epochs):
        fired_before = layer.stats.fired
        events = 0
        for idx in rng.permutation(len(maps)):
            tm = maps[idx]
            events += int(np.isfinite(tm).sum())
            for patch in sample_patches(tm, layer.config, patches_per_clip, rng):
                present_patch(layer, patch.times)
        if layer.stats.fired == fired_before:
            th = layer.thresholds
            warnings.warn(
                f"epoch {epoch}: no patch produced a fire (thresholds min {th.min():.3f} "
                f"mean {th.mean():.3f} max {th.max():.3f}; {events} input events over {len(maps)} clips)",
                TrainingStallWarning,
            )
    return layer

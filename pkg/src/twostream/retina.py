"""On-center/off-center DoG preprocessing and latency coding.

Values become single spikes at ``t = (1 - x) * t_exposition``; zero values stay
silent. Spiking tensors keep their events as parallel arrays sorted by time,
with ties broken on (x, y, z, c).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError
from .video import VideoTensor

T_EXPOSITION = 1.0


@dataclass(frozen=True)
class DoGParams:
    size: int = 7
    sigma1: float = 1.0
    sigma2: float = 4.0
    cutoff: float = 0.0  # minimum intensity, 0-255 scale

    def validate(self) -> None:
        if self.size < 3 or self.size % 2 == 0:
            raise ParameterError(f"DoG kernel side must be odd and >= 3, got {self.size}")
        if not self.sigma1 < self.sigma2:
            raise ParameterError(f"DoG needs sigma1 < sigma2, got {self.sigma1} >= {self.sigma2}")
        if not 0.0 <= self.cutoff <= 255.0:
            raise ParameterError(f"cutoff must lie in [0, 255], got {self.cutoff}")


def _gaussian(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def build_dog_kernel(params: DoGParams = DoGParams(), validate: bool = True) -> np.ndarray:
    if validate:
        params.validate()
    return _gaussian(params.size, params.sigma1) - _gaussian(params.size, params.sigma2)


def dog_response(frame: np.ndarray, params: DoGParams = DoGParams()) -> np.ndarray:
    """Raw DoG response, mirrored borders, same size as the frame."""
    kernel = build_dog_kernel(params)
    arr = np.asarray(frame, dtype=np.float64)
    # the kernel sums to zero, so removing an offset leaves the response unchanged
    # up to rounding, and makes a constant frame give exactly zero
    arr = arr - arr.min()
    return ndimage.correlate(arr, kernel, mode="reflect")


def dog_filter(frame: np.ndarray, params: DoGParams = DoGParams()) -> tuple[np.ndarray, np.ndarray]:
    """On and off channels, each scaled by the frame's peak absolute response."""
    resp = dog_response(frame, params)
    peak = np.abs(resp).max()
    if peak > 0:
        resp = resp / peak
    on = np.clip(np.maximum(0.0, resp), 0.0, 1.0)
    off = np.clip(np.maximum(0.0, -resp), 0.0, 1.0)
    return on, off


def apply_cutoff(channel: np.ndarray, cutoff: float) -> np.ndarray:
    arr = np.asarray(channel, dtype=np.float64)
    if cutoff <= 0:
        return arr.copy()
    return np.where(arr * 255.0 < cutoff, 0.0, arr)


def retina_transform(clip: VideoTensor, params: DoGParams = DoGParams()) -> VideoTensor:
    """DoG every channel of every frame; channel ``c`` becomes channels ``2c`` (on) and ``2c+1`` (off)."""
    params.validate()
    d, c, h, w = clip.data.shape
    out = np.empty((d, 2 * c, h, w), dtype=np.float64)
    for n in range(d):
        for ch in range(c):
            on, off = dog_filter(clip.data[n, ch], params)
            out[n, 2 * ch] = apply_cutoff(on, params.cutoff)
            out[n, 2 * ch + 1] = apply_cutoff(off, params.cutoff)
    return VideoTensor(out.astype(np.float32))


@dataclass
class SpikingTensor:
    """Unary events on a ``(width, height, channels, depth)`` grid, one per coordinate at most."""

    dims: tuple[int, int, int, int]
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x, self.y, self.z, self.c = (np.asarray(a, dtype=np.int64) for a in (self.x, self.y, self.z, self.c))

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def from_events(cls, dims, t, x, y, z, c) -> "SpikingTensor":
        t = np.asarray(t, dtype=np.float64)
        x, y, z, c = (np.asarray(a, dtype=np.int64) for a in (x, y, z, c))
        order = np.lexsort((c, z, y, x, t))
        return cls(dims, t[order], x[order], y[order], z[order], c[order])

    @classmethod
    def from_time_map(cls, times: np.ndarray) -> "SpikingTensor":
        """Build from a dense ``(depth, channels, height, width)`` map with ``inf`` for silence."""
        z, c, y, x = np.nonzero(np.isfinite(times))
        d, ch, h, w = times.shape
        return cls.from_events((w, h, ch, d), times[z, c, y, x], x, y, z, c)

    def time_map(self) -> np.ndarray:
        w, h, ch, d = self.dims
        out = np.full((d, ch, h, w), np.inf)
        out[self.z, self.c, self.y, self.x] = self.t
        return out

    def check(self, t_exposition: float = T_EXPOSITION) -> None:
        """Raise ValueError if ordering, bounds or uniqueness is violated."""
        w, h, ch, d = self.dims
        if len(self):
            if (self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h
                    or self.c.min() < 0 or self.c.max() >= ch or self.z.min() < 0 or self.z.max() >= d):
                raise ValueError("event coordinates out of bounds")
            if self.t.min() < 0 or self.t.max() > t_exposition:
                raise ValueError("event time outside [0, t_exposition]")
        order = np.lexsort((self.c, self.z, self.y, self.x, self.t))
        if not np.array_equal(order, np.arange(len(self))):
            raise ValueError("events are not in (t, x, y, z, c) order")
        flat = ((self.z * ch + self.c) * h + self.y) * w + self.x
        if len(np.unique(flat)) != len(flat):
            raise ValueError("more than one event at a coordinate")

    def to_text(self) -> str:
        """Spike dump: one ``t,x,y,z,c`` line per event, in stored order."""
        w, h, ch, d = self.dims
        lines = [f"# dims {w} {h} {ch} {d}"]
        lines += [f"{t!r},{x},{y},{z},{c}" for t, x, y, z, c in
                  zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.z.tolist(), self.c.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SpikingTensor":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# dims "):
            raise FormatError("spike dump lacks its '# dims' header")
        dims = tuple(int(v) for v in lines[0].split()[2:])
        if len(dims) != 4:
            raise FormatError("spike dump header needs four dims")
        cols = [[], [], [], [], []]
        for line in lines[1:]:
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError(f"bad spike line {line!r}")
            cols[0].append(float(parts[0]))
            for i in range(1, 5):
                cols[i].append(int(parts[i]))
        return cls(dims, *cols)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SpikingTensor":
        return cls.from_text(Path(path).read_text())


def latency_encode(tensor: VideoTensor, t_exposition: float = T_EXPOSITION) -> SpikingTensor:
    values = tensor.data.astype(np.float64)
    times = np.where(values > 0, (1.0 - values) * t_exposition, np.inf)
    return SpikingTensor.from_time_map(times)


def decode_first_spike(spikes: SpikingTensor, t_exposition: float = T_EXPOSITION) -> np.ndarray:
    """Values ``1 - t/t_exposition`` as a ``(depth, channels, height, width)`` array; silence is 0."""
    w, h, ch, d = spikes.dims
    out = np.zeros((d, ch, h, w))
    if len(spikes):
        # keep the earliest event per coordinate; stored order is already by time
        flat = ((spikes.z * ch + spikes.c) * h + spikes.y) * w + spikes.x
        _, first = np.unique(flat, return_index=True)
        out[spikes.z[first], spikes.c[first], spikes.y[first], spikes.x[first]] = 1.0 - spikes.t[first] / t_exposition
    return out


def encode_clip(clip: VideoTensor, params: DoGParams = DoGParams(),
                t_exposition: float = T_EXPOSITION) -> SpikingTensor:
    return latency_encode(retina_transform(clip, params), t_exposition)

"""Pooling of decoded feature maps into fixed-size vectors, and stream fusion.

Feature file layout (little-endian)::

    b"FEAT" | u32 version | u32 n_values | u32 n_streams
    per stream: u16 name length | utf-8 name | u32 start | u32 stop
    f32 values
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, FusionError

FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1


class PoolingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PoolSpec:
    grid: tuple[int, int] = (20, 20)  # (g_w, g_h)
    depth: int = 2

    def __post_init__(self):
        if min(self.grid) < 1:
            raise ValueError("pool grid must be at least 1x1")
        if self.depth not in (1, 2):
            raise ValueError("temporal pool depth must be 1 or 2")


@dataclass
class FeatureVector:
    values: np.ndarray
    provenance: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if not self.provenance:
            self.provenance = [("stream", 0, len(self.values))]
        pos = 0
        for _, start, stop in self.provenance:
            if start != pos or stop < start:
                raise ValueError("provenance slices must partition the vector")
            pos = stop
        if pos != len(self.values):
            raise ValueError("provenance slices must cover the vector")

    def __len__(self) -> int:
        return len(self.values)

    def stream(self, name: str) -> np.ndarray:
        for stream, start, stop in self.provenance:
            if stream == name:
                return self.values[start:stop]
        raise KeyError(name)

    def to_bytes(self) -> bytes:
        parts = [FEATURE_MAGIC, struct.pack("<3I", FEATURE_VERSION, len(self.values), len(self.provenance))]
        for name, start, stop in self.provenance:
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<2I", start, stop))
        parts.append(self.values.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FeatureVector":
        if raw[:4] != FEATURE_MAGIC:
            raise FormatError("not a feature file (bad magic)")
        version, n_values, n_streams = struct.unpack_from("<3I", raw, 4)
        if version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        off = 16
        prov = []
        for _ in range(n_streams):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2:off + 2 + n].decode("utf-8")
            start, stop = struct.unpack_from("<2I", raw, off + 2 + n)
            prov.append((name, start, stop))
            off += 2 + n + 8
        if len(raw) != off + 4 * n_values:
            raise FormatError("feature payload size does not match its header")
        return cls(np.frombuffer(raw, "<f4", n_values, off).copy(), prov)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureVector":
        return cls.from_bytes(Path(path).read_bytes())


def cell_edges(n: int, cells: int) -> np.ndarray:
    """Start index of each cell; the last ``n % cells`` cells are one pixel wider."""
    base, extra = divmod(n, cells)
    sizes = np.full(cells, base)
    sizes[cells - extra:] += 1
    return np.concatenate([[0], np.cumsum(sizes)[:-1]])


def sum_pool_spatial(maps: np.ndarray, spec: PoolSpec = PoolSpec()) -> np.ndarray:
    """Sum over a ``g_h x g_w`` grid of near-equal cells on the last two axes."""
    arr = np.asarray(maps, dtype=np.float64)
    h, w = arr.shape[-2:]
    g_w, g_h = spec.grid
    if h < g_h or w < g_w:
        warnings.warn(f"map {h}x{w} smaller than pool grid {g_h}x{g_w}; passed through", PoolingWarning)
        return arr.copy()
    rows = np.add.reduceat(arr, cell_edges(h, g_h), axis=-2)
    return np.add.reduceat(rows, cell_edges(w, g_w), axis=-1)


def sum_pool_temporal(maps: np.ndarray, depth: int) -> np.ndarray:
    """Sum contiguous near-equal groups of frames along axis 0; empty groups give zeros."""
    arr = np.asarray(maps, dtype=np.float64)
    n = arr.shape[0]
    if n < depth:
        warnings.warn(f"{n} frame(s) split into {depth} temporal groups; empty groups are zero",
                      PoolingWarning)
    groups = np.array_split(np.arange(n), depth)
    return np.stack([arr[g].sum(axis=0) if len(g) else np.zeros(arr.shape[1:]) for g in groups])


def pool_feature_maps(values: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """Decoded maps ``(frames, filters, h, w)`` to pooled ``(filters, depth, g_h, g_w)``."""
    pooled = sum_pool_temporal(sum_pool_spatial(values, spec), spec.depth)
    return pooled.transpose(1, 0, 2, 3)


def flatten(pooled: np.ndarray, stream: str = "stream") -> FeatureVector:
    """C-order ravel of ``(filters, depth, g_h, g_w)``: x fastest, then y, t, filter."""
    values = np.ascontiguousarray(pooled).ravel()
    return FeatureVector(values, [(stream, 0, values.size)])


def l2_normalize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def fuse_concat(a: FeatureVector, b: FeatureVector, normalize: bool = True) -> FeatureVector:
    """Concatenate two stream vectors (first stream first), each L2-normalized unless disabled."""
    if len(a) == 0 or len(b) == 0:
        raise FusionError("cannot fuse an empty feature vector")
    parts = [(a, l2_normalize(a.values) if normalize else a.values),
             (b, l2_normalize(b.values) if normalize else b.values)]
    prov, pos = [], 0
    for vec, vals in parts:
        for name, start, stop in vec.provenance:
            prov.append((name, pos + start, pos + stop))
        pos += len(vals)
    return FeatureVector(np.concatenate([p[1] for p in parts]), prov)

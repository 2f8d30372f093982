"""Temporal-stream input representations.

Every builder takes a single-channel clip and returns what the retina stage
should see: a fused tall frame, absolute frame differences, optical flow drawn
as RGB, or a grid of directional flow magnitudes.

Flow is estimated with two-frame polynomial expansion (Farnebäck): each frame
is locally approximated by ``x^T A x + b^T x + c`` and the displacement solves
``A d = -(b2 - b1) / 2`` in a least-squares sense over a window, refined
iteratively from coarse to fine pyramid levels. Positive ``OF_x`` is rightward
motion and positive ``OF_y`` is downward motion (image rows grow downward).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, IngestError, StreamConfigError
from .video import VideoTensor

FLOW_MAGIC = b"FLOW"
GRID_COLUMNS = ("left", "right", "up", "down")


def _single_channel(clip: VideoTensor) -> np.ndarray:
    if clip.channels != 1:
        raise StreamConfigError(f"stream expects a single-channel clip, got {clip.channels} channels")
    return clip.data[:, 0].astype(np.float64)


def early_fuse(clip: VideoTensor) -> np.ndarray:
    """Interleave frame rows: output row ``r = x * depth + n`` is row ``x`` of frame ``n``."""
    frames = _single_channel(clip)
    d, h, w = frames.shape
    return frames.transpose(1, 0, 2).reshape(h * d, w)


def de_fuse(fused: np.ndarray, depth: int) -> np.ndarray:
    """Inverse of early_fuse; returns ``(depth, height, width)``."""
    hd, w = fused.shape
    return fused.reshape(hd // depth, depth, w).transpose(1, 0, 2)


def frame_subtract(clip: VideoTensor) -> VideoTensor:
    frames = _single_channel(clip)
    if frames.shape[0] < 2:
        raise StreamConfigError("frame subtraction needs at least two frames")
    diff = np.abs(frames[:-1] - frames[1:])
    return VideoTensor(np.clip(diff, 0.0, 1.0).astype(np.float32)[:, None])


# -- dense optical flow -------------------------------------------------------

@dataclass(frozen=True)
class FlowParams:
    levels: int = 3
    window: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1
    pyr_scale: float = 0.5

    def __post_init__(self):
        if self.levels < 1:
            raise StreamConfigError("flow needs at least one pyramid level")
        if self.window < 1 or self.window % 2 == 0:
            raise StreamConfigError("flow window must be odd")
        if self.iterations < 1 or self.poly_n < 1 or self.poly_sigma <= 0:
            raise StreamConfigError("flow iterations, poly_n and poly_sigma must be positive")
        if not 0.0 < self.pyr_scale < 1.0:
            raise StreamConfigError("pyramid scale must lie in (0, 1)")


@dataclass
class FlowField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ValueError("flow components must be 2D maps of equal shape")
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.dy))):
            raise ValueError("flow must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def to_bytes(self) -> bytes:
        h, w = self.shape
        inter = np.stack([self.dx, self.dy], axis=-1).astype("<f4")
        return FLOW_MAGIC + struct.pack("<2I", w, h) + inter.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FlowField":
        if len(raw) < 12 or raw[:4] != FLOW_MAGIC:
            raise FormatError("not a flow file (bad magic)")
        w, h = struct.unpack_from("<2I", raw, 4)
        if len(raw) != 12 + 8 * w * h:
            raise FormatError("flow payload size does not match its dims")
        inter = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
        return cls(inter[..., 0], inter[..., 1])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FlowField":
        return cls.from_bytes(Path(path).read_bytes())


def _poly_filters(n: int, sigma: float):
    r = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    # Gram matrix of the basis {1, x, y, x^2, y^2, xy} under the applicability g(x) g(y)
    xx, yy = np.meshgrid(r, r)
    basis = np.stack([np.ones_like(xx), xx, yy, xx ** 2, yy ** 2, xx * yy]).reshape(6, -1)
    weight = np.outer(g, g).ravel()
    gram = (basis * weight) @ basis.T
    return g, r, np.linalg.inv(gram)


def poly_expand(img: np.ndarray, n: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel quadratic fit; returns ``A`` with shape (h, w, 2, 2) and ``b`` with shape (h, w, 2)."""
    g, r, ginv = _poly_filters(n, sigma)
    kernels = {0: g, 1: g * r, 2: g * r ** 2}
    # (x power, y power) per basis function; x runs along axis 1
    powers = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    proj = []
    for px, py in powers:
        tmp = ndimage.correlate1d(img, kernels[px], axis=1, mode="reflect")
        proj.append(ndimage.correlate1d(tmp, kernels[py], axis=0, mode="reflect"))
    coeffs = np.tensordot(ginv, np.stack(proj), axes=1)
    _, bx, by, axx, ayy, axy = coeffs
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = axx
    A[..., 1, 1] = ayy
    A[..., 0, 1] = A[..., 1, 0] = axy / 2
    b = np.stack([bx, by], axis=-1)
    return A, b


def _resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    oh, ow = shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _warp(field: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample ``field`` (h, w, ...) at ``x + flow`` with bilinear interpolation."""
    h, w = flow.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + flow[..., 1], xx + flow[..., 0]]
    flat = field.reshape(h, w, -1)
    out = np.empty_like(flat)
    for i in range(flat.shape[-1]):
        out[..., i] = ndimage.map_coordinates(flat[..., i], coords, order=1, mode="nearest")
    return out.reshape(field.shape)


def _refine(A1, b1, A2, b2, flow, params: FlowParams) -> np.ndarray:
    for _ in range(params.iterations):
        A2w = _warp(A2, flow)
        b2w = _warp(b2, flow)
        A = (A1 + A2w) / 2
        db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, flow)
        G = np.einsum("...ki,...kj->...ij", A, A)
        hvec = np.einsum("...ki,...k->...i", A, db)
        size = (params.window, params.window)
        g11 = ndimage.uniform_filter(G[..., 0, 0], size, mode="reflect")
        g12 = ndimage.uniform_filter(G[..., 0, 1], size, mode="reflect")
        g22 = ndimage.uniform_filter(G[..., 1, 1], size, mode="reflect")
        h1 = ndimage.uniform_filter(hvec[..., 0], size, mode="reflect")
        h2 = ndimage.uniform_filter(hvec[..., 1], size, mode="reflect")
        reg = 1e-6 * max(float(np.mean(g11 + g22)), 1e-30)
        g11 = g11 + reg
        g22 = g22 + reg
        det = g11 * g22 - g12 * g12
        flow = np.stack([(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det], axis=-1)
    return flow


def dense_flow(frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise IngestError(f"flow frames must be 2D maps of equal size, got {a.shape} and {b.shape}")
    a, b = a * 255.0, b * 255.0
    shapes = []
    for level in range(params.levels):
        scale = params.pyr_scale ** level
        shape = (max(1, round(a.shape[0] * scale)), max(1, round(a.shape[1] * scale)))
        if level and min(shape) < 2 * params.poly_n + 1:
            break
        shapes.append((level, scale, shape))

    flow = None
    for level, scale, shape in reversed(shapes):
        if level == 0:
            la, lb = a, b
        else:
            sigma = (1.0 / scale - 1.0) * 0.5
            la = _resize(ndimage.gaussian_filter(a, sigma, mode="reflect"), shape)
            lb = _resize(ndimage.gaussian_filter(b, sigma, mode="reflect"), shape)
        if flow is None:
            flow = np.zeros(shape + (2,))
        else:
            fy = shape[0] / flow.shape[0]
            fx = shape[1] / flow.shape[1]
            flow = np.stack([_resize(flow[..., 0], shape) * fx, _resize(flow[..., 1], shape) * fy], axis=-1)
        A1, b1 = poly_expand(la, params.poly_n, params.poly_sigma)
        A2, b2 = poly_expand(lb, params.poly_n, params.poly_sigma)
        flow = _refine(A1, b1, A2, b2, flow, params)
    return FlowField(flow[..., 0], flow[..., 1])


def clip_flows(clip: VideoTensor, params: FlowParams = FlowParams()) -> list[FlowField]:
    frames = _single_channel(clip)
    if frames.shape[0] < 2:
        raise StreamConfigError("optical flow needs at least two frames")
    return [dense_flow(frames[n], frames[n + 1], params) for n in range(frames.shape[0] - 1)]


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hue in degrees, saturation and value in [0, 1]; returns (3, ...) RGB."""
    h6 = (np.asarray(h, dtype=np.float64) % 360.0) / 60.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def flow_hue(flow: FlowField) -> np.ndarray:
    """Orientation in degrees: 0 is rightward, 90 is upward on screen."""
    return np.degrees(np.arctan2(-flow.dy, flow.dx)) % 360.0


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """Color-coded flow, shape (3, h, w): hue from orientation, value from magnitude."""
    mag = np.hypot(flow.dx, flow.dy)
    peak = mag.max()
    value = mag / peak if peak > 0 else np.zeros_like(mag)
    rgb = hsv_to_rgb(flow_hue(flow), np.ones_like(mag), value)
    return np.clip(rgb, 0.0, 1.0)


def directional_maps(flow: FlowField) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Unnormalized (left, right, up, down) displacement magnitudes."""
    ox, oy = flow.dx, flow.dy
    m_l = (np.abs(ox) - ox) / 2
    m_r = (np.abs(ox) + ox) / 2
    m_u = (np.abs(oy) - oy) / 2
    m_d = (np.abs(oy) + oy) / 2
    return m_l, m_r, m_u, m_d


def motion_grid(flows: Sequence[FlowField]) -> np.ndarray:
    """Tile directional maps: one row per flow field, columns ordered left, right, up, down.

    All tiles share one normalization (the largest value over every tile).
    """
    if not flows:
        raise StreamConfigError("motion grid needs at least one flow field")
    shape = flows[0].shape
    if any(f.shape != shape for f in flows):
        raise StreamConfigError("flow fields differ in size")
    rows = [np.concatenate(directional_maps(f), axis=1) for f in flows]
    grid = np.concatenate(rows, axis=0)
    peak = grid.max()
    return grid / peak if peak > 0 else grid


STREAM_KINDS = ("raw", "early-fusion", "frame-subtraction", "optical-flow", "motion-grid")


def stream_input(clip: VideoTensor, kind: str, flow_params: FlowParams = FlowParams(),
                 flows: Sequence[FlowField] | None = None) -> VideoTensor:
    """The clip as seen by a stream of the given kind, before the retina stage.

    ``flows`` supplies precomputed flow fields (one per frame pair) and skips estimation.
    """
    if flows is not None and kind in ("optical-flow", "motion-grid"):
        if len(flows) != clip.depth - 1:
            raise StreamConfigError(f"expected {clip.depth - 1} flow fields, got {len(flows)}")
        if any(f.shape != (clip.height, clip.width) for f in flows):
            raise StreamConfigError("precomputed flow size does not match the clip")
    if kind == "raw":
        _single_channel(clip)
        return clip
    if kind == "early-fusion":
        return VideoTensor(early_fuse(clip)[None, None].astype(np.float32))
    if kind == "frame-subtraction":
        return frame_subtract(clip)
    if kind == "optical-flow":
        rgb = [flow_to_rgb(f) for f in (flows or clip_flows(clip, flow_params))]
        return VideoTensor(np.stack(rgb).astype(np.float32))
    if kind == "motion-grid":
        grid = motion_grid(flows or clip_flows(clip, flow_params))
        return VideoTensor(grid[None, None].astype(np.float32))
    raise StreamConfigError(f"unknown stream kind {kind!r}; expected one of {STREAM_KINDS}")

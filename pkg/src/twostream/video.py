"""Video clips: in-memory tensor type, frame sampling, resizing, on-disk formats,
dataset manifests with their split protocols, and a synthetic motion generator.

A clip is stored as a float32 array of shape ``(depth, channels, height, width)``.
In C order that puts x fastest, then y, then channel, then frame, which is also
the value order of the binary clip file::

    b"VTNS" | u32 width | u32 height | u32 channels | u32 depth | f32 values...

All integers and floats are little-endian.
"""
from __future__ import annotations

import math
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, FormatError, IngestError, ManifestError, ParameterError

CLIP_MAGIC = b"VTNS"
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = (".png", ".bmp", ".pgm", ".ppm", ".tif", ".tiff")

# KTH protocol: subjects 19-21, 23-25, 01, 04 are validation and unused here.
KTH_TRAIN_SUBJECTS = (11, 12, 13, 14, 15, 16, 17, 18)
KTH_TEST_SUBJECTS = (2, 3, 5, 6, 7, 8, 9, 10, 22)

PROTOCOLS = ("fixed-subject-split", "leave-one-subject-out", "class-thirds")
MOTION_CLASSES = ("bar-left", "bar-right", "bar-up", "bar-down")
STATIC_CLASSES = ("static-A", "static-B")
SYNTHETIC_CLASSES = MOTION_CLASSES + STATIC_CLASSES


class ResizeWarning(UserWarning):
    pass


@dataclass
class VideoTensor:
    """Normalized clip values, shape ``(depth, channels, height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"clip must be a non-empty 4D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("clip values must lie in [0, 1]")
        self.data = np.ascontiguousarray(data)

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """``(l_w, l_h, l_c, l_td)``."""
        return (self.width, self.height, self.channels, self.depth)

    def frame(self, n: int, c: int = 0) -> np.ndarray:
        return self.data[n, c]

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray]) -> "VideoTensor":
        """Stack 2D (single channel) or ``(c, h, w)`` frames."""
        arrs = [np.asarray(f, dtype=np.float32) for f in frames]
        arrs = [a[None] if a.ndim == 2 else a for a in arrs]
        return cls(np.stack(arrs))

    def to_bytes(self) -> bytes:
        header = CLIP_MAGIC + struct.pack("<4I", *self.dims)
        return header + self.data.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "VideoTensor":
        if len(raw) < 20 or raw[:4] != CLIP_MAGIC:
            raise FormatError("not a clip tensor file (bad magic)")
        w, h, c, td = struct.unpack_from("<4I", raw, 4)
        n = w * h * c * td
        if len(raw) != 20 + 4 * n:
            raise FormatError(f"clip payload has {len(raw) - 20} bytes, expected {4 * n}")
        values = np.frombuffer(raw, dtype="<f4", offset=20).reshape(td, c, h, w)
        return cls(values.astype(np.float32))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VideoTensor":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IngestError(f"cannot read clip file {path}: {exc}") from exc
        return cls.from_bytes(raw)


@dataclass(frozen=True)
class ClipSpec:
    frames_per_clip: int = 10
    frame_stride: int = 4
    spatial_scale: float = 0.5

    def __post_init__(self):
        if self.frames_per_clip < 1 or self.frame_stride < 1:
            raise ParameterError("frames_per_clip and frame_stride must be >= 1")
        if not 0.0 < self.spatial_scale <= 1.0:
            raise ParameterError("spatial_scale must lie in (0, 1]")


def sample_indices(n_source: int, spec: ClipSpec) -> list[int]:
    """Frame indices 0, s, 2s, ... below ``n_source``, cycled until the clip is full."""
    if n_source < 1:
        raise EmptyInputError("source has no frames")
    base = list(range(0, n_source, spec.frame_stride))
    return [base[k % len(base)] for k in range(spec.frames_per_clip)]


def to_luminance(frame: np.ndarray) -> np.ndarray:
    """Single-channel float map in [0, 1]; uint8 input is scaled by 1/255."""
    arr = np.asarray(frame)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        elif arr.shape[2] in (3, 4):
            arr = arr[:, :, :3] @ np.asarray(LUMA_WEIGHTS)
        else:
            raise IngestError(f"unsupported channel count {arr.shape[2]}")
    if arr.ndim != 2:
        raise IngestError(f"frame must be 2D or HxWxC, got shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def resize_bilinear(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment (corners not aligned)."""
    src = np.asarray(frame, dtype=np.float64)
    in_h, in_w = src.shape

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(in_h, out_h)
    x0, x1, fx = axis_weights(in_w, out_w)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return np.clip(out, 0.0, 1.0)


def resize_half(frame: np.ndarray) -> np.ndarray:
    """Halve both dimensions (rounding up). A 1-pixel dimension leaves the frame as is."""
    arr = np.asarray(frame, dtype=np.float64)
    h, w = arr.shape
    if h < 2 or w < 2:
        warnings.warn(f"frame {h}x{w} too small to halve; returned unchanged", ResizeWarning)
        return arr
    return resize_bilinear(arr, math.ceil(h / 2), math.ceil(w / 2))


def _rescale(frame: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return frame
    if scale == 0.5:
        return resize_half(frame)
    h, w = frame.shape
    return resize_bilinear(frame, max(1, math.ceil(h * scale)), max(1, math.ceil(w * scale)))


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB", "RGBA"):
                img = img.convert("RGB")
            return np.asarray(img)
    except Exception as exc:
        raise IngestError(f"cannot decode frame {path}: {exc}") from exc


def list_frame_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise IngestError(f"frame directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_clip(source, spec: ClipSpec = ClipSpec()) -> VideoTensor:
    """Sample, grayscale, resize and normalize a frame sequence into a clip.

    ``source`` is a directory of lossless images (read in filename order) or a
    sequence of arrays (uint8 or float in [0, 1], HxW or HxWxC).
    """
    if isinstance(source, (str, Path)):
        files = list_frame_files(source)
        if not files:
            raise EmptyInputError(f"no frame images in {source}")
        frames: Sequence = files
    else:
        frames = list(source)
        if not frames:
            raise EmptyInputError("source has no frames")
    out = []
    for idx in sample_indices(len(frames), spec):
        item = frames[idx]
        if isinstance(item, Path):
            item = _read_image(item)
        try:
            lum = to_luminance(item)
        except IngestError as exc:
            raise IngestError(f"frame {idx}: {exc}") from exc
        out.append(_rescale(lum, spec.spatial_scale))
    return VideoTensor.from_frames(out)


def load_clip_path(path, spec: ClipSpec = ClipSpec()) -> VideoTensor:
    """A binary clip file is taken as already sampled; a directory goes through load_clip."""
    p = Path(path)
    if p.is_dir():
        return load_clip(p, spec)
    return VideoTensor.load(p)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    clip_id: str
    subject: str
    label: int
    path: str = ""


@dataclass
class DatasetManifest:
    """Line format: ``clip_id<TAB>subject<TAB>class<TAB>path``.

    Two optional comment lines carry the ordered class names and the split
    protocol (``# classes: a,b`` and ``# protocol: class-thirds``).
    """

    samples: list[Sample]
    class_names: list[str]
    split_protocol: str = "class-thirds"

    def __post_init__(self):
        if self.split_protocol not in PROTOCOLS:
            raise ManifestError(f"unknown split protocol {self.split_protocol!r}")
        seen = set()
        for s in self.samples:
            if not 0 <= s.label < len(self.class_names):
                raise ManifestError(f"sample {s.clip_id} has label {s.label} outside class list")
            if s.clip_id in seen:
                raise ManifestError(f"duplicate clip id {s.clip_id}")
            seen.add(s.clip_id)

    def by_id(self) -> dict[str, Sample]:
        return {s.clip_id: s for s in self.samples}

    def labels(self, ids: Sequence[str]) -> np.ndarray:
        lookup = self.by_id()
        return np.array([lookup[i].label for i in ids], dtype=int)

    def to_text(self) -> str:
        lines = [f"# classes: {','.join(self.class_names)}", f"# protocol: {self.split_protocol}"]
        for s in self.samples:
            lines.append("\t".join([s.clip_id, s.subject, self.class_names[s.label], s.path]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, protocol: str | None = None) -> "DatasetManifest":
        class_names: list[str] = []
        declared_protocol = None
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                if key.strip() == "classes":
                    class_names = [c for c in value.strip().split(",") if c]
                elif key.strip() == "protocol":
                    declared_protocol = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"manifest line {lineno}: expected 4 tab-separated fields")
            rows.append(parts)
        for _, _, cls_name, _ in rows:
            if cls_name not in class_names:
                class_names.append(cls_name)
        samples = [Sample(cid, subj, class_names.index(c), path) for cid, subj, c, path in rows]
        return cls(samples, class_names, protocol or declared_protocol or "class-thirds")

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path, protocol: str | None = None) -> "DatasetManifest":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_text(text, protocol)


def subject_number(subject: str) -> int:
    m = re.search(r"(\d+)\s*$", subject)
    if not m:
        raise ManifestError(f"subject id {subject!r} carries no number")
    return int(m.group(1))


def make_splits(manifest: DatasetManifest) -> list[tuple[list[str], list[str]]]:
    """Train/test clip-id folds for the manifest's protocol."""
    protocol = manifest.split_protocol
    samples = manifest.samples
    if protocol in ("fixed-subject-split", "leave-one-subject-out"):
        missing = [s.clip_id for s in samples if not s.subject]
        if missing:
            raise ManifestError(f"{protocol} needs subject ids; missing for {missing[:3]}")

    if protocol == "fixed-subject-split":
        train = [s.clip_id for s in samples if subject_number(s.subject) in KTH_TRAIN_SUBJECTS]
        test = [s.clip_id for s in samples if subject_number(s.subject) in KTH_TEST_SUBJECTS]
        if not train or not test:
            raise ManifestError("fixed subject split leaves an empty train or test set")
        return [(train, test)]

    if protocol == "leave-one-subject-out":
        subjects = sorted({s.subject for s in samples})
        if len(subjects) < 2:
            raise ManifestError("leave-one-subject-out needs at least two subjects")
        return [
            ([s.clip_id for s in samples if s.subject != held],
             [s.clip_id for s in samples if s.subject == held])
            for held in subjects
        ]

    # class-thirds: the last third (rounded) of each class, in manifest order, is test
    train, test = [], []
    for label in range(len(manifest.class_names)):
        ids = [s.clip_id for s in samples if s.label == label]
        n_test = round(len(ids) / 3)
        if len(ids) >= 2:
            n_test = max(n_test, 1)
        train.extend(ids[: len(ids) - n_test])
        test.extend(ids[len(ids) - n_test:])
    if not train or not test:
        raise ManifestError("class-thirds split leaves an empty train or test set")
    return [(train, test)]


# -- synthetic micro-datasets ------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 28
    width: int = 28
    frames: int = 10
    textures: tuple[str, ...] = ("A", "B")
    noise: float = 0.03
    dynamic_noise: float = 0.0
    bar_width: int = 3
    n_subjects: int = 5


def _texture(kind: str, h: int, w: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "A":
        # diagonal grating
        return 0.25 + 0.12 * np.sin(2 * np.pi * (xx + yy) / 7.0 + phase)
    if kind == "B":
        # checker of 4-px cells, shifted by the phase
        shift = int(phase * 4 / (2 * np.pi)) % 8
        cells = (((xx + shift) // 4) + (yy // 4)) % 2
        return 0.15 + 0.2 * cells
    raise ParameterError(f"unknown texture {kind!r}")


def _render_clip(kind: str, texture: str, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    phase = rng.uniform(0, 2 * np.pi)
    background = _texture(texture, h, w, phase) + rng.normal(0.0, spec.noise, size=(h, w))
    frames = np.repeat(background[None], spec.frames, axis=0)
    if kind in MOTION_CLASSES:
        speed = int(rng.integers(1, 3))
        jitter = int(rng.integers(0, 3))
        horizontal = kind in ("bar-left", "bar-right")
        extent = w if horizontal else h
        other = h if horizontal else w
        length = other // 2
        offset = int(rng.integers(0, other - length + 1))
        forward = kind in ("bar-right", "bar-down")
        for n in range(spec.frames):
            if forward:
                pos = 2 + jitter + speed * n
            else:
                pos = extent - 2 - spec.bar_width - jitter - speed * n
            lo, hi = max(pos, 0), min(pos + spec.bar_width, extent)
            if hi <= lo:
                continue
            if horizontal:
                frames[n, offset:offset + length, lo:hi] = 1.0
            else:
                frames[n, lo:hi, offset:offset + length] = 1.0
    if spec.dynamic_noise > 0:
        frames = frames + rng.normal(0.0, spec.dynamic_noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)[:, None]


def generate_synthetic(n_per_class: int, classes: Sequence[str], seed: int,
                       spec: SyntheticSpec = SyntheticSpec()) -> tuple[DatasetManifest, dict[str, VideoTensor]]:
    """Labeled clips of moving bars (motion classes) or static textures.

    Motion clips cycle through ``spec.textures`` for their background so the
    texture carries no label information. Static classes use texture A or B.
    """
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    classes = list(classes)
    if not classes or len(set(classes)) != len(classes):
        raise ParameterError("classes must be a non-empty list without repeats")
    unknown = [c for c in classes if c not in SYNTHETIC_CLASSES]
    if unknown:
        raise ParameterError(f"unknown synthetic classes {unknown}")
    rng = np.random.default_rng(seed)
    samples, clips = [], {}
    for label, kind in enumerate(classes):
        for i in range(n_per_class):
            if kind in STATIC_CLASSES:
                texture = kind[-1]
            else:
                texture = spec.textures[i % len(spec.textures)]
            clip_id = f"{kind}_{i:04d}"
            clips[clip_id] = VideoTensor(_render_clip(kind, texture, spec, rng))
            subject = f"s{(i % spec.n_subjects) + 1:02d}"
            samples.append(Sample(clip_id, subject, label, ""))
    return DatasetManifest(samples, classes, "class-thirds"), clips


def write_dataset(directory, manifest: DatasetManifest, clips: dict[str, VideoTensor]) -> Path:
    """Write clips as ``clips/<id>.vt`` plus ``manifest.tsv``; returns the manifest path."""
    root = Path(directory)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    samples = []
    for s in manifest.samples:
        rel = f"clips/{s.clip_id}.vt"
        clips[s.clip_id].save(root / rel)
        samples.append(Sample(s.clip_id, s.subject, s.label, rel))
    out = DatasetManifest(samples, list(manifest.class_names), manifest.split_protocol)
    path = root / "manifest.tsv"
    out.save(path)
    return path


def read_dataset(manifest_path, spec: ClipSpec = ClipSpec()) -> tuple[DatasetManifest, dict[str, VideoTensor]]:
    manifest = DatasetManifest.load(manifest_path)
    base = Path(manifest_path).parent
    clips = {}
    for s in manifest.samples:
        if not s.path:
            raise ManifestError(f"sample {s.clip_id} has no path")
        p = Path(s.path)
        clips[s.clip_id] = load_clip_path(p if p.is_absolute() else base / p, spec)
    return manifest, clips

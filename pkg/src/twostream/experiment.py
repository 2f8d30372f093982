"""End-to-end two-stream experiments and the artifact cache behind them."""
from __future__ import annotations

import hashlib
import io
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .classify import EvalResult, RunReport, confusion_result, merge_folds, predict_many, round_half_up, train_svm
from .config import ExperimentConfig, StreamSpec
from .errors import StageError, TwoStreamError
from .features import FeatureVector, PoolSpec, flatten, fuse_concat, l2_normalize, pool_feature_maps
from .motion import stream_input
from .retina import retina_transform
from .snn import SpikingConvLayer, forward_times, train_layer
from .video import DatasetManifest, VideoTensor, generate_synthetic, make_splits, read_dataset

log = logging.getLogger(__name__)

CACHE_ENV = "TWOSTREAM_CACHE_DIR"
ROLES = ("spatial", "temporal")
COLUMNS = ("spatial", "temporal", "fused")


class PipelineCache:
    """Content-addressed blobs under ``<root>/<stage>/<key>``; writes are atomic renames."""

    def __init__(self, root):
        self.root = Path(root)

    @classmethod
    def from_env(cls) -> "PipelineCache | None":
        root = os.environ.get(CACHE_ENV)
        return cls(root) if root else None

    @staticmethod
    def key(*parts: str) -> str:
        h = hashlib.sha256()
        for p in parts:
            h.update(p.encode())
            h.update(b"\0")
        return h.hexdigest()

    def path(self, stage: str, key: str) -> Path:
        return self.root / stage / key

    def get(self, stage: str, key: str) -> bytes | None:
        p = self.path(stage, key)
        return p.read_bytes() if p.exists() else None

    def put(self, stage: str, key: str, data: bytes) -> None:
        p = self.path(stage, key)
        p.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, p)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def fetch(self, stage: str, key: str, compute: Callable[[], bytes]) -> bytes:
        data = self.get(stage, key)
        if data is None:
            data = compute()
            self.put(stage, key, data)
        return data


def _arrays_to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _arrays_from_bytes(raw: bytes) -> dict[str, np.ndarray]:
    with np.load(io.BytesIO(raw)) as npz:
        return {k: npz[k] for k in npz.files}


def _cached_arrays(cache, stage, key, compute) -> dict[str, np.ndarray]:
    if cache is None:
        return compute()
    return _arrays_from_bytes(cache.fetch(stage, key, lambda: _arrays_to_bytes(compute())))


# -- pipeline stages ---------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> tuple[DatasetManifest, dict[str, VideoTensor]]:
    d = cfg.dataset
    if d.kind == "synthetic":
        manifest, clips = generate_synthetic(d.n_per_class, d.classes, d.seed, cfg.synthetic_spec())
    else:
        manifest, clips = read_dataset(d.manifest, cfg.clip_spec())
    if d.protocol:
        manifest = DatasetManifest(manifest.samples, manifest.class_names, d.protocol)
    return manifest, clips


def encode_clip_for_stream(clip: VideoTensor, stream: StreamSpec, cfg: ExperimentConfig) -> np.ndarray:
    """Dense spike-time map ``(depth, channels, h, w)`` with ``inf`` for silent inputs."""
    values = retina_transform(stream_input(clip, stream.kind, cfg.flow_params()), cfg.dog_params()).data
    values = values.astype(np.float64)
    return np.where(values > 0, (1.0 - values) * cfg.codec.t_exposition, np.inf)


def dataset_fingerprint(clips: dict[str, VideoTensor]) -> str:
    """Hash of every clip's id and samples, so edited clip files miss the cache."""
    h = hashlib.sha256()
    for cid in sorted(clips):
        h.update(cid.encode() + b"\0")
        h.update(clips[cid].to_bytes())
    return h.hexdigest()


def encode_key(cfg: ExperimentConfig, stream: StreamSpec, fingerprint: str) -> str:
    return PipelineCache.key("encode", cfg.digest("dataset", "clip", "codec", "flow"), stream.kind, fingerprint)


def encode_dataset(clips: dict[str, VideoTensor], stream: StreamSpec, cfg: ExperimentConfig,
                   cache: PipelineCache | None = None) -> dict[str, np.ndarray]:
    def compute():
        out = {}
        for cid, clip in clips.items():
            try:
                out[cid] = encode_clip_for_stream(clip, stream, cfg)
            except TwoStreamError as exc:
                raise StageError("encode", cid, exc) from exc
        return out

    if cache is None:
        return compute()
    return _cached_arrays(cache, "encode", encode_key(cfg, stream, dataset_fingerprint(clips)), compute)


def layer_seed(run_seed: int, role: str, fold: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, ROLES.index(role), fold])


def layer_key(encoded: dict[str, np.ndarray], train_ids, stream: StreamSpec, cfg: ExperimentConfig,
              run_seed: int, fold: int) -> str:
    """Keyed on the training inputs themselves, so any upstream change invalidates it."""
    h = hashlib.sha256()
    for cid in train_ids:
        h.update(cid.encode() + b"\0")
        h.update(np.ascontiguousarray(encoded[cid]).tobytes())
    return PipelineCache.key("layer", h.hexdigest(), cfg.digest("layer"), str(cfg.codec.t_exposition),
                             stream.role, stream.conv, str(run_seed), str(fold))


def train_stream(encoded: dict[str, np.ndarray], train_ids, stream: StreamSpec, cfg: ExperimentConfig,
                 run_seed: int, fold: int = 0, cache: PipelineCache | None = None) -> SpikingConvLayer:
    def compute() -> bytes:
        in_channels = encoded[train_ids[0]].shape[1]
        layer = SpikingConvLayer(cfg.layer_config(in_channels, stream.conv), layer_seed(run_seed, stream.role, fold))
        try:
            train_layer(layer, [encoded[i] for i in train_ids], cfg.layer.patches_per_clip, cfg.layer.epochs)
        except TwoStreamError as exc:
            raise StageError("train-stream", ",".join(train_ids[:3]), exc) from exc
        log.info("trained %s stream (seed %d, fold %d): %d/%d patches fired", stream.role, run_seed, fold,
                 layer.stats.fired, layer.stats.presented)
        return layer.to_bytes()

    if cache is None:
        raw = compute()
    else:
        raw = cache.fetch("layer", layer_key(encoded, train_ids, stream, cfg, run_seed, fold), compute)
    return SpikingConvLayer.from_bytes(raw)


def extract_features(time_map: np.ndarray, layer: SpikingConvLayer, stream: StreamSpec,
                     cfg: ExperimentConfig) -> FeatureVector:
    """Infer, decode first spikes to values, pool, flatten."""
    times = forward_times(time_map, layer, competition=False)
    values = np.where(np.isfinite(times), 1.0 - times / layer.config.t_exposition, 0.0)
    spec = PoolSpec((cfg.pool.grid_w, cfg.pool.grid_h), stream.pool_depth)
    return flatten(pool_feature_maps(values, spec), stream.role)


def extract_dataset(encoded, ids, layer, stream, cfg, cache=None, key=None) -> dict[str, FeatureVector]:
    def compute():
        out = {}
        for cid in ids:
            try:
                out[cid] = extract_features(encoded[cid], layer, stream, cfg).values
            except TwoStreamError as exc:
                raise StageError("extract", cid, exc) from exc
        return out

    fkey = None
    if key is not None:
        h = hashlib.sha256()
        for cid in ids:
            h.update(cid.encode() + b"\0")
            h.update(np.ascontiguousarray(encoded[cid]).tobytes())
        fkey = PipelineCache.key("features", key, h.hexdigest(), cfg.digest("pool"), str(stream.pool_depth))
    arrays = compute() if cache is None or fkey is None else _cached_arrays(cache, "features", fkey, compute)
    return {cid: FeatureVector(arrays[cid], [(stream.role, 0, arrays[cid].size)]) for cid in ids}


def svm_input(vec: FeatureVector, normalize: bool) -> np.ndarray:
    """What the classifier sees: single streams are L2-normalized like their fused halves."""
    if normalize and len(vec.provenance) == 1:
        return l2_normalize(vec.values)
    return vec.values.astype(np.float64)


def classify_fold(features: dict[str, FeatureVector], train_ids, test_ids, manifest: DatasetManifest,
                  cfg: ExperimentConfig, run_seed: int) -> EvalResult:
    norm = cfg.fusion.normalize
    k = len(manifest.class_names)
    model = train_svm([svm_input(features[i], norm) for i in train_ids], manifest.labels(train_ids),
                      C=cfg.svm.C, seed=run_seed, epochs=cfg.svm.epochs, n_classes=k)
    pred = predict_many(model, [svm_input(features[i], norm) for i in test_ids])
    return confusion_result(pred, manifest.labels(test_ids), k)


# -- whole experiments -------------------------------------------------------

@dataclass
class ExperimentResult:
    name: str
    labels: dict[str, str]  # column -> table header
    seeds: list[int]
    # per column, per run: the fold results of that run
    folds: dict[str, list[list[EvalResult]]] = field(default_factory=dict)

    def report(self, column: str) -> RunReport:
        merged = [merge_folds(f) for f in self.folds[column]]
        return RunReport([m.accuracy for m in merged], [m.confusion for m in merged])


def _run_seed(cfg: ExperimentConfig, seed: int, manifest: DatasetManifest, folds, streams, encoded,
              cache: PipelineCache | None) -> dict[str, list[EvalResult]]:
    per_column = {c: [] for c in COLUMNS}
    for fold, (train_ids, test_ids) in enumerate(folds):
        ids = list(train_ids) + list(test_ids)
        feats = {}
        for role, stream in streams.items():
            layer = train_stream(encoded[role], train_ids, stream, cfg, seed, fold, cache)
            key = None if cache is None else layer_key(encoded[role], train_ids, stream, cfg, seed, fold)
            feats[role] = extract_dataset(encoded[role], ids, layer, stream, cfg, cache, key)
        feats["fused"] = {i: fuse_concat(feats["spatial"][i], feats["temporal"][i], cfg.fusion.normalize)
                          for i in ids}
        for column in COLUMNS:
            per_column[column].append(classify_fold(feats[column], train_ids, test_ids, manifest, cfg, seed))
    log.info("run seed %d: %s", seed, ", ".join(
        f"{c}={merge_folds(per_column[c]).accuracy:.2f}" for c in COLUMNS))
    return per_column


def run_experiment(cfg: ExperimentConfig, cache: PipelineCache | None = None) -> ExperimentResult:
    """Train both streams per run seed, then score each stream alone and fused.

    With ``experiment.workers > 1`` the runs execute in separate processes; every
    run draws only from its own seeded generators, so the result does not change.
    """
    manifest, clips = load_dataset(cfg)
    folds = make_splits(manifest)
    streams = {role: cfg.stream(role) for role in ROLES}
    encoded = {role: encode_dataset(clips, s, cfg, cache) for role, s in streams.items()}
    labels = {"spatial": streams["spatial"].label, "temporal": streams["temporal"].label, "fused": "Fused"}
    result = ExperimentResult(cfg.experiment.name, labels, list(cfg.experiment.seeds),
                              {c: [] for c in COLUMNS})
    seeds = cfg.experiment.seeds
    args = (manifest, folds, streams, encoded, cache)
    workers = min(cfg.experiment.workers, len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_seed, [cfg] * len(seeds), seeds, *([a] * len(seeds) for a in args)))
    else:
        runs = [_run_seed(cfg, seed, *args) for seed in seeds]
    for per_column in runs:
        for column in COLUMNS:
            result.folds[column].append(per_column[column])
    return result


def result_lines(result: ExperimentResult) -> list[str]:
    """Machine-readable rows plus ``#counts`` rows that carry exact per-fold tallies."""
    lines = []
    for column in COLUMNS:
        for run, (seed, folds) in enumerate(zip(result.seeds, result.folds[column]), 1):
            acc = merge_folds(folds).accuracy
            lines.append(f"{result.name},{column},{run},{round_half_up(acc)}")
            for fold, r in enumerate(folds):
                lines.append(f"#counts,{result.name},{column},{run},{fold},{r.correct},{r.total}")
    return lines


def format_report(result: ExperimentResult) -> str:
    headers = [result.labels[c] for c in COLUMNS]
    cells = [result.report(c).summary() for c in COLUMNS]
    widths = [max(len(h), len(v)) for h, v in zip(headers, cells)]
    lines = [
        f"experiment: {result.name}",
        f"runs: {len(result.seeds)} (seeds {','.join(str(s) for s in result.seeds)})",
        "",
        " | ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "-+-".join("-" * w for w in widths),
        " | ".join(v.ljust(w) for v, w in zip(cells, widths)).rstrip(),
        "",
        "experiment,stream,run,accuracy",
    ]
    lines += result_lines(result)
    return "\n".join(lines) + "\n"


def parse_result_lines(text: str, labels: dict[str, str] | None = None) -> ExperimentResult:
    """Rebuild a result from ``#counts`` rows (as written by result_lines or ``classify``)."""
    counts: dict[tuple[str, int], dict[int, tuple[int, int]]] = {}
    name = None
    for line in text.splitlines():
        if not line.startswith("#counts,"):
            continue
        _, exp, column, run, fold, correct, total = line.split(",")
        name = name or exp
        counts.setdefault((column, int(run)), {})[int(fold)] = (int(correct), int(total))
    if name is None:
        raise StageError("report", "-", "no #counts rows in the results")
    runs = sorted({run for _, run in counts})
    result = ExperimentResult(name, labels or {c: c for c in COLUMNS}, runs, {c: [] for c in COLUMNS})
    for column in COLUMNS:
        for run in runs:
            folds = counts.get((column, run))
            if folds is None:
                raise StageError("report", f"{column} run {run}", "missing results")
            result.folds[column].append([
                EvalResult(c, t, np.zeros((0, 0), dtype=np.int64)) for _, (c, t) in sorted(folds.items())
            ])
    return result

"""Command line entry point: ``twostream <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .config import ExperimentConfig, TEMPORAL_KINDS
from .errors import ConfigError, DataError, DependencyError, StageError, TwoStreamError
from .features import FeatureVector, fuse_concat
from .retina import SpikingTensor
from .snn import SpikingConvLayer
from .video import DatasetManifest, VideoTensor, generate_synthetic, make_splits, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_text("", overrides)


def _stream(cfg: ExperimentConfig, name: str):
    """``spatial``, ``temporal`` or ``<role>.<kind>`` (the kind overrides the config)."""
    role, _, kind = name.partition(".")
    if kind:
        if role == "temporal":
            if kind not in TEMPORAL_KINDS:
                raise ConfigError(f"unknown temporal stream {kind!r}")
            cfg.temporal.kind = kind
        elif role == "spatial":
            cfg.spatial.kind = kind
        cfg.validate()
    return cfg.stream(role)


def _need(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"{what} ({path})", producer)
    return path


def _manifest(args) -> tuple[DatasetManifest, Path]:
    path = _need(Path(args.manifest), "dataset manifest", "synth")
    return DatasetManifest.load(path), path


def _fold(manifest: DatasetManifest, fold: int):
    folds = make_splits(manifest)
    if not 0 <= fold < len(folds):
        raise ConfigError(f"fold {fold} out of range; protocol has {len(folds)} fold(s)")
    return folds[fold]


def _read_encoded(directory: Path, ids) -> dict[str, np.ndarray]:
    _need(directory, "encoded spike directory", "encode")
    return {cid: SpikingTensor.load(_need(directory / f"{cid}.spk", f"spikes for {cid}", "encode")).time_map()
            for cid in ids}


def _run_index(cfg: ExperimentConfig, seed: int) -> int:
    if seed not in cfg.experiment.seeds:
        raise ConfigError(f"seed {seed} is not one of experiment.seeds {cfg.experiment.seeds}")
    return cfg.experiment.seeds.index(seed) + 1


def _write(out, text: str) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands ------------------------------------------------------------------

def cmd_run(args) -> None:
    cfg = _load_config(args)
    cache = ex.PipelineCache(args.cache) if args.cache else ex.PipelineCache.from_env()
    _write(args.out, ex.format_report(ex.run_experiment(cfg, cache)))


def cmd_synth(args) -> None:
    cfg = _load_config(args)
    d = cfg.dataset
    seed = d.seed if args.seed is None else args.seed
    manifest, clips = generate_synthetic(d.n_per_class, d.classes, seed, cfg.synthetic_spec())
    path = write_dataset(args.out, manifest, clips)
    print(f"wrote {len(clips)} clips and {path}")


def cmd_encode(args) -> None:
    cfg = _load_config(args)
    stream = _stream(cfg, args.stream)
    if args.clip:
        clip = VideoTensor.load(_need(Path(args.clip), "clip file", "synth"))
        spikes = SpikingTensor.from_time_map(ex.encode_clip_for_stream(clip, stream, cfg))
        spikes.save(args.out)
        mean_t = float(spikes.t.mean()) if len(spikes) else float("nan")
        print(f"events={len(spikes)} mean_time={mean_t:.6f}")
        return
    if not args.manifest:
        raise UsageError("encode needs --clip or --manifest")
    manifest_path = _need(Path(args.manifest), "dataset manifest", "synth")
    manifest, clips = read_dataset(manifest_path, cfg.clip_spec())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["clip_id\tevents\tmean_time"]
    for cid, clip in clips.items():
        spikes = SpikingTensor.from_time_map(ex.encode_clip_for_stream(clip, stream, cfg))
        spikes.save(out / f"{cid}.spk")
        mean_t = float(spikes.t.mean()) if len(spikes) else float("nan")
        rows.append(f"{cid}\t{len(spikes)}\t{mean_t:.6f}")
    (out / "stats.tsv").write_text("\n".join(rows) + "\n")
    print(f"encoded {len(clips)} clips for the {stream.role} stream ({stream.label})")


def cmd_train_stream(args) -> None:
    cfg = _load_config(args)
    stream = _stream(cfg, args.stream)
    manifest, _ = _manifest(args)
    train_ids, _ = _fold(manifest, args.fold)
    encoded = _read_encoded(Path(args.encoded), train_ids)
    seed = cfg.experiment.seeds[0] if args.seed is None else args.seed
    layer = ex.train_stream(encoded, train_ids, stream, cfg, seed, args.fold)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(layer.to_bytes())
    print(f"trained layer: {layer.stats.fired}/{layer.stats.presented} patches fired -> {args.out}")


def cmd_extract(args) -> None:
    cfg = _load_config(args)
    stream = _stream(cfg, args.stream)
    manifest, _ = _manifest(args)
    train_ids, test_ids = _fold(manifest, args.fold)
    ids = list(train_ids) + list(test_ids)
    layer = SpikingConvLayer.from_bytes(_need(Path(args.layer), "layer checkpoint", "train-stream").read_bytes())
    encoded = _read_encoded(Path(args.encoded), ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cid in ids:
        ex.extract_features(encoded[cid], layer, stream, cfg).save(out / f"{cid}.feat")
    print(f"extracted {len(ids)} feature vectors -> {out}")


def cmd_fuse(args) -> None:
    cfg = _load_config(args)
    a_dir = _need(Path(args.a), "first stream features", "extract")
    b_dir = _need(Path(args.b), "second stream features", "extract")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in a_dir.glob("*.feat"))
    if not names:
        raise DependencyError(f"feature files in {a_dir}", "extract")
    for name in names:
        a = FeatureVector.load(a_dir / name)
        b = FeatureVector.load(_need(b_dir / name, f"features {name}", "extract"))
        fuse_concat(a, b, cfg.fusion.normalize).save(out / name)
    print(f"fused {len(names)} feature vectors -> {out}")


def cmd_classify(args) -> None:
    cfg = _load_config(args)
    manifest, _ = _manifest(args)
    train_ids, test_ids = _fold(manifest, args.fold)
    feat_dir = _need(Path(args.features), "feature directory", "extract")
    feats = {cid: FeatureVector.load(_need(feat_dir / f"{cid}.feat", f"features for {cid}", "extract"))
             for cid in list(train_ids) + list(test_ids)}
    seed = cfg.experiment.seeds[0] if args.seed is None else args.seed
    run = _run_index(cfg, seed)
    r = ex.classify_fold(feats, train_ids, test_ids, manifest, cfg, seed)
    lines = [f"{cfg.experiment.name},{args.column},{run},{ex.round_half_up(r.accuracy)}",
             f"#counts,{cfg.experiment.name},{args.column},{run},{args.fold},{r.correct},{r.total}"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("a") as fh:
        fh.write("\n".join(lines) + "\n")
    print(lines[0])


def cmd_report(args) -> None:
    cfg = _load_config(args)
    text = ""
    for path in args.results:
        text += _need(Path(path), "results file", "classify").read_text()
    labels = {"spatial": cfg.stream("spatial").label, "temporal": cfg.stream("temporal").label, "fused": "Fused"}
    result = ex.parse_result_lines(text, labels)
    if len(result.seeds) == len(cfg.experiment.seeds):
        result.seeds = list(cfg.experiment.seeds)
    _write(args.out, ex.format_report(result))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twostream", description="Spiking two-stream action recognition experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config file (section.key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, default=None)
        p.set_defaults(func=func)
        return p

    p = add("run", cmd_run, "run a full experiment and print the report")
    p.add_argument("--out")
    p.add_argument("--cache", help=f"cache directory (default: ${ex.CACHE_ENV})")

    p = add("synth", cmd_synth, "write a synthetic dataset")
    p.add_argument("--out", required=True)

    p = add("encode", cmd_encode, "preprocess and latency-encode clips into spike dumps")
    p.add_argument("--stream", default="spatial")
    p.add_argument("--clip")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)

    p = add("train-stream", cmd_train_stream, "train one stream's spiking layer")
    p.add_argument("--stream", default="spatial")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("extract", cmd_extract, "extract pooled feature vectors with a trained layer")
    p.add_argument("--stream", default="spatial")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoded", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("fuse", cmd_fuse, "concatenate two streams' feature vectors")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)

    p = add("classify", cmd_classify, "train and score the SVM read-out; appends result rows")
    p.add_argument("--column", choices=ex.COLUMNS, required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "format result rows as a table")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"twostream: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"twostream: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"twostream: error: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc.cause, DataError) else EXIT_INTERNAL
    except (DataError, OSError) as exc:
        print(f"twostream: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TwoStreamError as exc:
        print(f"twostream: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).exception("internal error")
        print(f"twostream: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``spikingdd <command> ...``.

Results go to stdout as JSON, diagnostics to stderr. Exit codes: 0 ok,
2 configuration or usage error, 3 I/O error, 4 corrupt artifact, 5 an output
already exists and ``--overwrite`` was not given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import atomic_write_bytes, load_checkpoint
from .dataset import FeatureSet, stratified_split_by_source
from .errors import BoundsError, ConfigError, CorruptArtifactError, ParseError, ShapeError, TrainingError
from .events import DEFAULT_DT_US, DEFAULT_SEGMENT_US, format_from_suffix, read_events, write_events
from .evsim import SimConfig, load_frame_dir, simulate_events
from .loss import LossConfig, RateTarget
from .network import count_params, default_neuron, spiking_dd
from .synthgen import LabeledStream, SynthConfig, read_dataset, write_dataset
from .trainer import OptimConfig, evaluate, predict, train, write_metrics

logger = logging.getLogger("spikingdd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CORRUPT, EXIT_EXISTS = 0, 2, 3, 4, 5


class WouldOverwrite(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(_finite(obj), sort_keys=True, allow_nan=False) + "\n")


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _guard(paths, overwrite: bool) -> None:
    for p in paths:
        if Path(p).exists() and not overwrite:
            raise WouldOverwrite(f"{p} exists (pass --overwrite to replace it)")


def _write_manifest(path, args, config: dict, inputs, outputs, started: float) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "config_hash": _config_hash(config),
        "seed": args.seed,
        "deterministic": args.deterministic,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "engine_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _run_manifest_path(output) -> Path:
    output = Path(output)
    return output / "run.json" if output.is_dir() else output.with_name(output.name + ".run.json")


def _merge(section: dict, cls, overrides: dict) -> dict:
    """Dataclass kwargs from a config-file section with non-None flag overrides applied."""
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _load_dataset(directory) -> list[LabeledStream]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: no such dataset directory")
    streams = read_dataset(directory)
    if not streams:
        raise ConfigError(f"{directory}: dataset has no streams")
    return streams


def _features(model, streams, segment_us: int, dt_us: int) -> FeatureSet:
    data = FeatureSet.from_streams(model, streams, segment_us, dt_us)
    if len(data) == 0:
        raise ConfigError("dataset yields no complete segments")
    return data


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> dict:
    out = Path(args.output)
    _guard([out], args.overwrite)
    cfg = SimConfig(**_merge(_load_json(args.config).get("sim", {}), SimConfig, {
        "contrast_threshold": args.contrast_threshold, "eps": args.eps,
    }))
    seq = load_frame_dir(args.frames_dir, args.fps)
    stream = simulate_events(seq, cfg)
    fmt = args.format or format_from_suffix(out)
    write_events(stream, out, fmt)
    config = {"sim": asdict(cfg), "fps": args.fps, "format": fmt}
    _write_manifest(_run_manifest_path(out), args, config, [args.frames_dir], [out], args.started)
    return {"events": len(stream), "frames": len(seq.frames), "output": str(out), "width": stream.width,
            "height": stream.height, "duration_us": stream.duration_us}


def cmd_gen_synth(args) -> dict:
    out = Path(args.output)
    targets = [out / "manifest.json", out / "streams"]
    _guard(targets, args.overwrite)
    raw = _load_json(args.config)
    raw = raw.get("synth", raw)
    flags = {
        "n_streams_per_class": args.n_per_class,
        "width": args.width,
        "height": args.height,
        "stream_duration_us": args.duration_us,
        "noise_rate": args.noise_rate,
        "seed": args.seed,
    }
    cfg = SynthConfig.from_dict({**raw, **{k: v for k, v in flags.items() if v is not None}})
    if args.overwrite and (out / "streams").is_dir():
        shutil.rmtree(out / "streams")
    manifest = write_dataset(cfg, out)
    _write_manifest(out / "run.json", args, cfg.to_dict(), [] if args.config is None else [args.config],
                    [manifest], args.started)
    return {"output": str(out), "streams": 2 * cfg.n_streams_per_class, "config_hash": cfg.config_hash()}


def _train_config(args) -> dict:
    raw = _load_json(args.config)
    unknown = set(raw) - {"optim", "loss", "model", "split"}
    if unknown:
        raise ConfigError(f"unknown train config sections: {sorted(unknown)}")
    optim = _merge(raw.get("optim", {}), OptimConfig, {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr0": args.lr, "seed": args.seed,
    })
    loss = dict(raw.get("loss", {}))
    if args.loss_mode is not None:
        loss["mode"] = args.loss_mode
    if args.window_len is not None:
        loss["window_len"] = args.window_len
    bad = set(loss) - {"mode", "window_len", "r_true", "r_false"}
    if bad:
        raise ConfigError(f"unknown loss keys: {sorted(bad)}")
    model = dict({"hidden": [32, 8], "pool_kernel": 7, "dropout_p": 0.05}, **raw.get("model", {}))
    if args.hidden is not None:
        model["hidden"] = args.hidden
    if set(model) - {"hidden", "pool_kernel", "dropout_p"}:
        raise ConfigError(f"unknown model keys: {sorted(set(model) - {'hidden', 'pool_kernel', 'dropout_p'})}")
    split = dict({"fractions": [0.70, 0.15, 0.15], "seed": 0}, **raw.get("split", {}))
    if set(split) - {"fractions", "seed"}:
        raise ConfigError("split accepts only 'fractions' and 'seed'")
    return {"optim": optim, "loss": loss, "model": model, "split": split}


def _loss_cfg(d: dict) -> LossConfig:
    target = RateTarget(**{k: d[k] for k in ("r_true", "r_false") if k in d})
    return LossConfig(d.get("mode", "whole_trial"), int(d.get("window_len", 0)), target)


def _split(data: FeatureSet, split: dict):
    return stratified_split_by_source(data.source_ids, data.labels, tuple(split["fractions"]), int(split["seed"]))


def cmd_train(args) -> dict:
    ckpt = Path(args.output)
    metrics_path = ckpt.with_name(ckpt.stem + ".metrics.jsonl")
    _guard([ckpt, metrics_path], args.overwrite)
    config = _train_config(args)
    opt_cfg = OptimConfig(**config["optim"])
    loss_cfg = _loss_cfg(config["loss"])
    config["optim"], config["loss"] = asdict(opt_cfg), asdict(loss_cfg)
    streams = _load_dataset(args.dataset)
    width, height = streams[0].stream.geometry
    mc = config["model"]
    model = spiking_dd(height, width, int(mc["pool_kernel"]), tuple(mc["hidden"]), 2, default_neuron(),
                       float(mc["dropout_p"]), seed=opt_cfg.seed)
    data = _features(model, streams, DEFAULT_SEGMENT_US, DEFAULT_DT_US)
    tr, va, te = _split(data, config["split"])
    logger.info("segments: %d train, %d val, %d test", len(tr), len(va), len(te))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    best, metrics = train(model, data.subset(tr), data.subset(va), loss_cfg, opt_cfg, checkpoint_path=ckpt)
    write_metrics(metrics, metrics_path, timing=not args.deterministic)
    config["geometry"] = [2, height, width]
    _write_manifest(_run_manifest_path(ckpt), args, config, [args.dataset], [ckpt, metrics_path], args.started)
    result = {
        "checkpoint": str(ckpt),
        "metrics": str(metrics_path),
        "epochs": len(metrics),
        "segments": {"train": len(tr), "val": len(va), "test": len(te)},
    }
    if metrics:
        best_epoch = max(metrics, key=lambda m: (m.accuracy, -m.epoch)) if len(va) else metrics[-1]
        result.update(best_epoch=best_epoch.epoch, val_accuracy=best_epoch.accuracy,
                      first_loss=metrics[0].mean_loss, last_loss=metrics[-1].mean_loss)
    if len(te):
        result["test_accuracy"] = evaluate(best, data.subset(te), loss_cfg).accuracy
    return result


def cmd_eval(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    streams = _load_dataset(args.dataset)
    data = _features(model, streams, DEFAULT_SEGMENT_US, DEFAULT_DT_US)
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), _split(data, {"fractions": args.fractions, "seed": args.split_seed})))
        data = data.subset(parts[args.split])
        if len(data) == 0:
            raise ConfigError(f"split {args.split!r} is empty")
    loss_cfg = LossConfig()
    m = evaluate(model, data, loss_cfg)
    preds, _, _ = predict(model, data)
    report = {"accuracy": m.accuracy, "mean_loss": m.mean_loss, "segments": len(data), "split": args.split,
              "predictions": preds.tolist()}
    if args.report:
        _guard([args.report], args.overwrite)
        atomic_write_bytes(args.report, (json.dumps(_finite(report), indent=2, sort_keys=True) + "\n").encode())
    logger.info("accuracy %.4f, mean loss %.5f over %d segments", m.accuracy, m.mean_loss, len(data))
    return report


def cmd_infer(args) -> None:
    model = load_checkpoint(args.checkpoint)
    stream = read_events(args.events, args.format or format_from_suffix(args.events))
    data = FeatureSet.from_streams(model, [LabeledStream(stream, 0, str(args.events), 0)],
                                   DEFAULT_SEGMENT_US, DEFAULT_DT_US)
    if len(data) == 0:
        logger.warning("0 segments: stream is shorter than one %d us segment", DEFAULT_SEGMENT_US)
        return None
    preds, rates, _ = predict(model, data)
    for i, (c, r) in enumerate(zip(preds.tolist(), rates.tolist())):
        _emit({"segment": i, "t0_us": i * DEFAULT_SEGMENT_US, "rates": r, "class": c})
    return None


def cmd_inspect(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    layers = []
    for spec in model.layers:
        entry = {"kind": spec.kind}
        if spec.kind == "pool":
            entry["kernel"] = spec.kernel
        elif spec.kind == "dense":
            entry.update(in_units=spec.in_units, out_units=spec.out_units, dropout_p=spec.dropout_p,
                         neuron=asdict(spec.neuron))
        layers.append(entry)
    n = count_params(model)
    logger.info("%s parameters: %s", f"{n:,}", " -> ".join(model.chain()))
    return {"input_geometry": list(model.input_geometry), "chain": model.chain(), "layers": layers,
            "params": n, "dtype": str(np.dtype(model.dtype))}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--deterministic", action="store_true", help="single thread, timing-free metrics")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap (default: all cores)")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--config", default=None, help="JSON config file; flags override its values")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="spikingdd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="convert a PGM frame directory to events")
    p.add_argument("frames_dir")
    p.add_argument("--fps", type=float, required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--format", choices=["csv", "bin"])
    p.add_argument("--contrast-threshold", type=float)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-synth", parents=[common], help="generate the synthetic two-class dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--duration-us", type=int)
    p.add_argument("--noise-rate", type=float)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    p.add_argument("dataset")
    p.add_argument("-o", "--output", required=True, help="checkpoint path; metrics go beside it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--loss-mode", choices=["whole_trial", "moving_window"])
    p.add_argument("--window-len", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset directory")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.70, 0.15, 0.15])
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="classify each segment of an event file")
    p.add_argument("checkpoint")
    p.add_argument("events")
    p.add_argument("--format", choices=["csv", "bin"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect", parents=[common], help="summarise a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.started = time.time()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.handlers = [handler]
    logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    logger.propagate = False
    if args.seed is None and args.command != "gen-synth":
        args.seed = 0
    threads = 1 if args.deterministic else (args.threads or os.cpu_count() or 1)
    if threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            result = args.func(args)
    except WouldOverwrite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except CorruptArtifactError as exc:
        print(f"error: corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (ParseError, BoundsError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return 1
    if result is not None:
        _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: generate, preprocess, train, eval, predict, ablate, bench."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (DatasetSplit, SceneConfig, clean_tracks, parse_trajectory_file, read_segments,
                   segment_scenes, split_dataset, write_native_csv, write_segments)
from .evaluation import (ExperimentSpec, bench_inference, evaluate, evaluate_cv, experiment_manifest,
                         robust_subset, draw_samples)
from .harness import ScenarioConfig, dense_scene, generate_scenario
from .model import GSTCN, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit, load_params

THREADS_ENV = "ST_GRAPH_THREADS"
SPLITS = ("train", "val", "test")

log = logging.getLogger("gstcn")


class CliError(Exception):
    """A failure reported as one ``error: <kind>: <message>`` line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise CliError(f"usage: {message}")


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_segments(path: Path) -> list:
    with open(path) as fh:
        return list(read_segments(fh))


def load_split(data: str | Path) -> DatasetSplit:
    """Read ``train/val/test.jsonl`` written by ``preprocess``."""
    d = Path(data)
    if not d.is_dir():
        raise CliError(f"data directory not found: {d}")
    parts = {}
    for name in SPLITS:
        f = d / f"{name}.jsonl"
        parts[name] = _load_segments(f) if f.exists() else []
    seed = 0
    if (d / "split.json").exists():
        seed = int(_read_json(d / "split.json").get("seed", 0))
    return DatasetSplit(parts["train"], parts["val"], parts["test"], seed)


def _configs(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    doc = _read_json(path) if path else {}
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    return ModelConfig.from_dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {}))


# commands

def cmd_generate(args) -> None:
    doc = _read_json(args.scenario) if args.scenario else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(doc)
    tracks = generate_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tracks.csv", "w", newline="") as fh:
        write_native_csv(tracks, fh)
    _write_json(out / "scenario.json", {"scenario": json.loads(cfg.to_json()), "vehicles": len(tracks)})
    print(out / "tracks.csv")


def cmd_preprocess(args) -> None:
    fmt = {"native": "native_csv", "ngsim": "ngsim_csv"}[args.format]
    with open(args.input, "rb") as fh:
        tracks = parse_trajectory_file(fh.read(), fmt)
    scene = SceneConfig(stride=args.stride, relative_coords=not args.absolute_coords)
    segments = segment_scenes(clean_tracks(tracks, factor=args.downsample), scene)
    if not segments:
        raise CliError("no complete scene windows in the input")
    seed = args.seed or 0
    split = split_dataset(segments, tuple(args.ratios), seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        with open(out / f"{name}.jsonl", "w") as fh:
            write_segments(getattr(split, name), fh)
    _write_json(out / "split.json", {"seed": seed, "ratios": list(args.ratios), "source": str(args.input),
                                     "format": fmt, "scene": asdict(scene),
                                     "counts": {n: len(getattr(split, n)) for n in SPLITS}})
    print(json.dumps({n: len(getattr(split, n)) for n in SPLITS}))


def cmd_train(args) -> None:
    model_cfg, train_cfg = _configs(args.config)
    seed = args.seed if args.seed is not None else train_cfg.seed
    train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed})
    split = load_split(args.data)
    model = GSTCN(model_cfg, seed=seed)
    best, report = fit(model, split, train_cfg, progress=args.verbose)
    load_params(model, best)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, seed, {"train_config": train_cfg.to_dict(), "best_epoch": report.best_epoch})
    report_path = Path(args.report) if args.report else out.with_suffix(".report.csv")
    report_path.write_text(report.to_csv(timing=not args.no_timing))
    print(json.dumps({"checkpoint": str(out), "report": str(report_path), "best_epoch": report.best_epoch,
                      "best_val_nll": min(r.val_nll for r in report.epochs)}))


def cmd_eval(args) -> None:
    model, manifest = load_checkpoint(args.ckpt)
    spec = ExperimentSpec.from_dict(_read_json(args.spec)) if args.spec else ExperimentSpec()
    if args.seed is not None:
        spec = ExperimentSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    split = load_split(args.data)
    test = robust_subset(split.test) if spec.robustness == "total" else split.test
    if not test:
        raise CliError("test split is empty")
    result = evaluate_cv(test, spec.location) if args.baseline == "cv" else evaluate(model, test, spec)
    text = result.to_csv()
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        doc = experiment_manifest(spec, model.config, None, result,
                                  {"checkpoint": str(args.ckpt), "baseline": args.baseline,
                                   "checkpoint_seed": manifest["seed"]})
        _write_json(out.with_suffix(".json"), doc)
    sys.stdout.write(text)


def density_grid(samples: np.ndarray, resolution: float) -> list[list[float]]:
    """(x, y, probability) cell centres of a 2-D histogram over all sampled points."""
    pts = samples.reshape(-1, 2)
    lo = np.floor(pts.min(axis=0) / resolution) * resolution
    idx = np.floor((pts - lo) / resolution).astype(np.int64)
    cells, counts = np.unique(idx, axis=0, return_counts=True)
    prob = counts / counts.sum()
    centres = lo + (cells + 0.5) * resolution
    return [[float(x), float(y), float(p)] for (x, y), p in zip(centres, prob)]


def cmd_predict(args) -> None:
    if args.samples < 1:
        raise CliError("--samples must be at least 1")
    model, _ = load_checkpoint(args.ckpt)
    scenes = _load_segments(Path(args.scene))
    if not scenes:
        raise CliError(f"{args.scene}: no scenes")
    seed = args.seed or 0
    out = []
    for i, (scene, field) in enumerate(zip(scenes, model.predict(scenes))):
        samples = draw_samples(field, args.samples, seed * 100003 + i)      # (k, 2, F, N)
        vehicles = []
        for n in range(scene.num_vehicles):
            traj = samples[:, :, :, n].transpose(0, 2, 1)                    # (k, F, 2)
            vehicles.append({
                "vehicle_id": int(scene.vehicle_ids[n]),
                "field": field.as_array()[:, n, :].tolist(),
                "samples": traj.tolist(),
                "density": density_grid(traj, args.grid_resolution),
            })
        out.append({"scene": i, "reference_vehicle": int(scene.reference_vehicle),
                    "field_columns": ["mu_x", "mu_y", "sigma_x", "sigma_y", "rho"], "vehicles": vehicles})
    Path(args.out).write_text(json.dumps({"samples": args.samples, "seed": seed, "scenes": out}) + "\n")
    print(args.out)


ABLATIONS = {
    "gcn": [ExperimentSpec(), ExperimentSpec(variant="no_gcn")],
    "tde": [ExperimentSpec(), ExperimentSpec(variant="no_tde")],
    "gru": [ExperimentSpec(), ExperimentSpec(variant="no_gru")],
    "adjacency": [ExperimentSpec(adjacency_scheme=s) for s in ("reciprocal", "distance", "ones")],
}


def _row_name(spec: ExperimentSpec) -> str:
    return spec.variant if spec.variant != "full" else f"full/{spec.adjacency_scheme}"


def cmd_ablate(args) -> None:
    model_cfg, train_cfg = _configs(args.config)
    split = load_split(args.data)
    rows = ["experiment,seed,1,2,3,4,5,average"]
    for seed in args.seeds:
        for base in ABLATIONS[args.which]:
            spec = ExperimentSpec.from_dict({**base.to_dict(), "seed": seed})
            model = GSTCN(spec.model_config(model_cfg), seed=seed)
            best, _ = fit(model, split, TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed}))
            load_params(model, best)
            r = evaluate(model, split.test, spec)
            rows.append(",".join([_row_name(spec), str(seed)] + [repr(v) for v in r.values] + [repr(r.average)]))
            log.info("%s", rows[-1])
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_bench(args) -> None:
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
    else:
        model = GSTCN(ModelConfig(), seed=args.seed or 0)
    if args.data:
        scenes = load_split(args.data).test
    else:
        scenes = [dense_scene(args.vehicles, seed=args.seed or 0)]
    report = bench_inference(model, scenes, args.repetitions)
    doc = report.to_dict()
    doc["reference_gpu_ms"] = 0.044
    print(json.dumps(doc, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gstcn", description="Train, evaluate and benchmark the scene trajectory forecaster.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthetic tracks as native CSV")
    g.add_argument("--scenario", help="ScenarioConfig JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="clean, segment and split a trajectory file")
    pp.add_argument("--in", dest="input", required=True)
    pp.add_argument("--format", choices=("native", "ngsim"), default="native")
    pp.add_argument("--out", required=True)
    pp.add_argument("--seed", type=int)
    pp.add_argument("--stride", type=int, default=1)
    pp.add_argument("--downsample", type=int, default=2)
    pp.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    pp.add_argument("--absolute-coords", action="store_true")
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help='JSON with optional "model" and "train" sections')
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--report", help="TrainReport CSV path (default: next to the checkpoint)")
    t.add_argument("--no-timing", action="store_true", help="omit the seconds column")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="horizon RMSE table of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--spec", help="ExperimentSpec JSON")
    e.add_argument("--seed", type=int)
    e.add_argument("--baseline", choices=("model", "cv"), default="model")
    e.add_argument("--out", help="CSV path; a JSON manifest is written beside it")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="Gaussian fields, samples and density grids")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--scene", required=True, help="SceneSegment JSONL")
    pr.add_argument("--samples", type=int, default=5)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--grid-resolution", type=float, default=0.5)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="module-removal or adjacency-scheme table")
    a.add_argument("--which", choices=sorted(ABLATIONS), required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--seed", type=int, help="shorthand for a single seed")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="parameter count and per-vehicle latency")
    b.add_argument("--ckpt")
    b.add_argument("--data")
    b.add_argument("--vehicles", type=int, default=120)
    b.add_argument("--repetitions", type=int, default=10)
    b.add_argument("--seed", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "seed", None) is not None and hasattr(args, "seeds"):
            args.seeds = [args.seed]
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            args.func(args)
    except CliError as e:
        kind, msg = "usage", str(e)
        if msg.startswith("usage: "):
            msg = msg[len("usage: "):]
        else:
            kind = "input"
        print(f"error: {kind}: {msg}".replace("\n", " "), file=sys.stderr)
        return 2 if kind == "usage" else 1
    except FileNotFoundError as e:
        print(f"error: input: no such file: {e.filename}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, TypeError, RuntimeError) as e:
        print(f"error: {type(e).__name__}: {e}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

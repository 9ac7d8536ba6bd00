"""Horizon RMSE, best-of-k sampling, location strata, experiment drivers and latency."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import DatasetSplit, SceneSegment, corrupt_for_robustness
from .harness import cv_predict_scene
from .model import BiGaussianField, GSTCN, ModelConfig, ablation_config, sample_trajectory
from .training import TrainConfig, TrainReport, fit, load_params

HORIZONS_S = (1, 2, 3, 4, 5)
FRAME_RATE_HZ = 5.0
SCENE_RANGE_M = 100.0

VARIANT_NAMES = ("full", "no_gcn", "no_tde", "no_gru")
ROBUSTNESS_CASES = ("none", "partial", "total")
LOCATIONS = ("all", "middle", "front", "rear", "center")


def horizon_step(t: float, rate_hz: float = FRAME_RATE_HZ) -> int:
    """Zero-based future frame index of a horizon of ``t`` seconds."""
    k = t * rate_hz
    if k < 1 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"horizon {t} s does not fall on a {rate_hz} Hz frame")
    return int(round(k)) - 1


@dataclass(frozen=True)
class HorizonRmse:
    """RMSE in meters at the 1..5 s horizons."""

    values: tuple[float, ...]
    horizons: tuple[int, ...] = HORIZONS_S

    def __post_init__(self):
        if len(self.values) != len(self.horizons):
            raise ValueError("one value per horizon required")
        if any(not v >= 0 for v in self.values):
            raise ValueError("RMSE values must be non-negative")

    @property
    def average(self) -> float:
        return float(np.mean(self.values))

    def at(self, t: int) -> float:
        return self.values[self.horizons.index(t)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["horizon_s", "rmse_m"])
        for h, v in zip(self.horizons, self.values):
            w.writerow([h, repr(float(v))])
        w.writerow(["average", repr(self.average)])
        return buf.getvalue()


class SquaredErrorPool:
    """Accumulates squared displacement errors per horizon across scenes."""

    def __init__(self, horizons: Sequence[int] = HORIZONS_S, rate_hz: float = FRAME_RATE_HZ):
        self.horizons = tuple(horizons)
        self.steps = [horizon_step(h, rate_hz) for h in self.horizons]
        self.sq = np.zeros(len(self.horizons))
        self.count = 0

    def add_squared(self, sq: np.ndarray, n: int) -> None:
        """Add per-horizon sums of squared errors over ``n`` vehicles."""
        self.sq += sq
        self.count += n

    def add(self, preds: np.ndarray, truth: np.ndarray, vehicles: Sequence[int] | None = None) -> None:
        sq = displacement_sq(preds, truth)[self.steps]
        if vehicles is not None:
            sq = sq[:, list(vehicles)]
        self.add_squared(sq.sum(axis=1), sq.shape[1])

    def result(self) -> HorizonRmse:
        if self.count == 0:
            raise ValueError("no vehicles evaluated")
        return HorizonRmse(tuple(float(v) for v in np.sqrt(self.sq / self.count)), self.horizons)


def displacement_sq(preds: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """(F, N) squared Euclidean errors of (2, F, N) trajectories."""
    preds, truth = np.asarray(preds, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if preds.shape != truth.shape or preds.ndim != 3 or preds.shape[0] != 2:
        raise ValueError(f"expected matching (2, F, N) arrays, got {preds.shape} and {truth.shape}")
    return np.sum((preds - truth) ** 2, axis=0)


def rmse_at(preds: np.ndarray, truth: np.ndarray, t: float, rate_hz: float = FRAME_RATE_HZ) -> float:
    """sqrt(mean over vehicles of the squared displacement) at horizon ``t`` seconds."""
    sq = displacement_sq(preds, truth)
    k = horizon_step(t, rate_hz)
    if k >= sq.shape[0]:
        raise ValueError(f"horizon {t} s is beyond the {sq.shape[0]} predicted frames")
    return float(np.sqrt(np.mean(sq[k])))


def horizon_rmse(preds: np.ndarray, truth: np.ndarray) -> HorizonRmse:
    pool = SquaredErrorPool()
    pool.add(preds, truth)
    return pool.result()


def draw_samples(field_: BiGaussianField, k: int, seed: int) -> np.ndarray:
    """(k, 2, F, N) sampled trajectories; the first j draws do not depend on k."""
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)
    return np.stack([sample_trajectory(field_, rng) for _ in range(k)])


def best_of_k_sq(field_: BiGaussianField, truth: np.ndarray, k: int, seed: int,
                 vehicles: Sequence[int] | None = None) -> np.ndarray:
    """Per-horizon squared-error sums of the best of ``k`` samples for one scene."""
    steps = [horizon_step(h) for h in HORIZONS_S]
    best = None
    for s in draw_samples(field_, k, seed):
        sq = displacement_sq(s, truth)[steps]
        if vehicles is not None:
            sq = sq[:, list(vehicles)]
        sums = sq.sum(axis=1)
        best = sums if best is None else np.minimum(best, sums)
    return best


def best_of_k_rmse(field_: BiGaussianField, truth: np.ndarray, k: int = 5, seed: int = 0) -> HorizonRmse:
    """Per horizon, the lowest RMSE among ``k`` seeded samples of one scene."""
    n = np.asarray(truth).shape[2]
    return HorizonRmse(tuple(float(v) for v in np.sqrt(best_of_k_sq(field_, truth, k, seed) / n)))


def stratify_by_location(segment: SceneSegment, length: float = SCENE_RANGE_M) -> dict[str, np.ndarray]:
    """Front / middle / rear vehicle indices by longitudinal offset from the reference."""
    y = segment.past[1, -1, :]
    dy = y - y[segment.reference_vehicle]
    cut = length / 3.0
    front = dy > cut
    rear = dy < -cut
    return {"middle": np.flatnonzero(~front & ~rear), "front": np.flatnonzero(front),
            "rear": np.flatnonzero(rear)}


def location_indices(segment: SceneSegment, location: str) -> np.ndarray:
    if location == "all":
        return np.arange(segment.num_vehicles)
    if location == "center":
        return np.array([segment.reference_vehicle])
    if location not in LOCATIONS:
        raise ValueError(f"unknown location filter {location!r}")
    return stratify_by_location(segment)[location]


def desk_model_config(**overrides) -> ModelConfig:
    """Model settings that train within minutes on the synthetic desk data.

    The mean is an offset from a constant-velocity extrapolation that grows
    with the horizon, and tanh replaces relu, whose dead units stall training
    at this data size.
    """
    return ModelConfig(**{"output_anchor": "cv", "horizon_scaling": True, "activation": "tanh", **overrides})


def desk_train_config(**overrides) -> TrainConfig:
    """Adam with a squared-error warm-up of the means before the NLL phase."""
    base = {"epochs": 40, "batch_size": 32, "optimizer": "adam", "lr0": 0.003, "decay_every": 30,
            "mean_warmup_epochs": 20}
    return TrainConfig(**{**base, **overrides})


@dataclass
class ExperimentSpec:
    """One table row: which model, which adjacency, which data condition, which vehicles."""

    variant: str = "full"
    adjacency_scheme: str = "reciprocal"
    robustness: str = "none"
    location: str = "all"
    # 0 scores the predicted means; k > 0 scores the best of k samples
    samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANT_NAMES:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.adjacency_scheme not in ("reciprocal", "distance", "ones"):
            raise ValueError(f"unknown adjacency scheme {self.adjacency_scheme!r}")
        if self.robustness not in ROBUSTNESS_CASES:
            raise ValueError(f"unknown robustness case {self.robustness!r}")
        if self.location not in LOCATIONS:
            raise ValueError(f"unknown location filter {self.location!r}")
        if self.samples < 0:
            raise ValueError("samples must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    def model_config(self, base: ModelConfig | None = None) -> ModelConfig:
        d = (base or ModelConfig()).to_dict()
        d["adjacency_scheme"] = self.adjacency_scheme
        cfg = ModelConfig.from_dict(d)
        return cfg if self.variant == "full" else ablation_config(cfg, self.variant[3:])


def robust_subset(segments: Sequence[SceneSegment]) -> list[SceneSegment]:
    """Scenes with a removable neighbour, the common ground of every robustness case."""
    return [s for s in segments if s.num_vehicles >= 2]


def prepare_condition(segments: Sequence[SceneSegment], case: str, seed: int
                      ) -> tuple[list[SceneSegment], list[np.ndarray]]:
    """Scenes as the model sees them under ``case`` plus, per scene, which
    original vehicle each column corresponds to."""
    if case == "none":
        return list(segments), [np.arange(s.num_vehicles) for s in segments]
    corrupted = corrupt_for_robustness(segments, case, seed)
    return [c.segment for c in corrupted], [np.asarray(c.kept_vehicles) for c in corrupted]


def evaluate(model: GSTCN, segments: Sequence[SceneSegment], spec: ExperimentSpec,
             vehicles: Sequence[np.ndarray] | None = None) -> HorizonRmse:
    """Pooled RMSE of ``model`` on ``segments`` under ``spec``.

    ``vehicles`` optionally restricts scoring to given original-vehicle
    indices per scene; robustness cases score the vehicles still present.
    """
    scenes, kept = prepare_condition(segments, spec.robustness, spec.seed)
    fields = model.predict(scenes)
    pool = SquaredErrorPool()
    for i, (seg, scene, keep, f) in enumerate(zip(segments, scenes, kept, fields)):
        wanted = location_indices(seg, spec.location)
        if vehicles is not None:
            wanted = np.intersect1d(wanted, vehicles[i])
        cols = [int(np.flatnonzero(keep == v)[0]) for v in wanted if v in keep]
        if not cols:
            continue
        if spec.samples:
            pool.add_squared(best_of_k_sq(f, scene.future, spec.samples, spec.seed * 100003 + i, cols), len(cols))
        else:
            pool.add(f.mean, scene.future, cols)
    return pool.result()


def evaluate_cv(segments: Sequence[SceneSegment], location: str = "all") -> HorizonRmse:
    """Constant-velocity Kalman baseline on the same scoring rules."""
    pool = SquaredErrorPool()
    for seg in segments:
        cols = location_indices(seg, location)
        if len(cols):
            pool.add(cv_predict_scene(seg.past, seg.future.shape[1]), seg.future, cols)
    return pool.result()


def robustness_deltas(model: GSTCN, segments: Sequence[SceneSegment], seed: int = 0) -> dict[str, dict]:
    """RMSE change of each imperfect-data case against perfect data on the same vehicles."""
    segments = robust_subset(segments)
    out = {}
    for case in ("partial", "total"):
        _, kept = prepare_condition(segments, case, seed)
        perfect = evaluate(model, segments, ExperimentSpec(seed=seed), vehicles=kept)
        degraded = evaluate(model, segments, ExperimentSpec(robustness=case, seed=seed))
        out[case] = {"perfect": perfect, "degraded": degraded,
                     "delta": tuple(d - p for d, p in zip(degraded.values, perfect.values))}
    return out


def config_hash(*parts: dict) -> str:
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()


def experiment_manifest(spec: ExperimentSpec, model_config: ModelConfig, train_config: TrainConfig | None,
                        result: HorizonRmse, extra: dict | None = None) -> dict:
    tc = train_config.to_dict() if train_config else None
    doc = {"spec": spec.to_dict(), "model_config": model_config.to_dict(), "train_config": tc,
           "seed": spec.seed, "config_hash": config_hash(spec.to_dict(), model_config.to_dict(), tc or {}),
           "rmse": dict(zip((f"{h}s" for h in result.horizons), result.values)), "average": result.average}
    if extra:
        doc.update(extra)
    return doc


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rmse: HorizonRmse
    model: GSTCN
    report: TrainReport | None = None


def run_experiment(spec: ExperimentSpec, split: DatasetSplit, model_config: ModelConfig | None = None,
                   train_config: TrainConfig | None = None, model: GSTCN | None = None) -> ExperimentResult:
    """Train the configured variant (unless ``model`` is given) and score it on the test split."""
    report = None
    if model is None:
        cfg = spec.model_config(model_config)
        tc = train_config or TrainConfig()
        tc = TrainConfig.from_dict({**tc.to_dict(), "seed": spec.seed})
        model = GSTCN(cfg, seed=spec.seed)
        best, report = fit(model, split, tc)
        load_params(model, best)
    test = robust_subset(split.test) if spec.robustness == "total" else list(split.test)
    return ExperimentResult(spec, evaluate(model, test, spec), model, report)


@dataclass
class LatencyReport:
    parameters: int
    vehicles: int
    repetitions: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    per_scene_ms: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_scene_ms")
        return d


def bench_inference(model: GSTCN, scenes: Sequence[SceneSegment], repetitions: int = 5,
                    warmup: int = 1) -> LatencyReport:
    """Wall time of one forward pass per scene, divided by the scene's vehicle count."""
    if not scenes:
        raise ValueError("bench_inference needs at least one scene")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    for s in scenes[:warmup]:
        model.forward(s)
    per_vehicle, per_scene = [], []
    for _ in range(repetitions):
        for s in scenes:
            t0 = time.perf_counter()
            model.forward(s)
            dt = (time.perf_counter() - t0) * 1e3
            per_scene.append(dt)
            per_vehicle.append(dt / s.num_vehicles)
    v = np.asarray(per_vehicle)
    return LatencyReport(model.num_parameters(), int(sum(s.num_vehicles for s in scenes)), repetitions,
                         float(v.mean()), float(np.median(v)), float(np.percentile(v, 95)), per_scene)

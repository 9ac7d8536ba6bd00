"""Trajectory ingestion, cleaning, resampling and scene windowing."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

FEET_TO_METERS = 0.3048
SOURCE_RATE_HZ = 10.0

NATIVE_COLUMNS = ("vehicle_id", "frame", "x", "y", "lane")
NGSIM_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "Lane_ID")


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryPoint:
    vehicle_id: int
    frame_index: int
    x: float
    y: float
    lane_id: int


@dataclass
class VehicleTrack:
    """Time-ordered positions of one vehicle, stored column-wise."""

    vehicle_id: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lanes: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.lanes = np.asarray(self.lanes, dtype=np.int64)
        n = len(self.frames)
        if not (len(self.x) == len(self.y) == len(self.lanes) == n):
            raise ValueError(f"vehicle {self.vehicle_id}: column lengths differ")
        if n > 1 and np.any(np.diff(self.frames) <= 0):
            raise ValueError(f"vehicle {self.vehicle_id}: frames must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_points(cls, points: Sequence[TrajectoryPoint]) -> "VehicleTrack":
        pts = sorted(points, key=lambda p: p.frame_index)
        return cls(
            vehicle_id=pts[0].vehicle_id if pts else -1,
            frames=[p.frame_index for p in pts],
            x=[p.x for p in pts],
            y=[p.y for p in pts],
            lanes=[p.lane_id for p in pts],
        )

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [TrajectoryPoint(self.vehicle_id, int(f), float(x), float(y), int(l))
                for f, x, y, l in zip(self.frames, self.x, self.y, self.lanes)]

    def subset(self, keep: np.ndarray) -> "VehicleTrack":
        return VehicleTrack(self.vehicle_id, self.frames[keep], self.x[keep], self.y[keep], self.lanes[keep])

    def is_gap_free(self) -> bool:
        return len(self) < 2 or bool(np.all(np.diff(self.frames) == 1))


@dataclass
class SceneConfig:
    past_len: int = 15
    future_len: int = 25
    rate_hz: float = 5.0
    longitudinal_range: float = 100.0
    lane_range: int = 2
    stride: int = 1
    relative_coords: bool = True

    @property
    def window(self) -> int:
        return self.past_len + self.future_len


@dataclass
class SceneSegment:
    past: np.ndarray            # (2, T, N)
    future: np.ndarray          # (2, F, N)
    vehicle_ids: list[int]
    lane_ids: list[int]
    reference_vehicle: int = 0
    origin: tuple[float, float] = (0.0, 0.0)
    start_frame: int = 0

    @property
    def num_vehicles(self) -> int:
        return self.past.shape[2]

    def validate(self, config: SceneConfig | None = None) -> None:
        """Raise ValueError if the structural invariants of a segment fail."""
        n = self.num_vehicles
        if self.past.ndim != 3 or self.past.shape[0] != 2:
            raise ValueError(f"past must be (2, T, N), got {self.past.shape}")
        if self.future.shape[0] != 2 or self.future.shape[2] != n:
            raise ValueError(f"future shape {self.future.shape} inconsistent with past {self.past.shape}")
        if len(self.vehicle_ids) != n or len(self.lane_ids) != n:
            raise ValueError("vehicle_ids / lane_ids length must equal N")
        if not 0 <= self.reference_vehicle < n:
            raise ValueError("reference_vehicle out of range")
        if not (np.all(np.isfinite(self.past)) and np.all(np.isfinite(self.future))):
            raise ValueError("non-finite coordinates")
        if config is not None:
            if self.past.shape[1] != config.past_len or self.future.shape[1] != config.future_len:
                raise ValueError("horizon lengths do not match config")
            ref = self.reference_vehicle
            dy = np.abs(self.past[1, -1, :] - self.past[1, -1, ref])
            dl = np.abs(np.asarray(self.lane_ids) - self.lane_ids[ref])
            if np.any(dy > config.longitudinal_range) or np.any(dl > config.lane_range):
                raise ValueError("vehicle outside the observation range of the reference vehicle")

    def to_json(self) -> str:
        return json.dumps({
            "past_shape": list(self.past.shape),
            "past": self.past.ravel().tolist(),
            "future_shape": list(self.future.shape),
            "future": self.future.ravel().tolist(),
            "vehicle_ids": [int(v) for v in self.vehicle_ids],
            "lane_ids": [int(v) for v in self.lane_ids],
            "reference_vehicle": int(self.reference_vehicle),
            "origin": [float(self.origin[0]), float(self.origin[1])],
            "start_frame": int(self.start_frame),
        })

    @classmethod
    def from_json(cls, line: str) -> "SceneSegment":
        d = json.loads(line)
        return cls(
            past=np.asarray(d["past"], dtype=np.float64).reshape(d["past_shape"]),
            future=np.asarray(d["future"], dtype=np.float64).reshape(d["future_shape"]),
            vehicle_ids=list(d["vehicle_ids"]),
            lane_ids=list(d["lane_ids"]),
            reference_vehicle=int(d["reference_vehicle"]),
            origin=tuple(d["origin"]),
            start_frame=int(d.get("start_frame", 0)),
        )

    def select(self, keep: Sequence[int]) -> "SceneSegment":
        """Sub-scene with only the vehicles at indices ``keep`` (reference must stay)."""
        keep = list(keep)
        if self.reference_vehicle not in keep:
            raise ValueError("the reference vehicle cannot be removed")
        return SceneSegment(
            past=self.past[:, :, keep].copy(),
            future=self.future[:, :, keep].copy(),
            vehicle_ids=[self.vehicle_ids[i] for i in keep],
            lane_ids=[self.lane_ids[i] for i in keep],
            reference_vehicle=keep.index(self.reference_vehicle),
            origin=self.origin,
            start_frame=self.start_frame,
        )


@dataclass
class DatasetSplit:
    train: list[SceneSegment] = field(default_factory=list)
    val: list[SceneSegment] = field(default_factory=list)
    test: list[SceneSegment] = field(default_factory=list)
    seed: int = 0


# parsing

def _decode(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return source.decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data


def parse_trajectory_file(source: bytes | str | IO, format: str = "native_csv") -> list[VehicleTrack]:
    """Parse a CSV trajectory file into one track per vehicle.

    ``format`` is ``native_csv`` (meters) or ``ngsim_csv`` (feet, converted).
    Columns beyond the required ones are ignored.
    """
    fmt = format.replace("-", "_")
    if fmt in ("native", "native_csv"):
        cols, scale = NATIVE_COLUMNS, 1.0
    elif fmt in ("ngsim", "ngsim_csv"):
        cols, scale = NGSIM_COLUMNS, FEET_TO_METERS
    else:
        raise ValueError(f"unknown trajectory format {format!r}")
    text = _decode(source)
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    missing = [c for c in cols if c not in header]
    if missing:
        raise ParseError(f"line 1: missing columns {', '.join(missing)}")
    idx = [header.index(c) for c in cols]
    names = ("vehicle_id", "frame", "x", "y", "lane")
    by_vehicle: dict[int, list[TrajectoryPoint]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(idx):
            raise ParseError(f"line {lineno}: expected at least {max(idx) + 1} fields, got {len(row)}")
        values = []
        for name, i in zip(names, idx):
            raw = row[i].strip()
            try:
                if name in ("x", "y"):
                    v = float(raw)
                    if not np.isfinite(v):
                        raise ValueError
                else:
                    v = int(float(raw))
                    if float(raw) != v:
                        raise ValueError
            except ValueError:
                raise ParseError(f"line {lineno}: invalid {name}") from None
            values.append(v)
        vid, frame, x, y, lane = values
        if frame < 0:
            raise ParseError(f"line {lineno}: invalid frame")
        if lane < 1:
            raise ParseError(f"line {lineno}: invalid lane")
        by_vehicle.setdefault(vid, []).append(TrajectoryPoint(vid, frame, x * scale, y * scale, lane))
    tracks = []
    for vid in sorted(by_vehicle):
        pts = sorted(by_vehicle[vid], key=lambda p: p.frame_index)
        frames = [p.frame_index for p in pts]
        if len(set(frames)) != len(frames):
            raise ParseError(f"vehicle {vid}: duplicate frame index")
        tracks.append(VehicleTrack.from_points(pts))
    return tracks


def write_native_csv(tracks: Iterable[VehicleTrack], out: IO[str]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(NATIVE_COLUMNS)
    rows = []
    for t in tracks:
        for f, x, y, l in zip(t.frames, t.x, t.y, t.lanes):
            rows.append((int(f), int(t.vehicle_id), float(x), float(y), int(l)))
    rows.sort()
    for f, vid, x, y, l in rows:
        w.writerow((vid, f, f"{x:.4f}", f"{y:.4f}", l))


# cleaning

def remove_anomalies(track: VehicleTrack, max_speed: float = 60.0, max_accel: float = 15.0,
                     rate_hz: float = SOURCE_RATE_HZ) -> VehicleTrack:
    """Drop points implying an implausible speed or acceleration.

    Each point is compared with the last point that survived; a point is
    rejected when the speed from that survivor exceeds ``max_speed`` or the
    change of velocity relative to the previous accepted step exceeds
    ``max_accel``.  Rejected frames become gaps.
    """
    n = len(track)
    if n < 2:
        return track
    dt = 1.0 / rate_hz
    keep = np.zeros(n, dtype=bool)
    keep[0] = True
    last = 0
    last_v: np.ndarray | None = None
    for i in range(1, n):
        span = (track.frames[i] - track.frames[last]) * dt
        v = np.array([track.x[i] - track.x[last], track.y[i] - track.y[last]]) / span
        if np.hypot(v[0], v[1]) > max_speed:
            continue
        if last_v is not None:
            acc = np.hypot(*(v - last_v)) / span
            if acc > max_accel:
                continue
        keep[i] = True
        last, last_v = i, v
    return track.subset(keep)


def hermite_tangents(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Finite-difference tangents: centered over the neighbouring samples, one-sided at the ends."""
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m = np.empty_like(v)
    if len(t) == 1:
        m[:] = 0.0
        return m
    m[1:-1] = (v[2:] - v[:-2]) / (t[2:] - t[:-2])
    m[0] = (v[1] - v[0]) / (t[1] - t[0])
    m[-1] = (v[-1] - v[-2]) / (t[-1] - t[-2])
    return m


def hermite_fill(t_known: np.ndarray, v_known: np.ndarray, t_query: np.ndarray) -> np.ndarray:
    spline = CubicHermiteSpline(t_known, v_known, hermite_tangents(t_known, v_known))
    return spline(np.asarray(t_query, dtype=np.float64))


def interpolate_missing(track: VehicleTrack, first_frame: int | None = None,
                        last_frame: int | None = None) -> VehicleTrack:
    """Fill every missing interior frame by cubic Hermite interpolation.

    ``first_frame``/``last_frame`` extend the expected frame range; a gap
    touching either end cannot be filled.
    """
    if len(track) < 2:
        raise ValueError("interpolation needs at least 2 points")
    lo = track.frames[0] if first_frame is None else first_frame
    hi = track.frames[-1] if last_frame is None else last_frame
    if track.frames[0] > lo or track.frames[-1] < hi:
        raise ValueError("cannot extrapolate")
    if track.is_gap_free() and track.frames[0] == lo and track.frames[-1] == hi:
        return track
    frames = np.arange(lo, hi + 1)
    present = np.isin(frames, track.frames)
    missing = frames[~present]
    t = track.frames.astype(np.float64)
    x = np.empty(len(frames))
    y = np.empty(len(frames))
    lanes = np.empty(len(frames), dtype=np.int64)
    x[present], y[present] = track.x, track.y
    x[~present] = hermite_fill(t, track.x, missing)
    y[~present] = hermite_fill(t, track.y, missing)
    lanes[present] = track.lanes
    # a filled frame takes the lane of the closest earlier observation
    pos = np.searchsorted(track.frames, missing) - 1
    lanes[~present] = track.lanes[pos]
    return VehicleTrack(track.vehicle_id, frames, x, y, lanes)


def align_to_grid(track: VehicleTrack, factor: int) -> VehicleTrack:
    """Drop leading points so the track starts on a frame divisible by ``factor``."""
    keep = track.frames >= -(-track.frames[0] // factor) * factor if len(track) else np.zeros(0, bool)
    return track.subset(keep)


def downsample(track: VehicleTrack, factor: int) -> VehicleTrack:
    """Keep every ``factor``-th point starting at the first; frames become frame // factor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if not track.is_gap_free():
        raise ValueError("downsample needs a gap-free track")
    if factor == 1:
        return track
    sel = slice(0, None, factor)
    return VehicleTrack(track.vehicle_id, track.frames[sel] // factor, track.x[sel], track.y[sel], track.lanes[sel])


def split_into_runs(track: VehicleTrack, max_gap: int) -> list[VehicleTrack]:
    """Break a track where consecutive frames are more than ``max_gap`` apart."""
    if len(track) == 0:
        return []
    breaks = np.nonzero(np.diff(track.frames) > max_gap)[0] + 1
    bounds = [0, *breaks.tolist(), len(track)]
    return [track.subset(np.arange(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def clean_tracks(tracks: Iterable[VehicleTrack], factor: int = 2, max_speed: float = 60.0,
                 max_accel: float = 15.0, max_fill_gap: int = 10) -> list[VehicleTrack]:
    """Anomaly removal, gap filling, grid alignment and downsampling for raw tracks.

    Gaps longer than ``max_fill_gap`` source frames are not bridged; the
    track is split there and each piece is processed on its own.
    """
    out = []
    for track in tracks:
        cleaned = remove_anomalies(track, max_speed, max_accel)
        for run in split_into_runs(cleaned, max_fill_gap + 1):
            if len(run) < 2:
                continue
            run = align_to_grid(interpolate_missing(run), factor)
            if len(run) == 0:
                continue
            out.append(downsample(run, factor))
    return out


# scenes

@dataclass
class _TrackIndex:
    track: VehicleTrack
    start: int
    end: int  # inclusive

    def covers(self, a: int, b: int) -> bool:
        return self.start <= a and b <= self.end

    def rows(self, a: int, b: int) -> slice:
        return slice(a - self.start, b - self.start + 1)


def segment_scenes(tracks: Sequence[VehicleTrack], config: SceneConfig | None = None) -> list[SceneSegment]:
    """Cut gap-free tracks at the target rate into windowed scene segments.

    Every window of ``past_len + future_len`` frames (moved by ``stride``)
    yields one segment per vehicle covering the whole window; that vehicle
    is the reference and its neighbours are the other full-coverage vehicles
    within the longitudinal and lane range at the last past frame.
    """
    cfg = config or SceneConfig()
    index = []
    for tr in tracks:
        if len(tr) == 0:
            continue
        if not tr.is_gap_free():
            raise ValueError(f"vehicle {tr.vehicle_id}: segment_scenes needs gap-free tracks")
        index.append(_TrackIndex(tr, int(tr.frames[0]), int(tr.frames[-1])))
    if not index:
        return []
    index.sort(key=lambda e: (e.start, e.track.vehicle_id))
    first = min(e.start for e in index)
    last = max(e.end for e in index)
    W, T = cfg.window, cfg.past_len
    segments = []
    for s in range(first, last - W + 2, cfg.stride):
        e = s + W - 1
        present = sorted((ix for ix in index if ix.covers(s, e)), key=lambda ix: ix.track.vehicle_id)
        if not present:
            continue
        lp = s + T - 1
        ys = np.array([ix.track.y[lp - ix.start] for ix in present])
        ls = np.array([ix.track.lanes[lp - ix.start] for ix in present])
        for r, ref in enumerate(present):
            near = (np.abs(ys - ys[r]) <= cfg.longitudinal_range) & (np.abs(ls - ls[r]) <= cfg.lane_range)
            members = [r] + [j for j in np.nonzero(near)[0] if j != r]
            xy = np.stack([
                np.stack([present[j].track.x[present[j].rows(s, e)] for j in members], axis=-1),
                np.stack([present[j].track.y[present[j].rows(s, e)] for j in members], axis=-1),
            ])
            ref_rows = ref.rows(lp, lp)
            origin = (float(ref.track.x[ref_rows][0]), float(ref.track.y[ref_rows][0]))
            if cfg.relative_coords:
                xy = xy - np.array(origin)[:, None, None]
            segments.append(SceneSegment(
                past=xy[:, :T, :].copy(),
                future=xy[:, T:, :].copy(),
                vehicle_ids=[int(present[j].track.vehicle_id) for j in members],
                lane_ids=[int(ls[j]) for j in members],
                reference_vehicle=0,
                origin=origin if cfg.relative_coords else (0.0, 0.0),
                start_frame=s,
            ))
    return segments


def split_dataset(segments: Sequence, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
                  seed: int = 0) -> DatasetSplit:
    """Shuffle with ``seed`` and partition by largest-remainder rounding of ``ratios``."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r <= 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    n = len(segments)
    ideal = r * n
    sizes = np.floor(ideal).astype(int)
    for i in np.argsort(-(ideal - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    pick = lambda ix: [segments[i] for i in ix]  # noqa: E731
    return DatasetSplit(pick(order[:a]), pick(order[a:b]), pick(order[b:]), seed)


# robustness

def _delete_and_restore(xy: np.ndarray, rng: np.random.Generator, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Delete ``fraction`` of the interior past frames of one (2, T) sequence and refill them."""
    T = xy.shape[1]
    n_del = int(round(fraction * T))
    deleted = np.sort(rng.choice(np.arange(1, T - 1), size=n_del, replace=False))
    keep = np.setdiff1d(np.arange(T), deleted)
    out = xy.copy()
    t = keep.astype(np.float64)
    out[0, deleted] = hermite_fill(t, xy[0, keep], deleted)
    out[1, deleted] = hermite_fill(t, xy[1, keep], deleted)
    return out, deleted


@dataclass
class CorruptedScene:
    segment: SceneSegment
    original_index: int
    deleted_frames: dict[int, np.ndarray] = field(default_factory=dict)  # vehicle index -> frames
    kept_vehicles: list[int] = field(default_factory=list)                # indices into the original


def corrupt_for_robustness(segments: Sequence[SceneSegment], case: str, seed: int,
                           fraction: float = 0.2) -> list[CorruptedScene]:
    """Imperfect-observation variants of a scene set.

    ``partial``: half of all (scene, vehicle) past sequences, chosen at
    random, lose ``fraction`` of their interior points, which are then
    restored by cubic Hermite interpolation.
    ``total``: one random non-reference vehicle per scene is dropped.
    """
    if not segments:
        raise ValueError("no segments to corrupt")
    rng = np.random.default_rng(seed)
    out = []
    if case == "partial":
        seqs = [(i, n) for i, s in enumerate(segments) for n in range(s.num_vehicles)]
        chosen = rng.choice(len(seqs), size=len(seqs) // 2, replace=False)
        chosen_set = sorted(seqs[k] for k in chosen)
        by_scene: dict[int, list[int]] = {}
        for i, n in chosen_set:
            by_scene.setdefault(i, []).append(n)
        for i, seg in enumerate(segments):
            past = seg.past.copy()
            deleted = {}
            for n in by_scene.get(i, []):
                past[:, :, n], deleted[n] = _delete_and_restore(seg.past[:, :, n], rng, fraction)
            new = SceneSegment(past, seg.future.copy(), list(seg.vehicle_ids), list(seg.lane_ids),
                               seg.reference_vehicle, seg.origin, seg.start_frame)
            out.append(CorruptedScene(new, i, deleted, list(range(seg.num_vehicles))))
    elif case == "total":
        for i, seg in enumerate(segments):
            candidates = [n for n in range(seg.num_vehicles) if n != seg.reference_vehicle]
            if not candidates:
                raise ValueError("no removable vehicle")
            drop = int(rng.choice(candidates))
            keep = [n for n in range(seg.num_vehicles) if n != drop]
            out.append(CorruptedScene(seg.select(keep), i, {}, keep))
    else:
        raise ValueError(f"unknown robustness case {case!r}")
    return out


# serialization

def write_segments(segments: Iterable[SceneSegment], out: IO[str]) -> None:
    for s in segments:
        out.write(s.to_json())
        out.write("\n")


def read_segments(lines: Iterable[str]) -> Iterator[SceneSegment]:
    for line in lines:
        if line.strip():
            yield SceneSegment.from_json(line)

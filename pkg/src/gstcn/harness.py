"""Synthetic multi-lane traffic and the constant-velocity Kalman baseline."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import SceneConfig, SceneSegment, VehicleTrack, clean_tracks, segment_scenes

REGIMES = {
    # desired speed range (m/s), mean initial spacing (m)
    "mild": ((24.0, 32.0), 60.0),
    "moderate": ((14.0, 24.0), 35.0),
    "heavy": ((5.0, 12.0), 16.0),
}


@dataclass
class ScenarioConfig:
    lanes: int = 3
    lane_width: float = 3.7
    vehicles: int = 30
    duration: float = 60.0
    regime: str = "moderate"
    # probabilities of keep / lane-change / brake, re-drawn every decision period
    maneuver_mix: tuple[float, float, float] = (0.6, 0.25, 0.15)
    decision_period: float = 5.0
    noise_std: float = 0.02
    seed: int = 0
    rate_hz: float = 10.0
    min_gap: float = 7.0
    time_headway: float = 1.2
    speed_gain: float = 0.8
    max_speed: float = 38.0
    max_accel: float = 2.5
    max_decel: float = 7.0
    lane_change_duration: tuple[float, float] = (3.0, 5.0)
    road_length: float | None = None

    def __post_init__(self):
        if self.lanes < 1 or self.vehicles < 1 or self.duration <= 0:
            raise ValueError("lanes, vehicles and duration must be positive")
        mix = np.asarray(self.maneuver_mix, dtype=float)
        if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
            raise ValueError("maneuver_mix must be three non-negative probabilities summing to 1")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        self.maneuver_mix = tuple(float(m) for m in mix)
        self.lane_change_duration = tuple(self.lane_change_duration)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)


@dataclass
class _Vehicle:
    vid: int
    lane: int
    y: float
    v: float
    v_des: float
    x: float
    brake_until: float = -1.0
    brake_factor: float = 1.0
    # active lane change: (t0, duration, x0, x1, target lane)
    change: tuple | None = None
    next_decision: float = 0.0
    lateral_speed: float = 0.0
    pending_change: bool = False


def _lane_center(lane: int, width: float) -> float:
    return (lane - 0.5) * width


def _quintic(s: float) -> tuple[float, float]:
    """Smooth 0->1 blend and its derivative w.r.t. s."""
    s = min(max(s, 0.0), 1.0)
    return 10 * s**3 - 15 * s**4 + 6 * s**5, 30 * s**2 - 60 * s**3 + 30 * s**4


def _occupies(veh: _Vehicle, lane: int) -> bool:
    return veh.lane == lane or (veh.change is not None and veh.change[4] == lane)


def generate_scenario(config: ScenarioConfig) -> list[VehicleTrack]:
    """Simulate a straight multi-lane road and return noisy 10 Hz tracks.

    Longitudinal motion follows a proportional speed controller towards
    min(desired speed, headway-limited speed) with a hard minimum gap to the
    leader.  Lane changes follow quintic lateral profiles; brake events
    temporarily lower the desired speed.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    (v_lo, v_hi), spacing = REGIMES[cfg.regime]
    v_lo, v_hi = min(v_lo, cfg.max_speed), min(v_hi, cfg.max_speed)
    per_lane = -(-cfg.vehicles // cfg.lanes)
    road = cfg.road_length if cfg.road_length is not None else per_lane * spacing
    if per_lane > 1 and road / per_lane < cfg.min_gap:
        raise ValueError("infeasible density: vehicles would overlap at initialization")

    vehicles: list[_Vehicle] = []
    lanes = np.arange(cfg.vehicles) % cfg.lanes + 1
    for lane in range(1, cfg.lanes + 1):
        count = int(np.sum(lanes == lane))
        if count == 0:
            continue
        # jittered positions that keep the minimum gap
        slots = road / count
        jitter = max(0.0, slots - cfg.min_gap) / 2.0
        ys = -np.arange(count) * slots + rng.uniform(-jitter, jitter, size=count) * (count > 1)
        for y in ys:
            v_des = float(rng.uniform(v_lo, v_hi))
            vehicles.append(_Vehicle(vid=len(vehicles) + 1, lane=lane, y=float(y), v=v_des, v_des=v_des,
                                     x=_lane_center(lane, cfg.lane_width),
                                     next_decision=float(rng.uniform(0, cfg.decision_period))))
    dt = 1.0 / cfg.rate_hz
    steps = int(round(cfg.duration * cfg.rate_hz)) + 1
    xs = np.zeros((steps, len(vehicles)))
    ys = np.zeros((steps, len(vehicles)))
    ls = np.zeros((steps, len(vehicles)), dtype=np.int64)

    def record(k):
        for i, veh in enumerate(vehicles):
            xs[k, i], ys[k, i], ls[k, i] = veh.x, veh.y, veh.lane

    def leader_of(veh, lane):
        best = None
        for other in vehicles:
            if other is veh or other.y <= veh.y or not _occupies(other, lane):
                continue
            if best is None or other.y < best.y:
                best = other
        return best

    def follower_of(veh, lane):
        best = None
        for other in vehicles:
            if other is veh or other.y > veh.y or not _occupies(other, lane):
                continue
            if best is None or other.y > best.y:
                best = other
        return best

    record(0)
    for k in range(1, steps):
        t = k * dt
        # maneuver decisions
        for veh in vehicles:
            if t < veh.next_decision:
                continue
            veh.next_decision = t + cfg.decision_period
            choice = rng.choice(3, p=cfg.maneuver_mix)
            if choice == 1 and veh.change is None:
                veh.pending_change = True
            elif choice == 2 and veh.brake_until < t:
                veh.brake_until = t + float(rng.uniform(2.0, 4.0))
                veh.brake_factor = float(rng.uniform(0.4, 0.7))
        # lane change starts: prefer the side with the faster leader
        for veh in vehicles:
            if not veh.pending_change or veh.change is not None:
                continue
            options = [l for l in (veh.lane - 1, veh.lane + 1) if 1 <= l <= cfg.lanes]
            rng.shuffle(options)
            for target in options:
                lead, foll = leader_of(veh, target), follower_of(veh, target)
                if lead is not None and lead.y - veh.y < 2.0 * cfg.min_gap + veh.v * 0.5:
                    continue
                if foll is not None and veh.y - foll.y < 2.0 * cfg.min_gap + foll.v * 0.5:
                    continue
                dur = float(rng.uniform(*cfg.lane_change_duration))
                veh.change = (t, dur, veh.x, _lane_center(target, cfg.lane_width), target)
                veh.pending_change = False
                break
        # longitudinal update, front to back so leaders move first
        for veh in sorted(vehicles, key=lambda v: -v.y):
            v_des = veh.v_des * (veh.brake_factor if t < veh.brake_until else 1.0)
            leads = [leader_of(veh, veh.lane)]
            if veh.change is not None:
                leads.append(leader_of(veh, veh.change[4]))
            leads = [l for l in leads if l is not None]
            target = v_des
            for lead in leads:
                gap = lead.y - veh.y
                target = min(target, max(0.0, (gap - cfg.min_gap) / cfg.time_headway))
            acc = np.clip(cfg.speed_gain * (target - veh.v), -cfg.max_decel, cfg.max_accel)
            v_cap = np.sqrt(max(cfg.max_speed**2 - veh.lateral_speed**2, 0.0))
            veh.v = float(np.clip(veh.v + acc * dt, 0.0, v_cap))
            y_new = veh.y + veh.v * dt
            for lead in leads:
                if y_new > lead.y - cfg.min_gap:
                    y_new = max(veh.y, lead.y - cfg.min_gap)
                    veh.v = min(veh.v, (y_new - veh.y) / dt)
            veh.y = y_new
        # lateral update
        for veh in vehicles:
            if veh.change is None:
                veh.lateral_speed = 0.0
                continue
            t0, dur, x0, x1, target = veh.change
            s = (t - t0) / dur
            blend, dblend = _quintic(s)
            veh.x = x0 + (x1 - x0) * blend
            veh.lateral_speed = abs(x1 - x0) * dblend / dur if s < 1 else 0.0
            if s >= 0.5:
                veh.lane = target
            if s >= 1.0:
                veh.x, veh.change = x1, None
        record(k)

    frames = np.arange(steps)
    tracks = []
    for i, veh in enumerate(vehicles):
        nx = rng.normal(0.0, cfg.noise_std, size=steps) if cfg.noise_std > 0 else 0.0
        ny = rng.normal(0.0, cfg.noise_std, size=steps) if cfg.noise_std > 0 else 0.0
        tracks.append(VehicleTrack(veh.vid, frames.copy(), xs[:, i] + nx, ys[:, i] + ny, ls[:, i].copy()))
    return tracks


@dataclass
class CvKalmanState:
    state: np.ndarray                       # (x, y, vx, vy)
    covariance: np.ndarray                  # 4x4
    accel_std: float = 1.0
    meas_std: float = 0.1
    dt: float = 0.2
    transition: np.ndarray = field(init=False, repr=False)
    process_cov: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dt = self.dt
        self.transition = np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
        g = np.array([[dt * dt / 2, 0], [0, dt * dt / 2], [dt, 0], [0, dt]])
        self.process_cov = g @ g.T * self.accel_std**2

    def predict(self) -> None:
        f = self.transition
        self.state = f @ self.state
        self.covariance = f @ self.covariance @ f.T + self.process_cov

    def update(self, z: np.ndarray) -> None:
        h = np.eye(2, 4)
        s = h @ self.covariance @ h.T + np.eye(2) * self.meas_std**2
        gain = self.covariance @ h.T @ np.linalg.inv(s)
        self.state = self.state + gain @ (np.asarray(z, dtype=float) - h @ self.state)
        joseph = np.eye(4) - gain @ h
        self.covariance = joseph @ self.covariance @ joseph.T + gain @ gain.T * self.meas_std**2
        self.covariance = 0.5 * (self.covariance + self.covariance.T)


def cv_filter(past: np.ndarray, dt: float = 0.2, accel_std: float = 1.0, meas_std: float = 0.1) -> CvKalmanState:
    """Run the constant-velocity filter over a (2, T) position history.

    The state is initialised from the first two points (two-point
    initialisation), then every later point is assimilated.
    """
    past = np.asarray(past, dtype=float)
    T = past.shape[1]
    if T == 1:
        state = np.array([past[0, 0], past[1, 0], 0.0, 0.0])
        cov = np.diag([meas_std**2, meas_std**2, 1e4, 1e4])
        return CvKalmanState(state, cov, accel_std, meas_std, dt)
    v0 = (past[:, 1] - past[:, 0]) / dt
    state = np.array([past[0, 1], past[1, 1], v0[0], v0[1]])
    r2 = meas_std**2
    cov = np.array([
        [r2, 0, r2 / dt, 0],
        [0, r2, 0, r2 / dt],
        [r2 / dt, 0, 2 * r2 / dt**2, 0],
        [0, r2 / dt, 0, 2 * r2 / dt**2],
    ])
    kf = CvKalmanState(state, cov, accel_std, meas_std, dt)
    for k in range(2, T):
        kf.predict()
        kf.update(past[:, k])
    return kf


def cv_predict(past: np.ndarray, future_len: int, dt: float = 0.2, accel_std: float = 1.0,
               meas_std: float = 0.1) -> np.ndarray:
    """Deterministic (2, F) constant-velocity forecast from a (2, T) history."""
    kf = cv_filter(past, dt, accel_std, meas_std)
    pos, vel = kf.state[:2], kf.state[2:]
    steps = np.arange(1, future_len + 1) * dt
    return pos[:, None] + vel[:, None] * steps[None, :]


def cv_predict_scene(past: np.ndarray, future_len: int, **kwargs) -> np.ndarray:
    """Apply ``cv_predict`` to every vehicle of a (2, T, N) scene."""
    return np.stack([cv_predict(past[:, :, n], future_len, **kwargs) for n in range(past.shape[2])], axis=-1)


def synthetic_dataset(n_segments: int = 500, seed: int = 0, stride: int = 10,
                      maneuver_mix: tuple[float, float, float] = (0.4, 0.45, 0.15),
                      regime: str = "moderate", vehicles: int = 24, duration: float = 40.0,
                      scene: SceneConfig | None = None) -> list[SceneSegment]:
    """Lane-change-heavy scene set drawn from independently seeded scenarios.

    Scenarios are generated until enough windows exist, then ``n_segments``
    of them are drawn without replacement and returned in generation order.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be positive")
    scene = scene or SceneConfig(stride=stride)
    segments: list[SceneSegment] = []
    k = 0
    while len(segments) < n_segments:
        cfg = ScenarioConfig(vehicles=vehicles, duration=duration, regime=regime,
                             maneuver_mix=maneuver_mix, seed=seed * 1000 + k)
        segments.extend(segment_scenes(clean_tracks(generate_scenario(cfg)), scene))
        k += 1
        if k > 10 * n_segments:
            raise RuntimeError("scenarios yield no scene windows")
    idx = np.random.default_rng(seed).choice(len(segments), n_segments, replace=False)
    return [segments[i] for i in np.sort(idx)]


def dense_scene(n_vehicles: int, seed: int = 0, lanes: int = 6, lane_width: float = 3.7,
                past_len: int = 15, future_len: int = 25, dt: float = 0.2) -> SceneSegment:
    """A constant-velocity scene of ``n_vehicles`` packed into ±100 m, for timing runs."""
    if n_vehicles < 1:
        raise ValueError("n_vehicles must be positive")
    rng = np.random.default_rng(seed)
    lane = np.arange(n_vehicles) % lanes
    y0 = np.linspace(-100.0, 100.0, n_vehicles) + rng.uniform(-0.5, 0.5, n_vehicles)
    y0 -= y0[n_vehicles // 2]
    speed = rng.uniform(10.0, 30.0, n_vehicles)
    t = np.arange(-past_len + 1, future_len + 1) * dt
    x = np.broadcast_to(_lane_center(1, lane_width) + lane * lane_width, (t.size, n_vehicles))
    y = y0[None, :] + speed[None, :] * t[:, None]
    xy = np.stack([x - x[past_len - 1, n_vehicles // 2], y])
    order = [n_vehicles // 2] + [i for i in range(n_vehicles) if i != n_vehicles // 2]
    xy = xy[:, :, order]
    return SceneSegment(xy[:, :past_len].copy(), xy[:, past_len:].copy(), list(range(n_vehicles)),
                        [int(lane[i]) + 1 for i in order])

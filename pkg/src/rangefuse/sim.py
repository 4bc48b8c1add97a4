"""Deterministic 2D world simulator: ground truth, LiDAR scans, UWB ranges.

Every sensor draw is a pure function of (scenario, seed, step index), so
whole runs replay bit-identically. Walls are line segments; line-of-sight
between UWB nodes is decided by exact segment crossing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .ekf import RangeMeasurement, RangeSet
from .geometry import Pose2, StateVector, Vec2
from .mapping import Scan


@dataclass(slots=True)
class World:
    """Wall segments plus the world-aligned bounding box they live in."""

    segments: list[tuple[tuple[float, float], tuple[float, float]]]
    extent: tuple[float, float, float, float]
    _array: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        arr = np.asarray(
            [[a[0], a[1], b[0], b[1]] for a, b in self.segments], dtype=float
        ).reshape(-1, 4)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("wall segments must be finite")
        lengths = np.hypot(arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1])
        if arr.size and np.any(lengths <= 0):
            raise ValueError("wall segments must have nonzero length")
        self._array = arr

    @property
    def segment_array(self) -> np.ndarray:
        """(M, 4) array of (x1, y1, x2, y2)."""
        return self._array


@dataclass(slots=True, frozen=True)
class SensorSpec:
    """Sensor configuration for one scenario.

    ``uwb_max_range`` bounds the radio link: pairs farther apart produce no
    measurement at all. NLOS pairs get a positive exponential range bias and
    a power gap above the detection threshold so the gate can reject them.
    """

    lidar_fov: float = math.radians(270.0)
    lidar_beams: int = 1081
    lidar_max_range: float = 30.0
    lidar_noise_std: float = 0.01
    uwb_sigma_n: float = 0.1
    nlos_bias_mean: float = 0.5
    nlos_power_gap_db: float = 10.0
    rng_seed: int = 0
    uwb_max_range: float = math.inf

    def __post_init__(self):
        if self.lidar_beams < 1:
            raise ValueError("need at least one beam")
        if self.lidar_noise_std < 0 or self.uwb_sigma_n < 0:
            raise ValueError("noise stds must be non-negative")


@dataclass(slots=True)
class TrajectoryScript:
    """Timed waypoints the robot follows with piecewise-linear motion."""

    waypoints: list[tuple[float, tuple[float, float]]]
    speed_profile: float = 0.8

    def __post_init__(self):
        times = [t for t, _ in self.waypoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("waypoint times must be strictly increasing")

    @property
    def end_time(self) -> float:
        return self.waypoints[-1][0]

    def sample(self, time: float) -> tuple[np.ndarray, np.ndarray]:
        """(position, velocity) at a time; clamps to the endpoints."""
        pts = self.waypoints
        if time < pts[0][0]:
            return np.asarray(pts[0][1], dtype=float), np.zeros(2)
        if time >= pts[-1][0]:
            return np.asarray(pts[-1][1], dtype=float), np.zeros(2)
        for k in range(len(pts) - 1):
            t0, p0 = pts[k]
            t1, p1 = pts[k + 1]
            if t0 <= time < t1:
                p0 = np.asarray(p0, dtype=float)
                p1 = np.asarray(p1, dtype=float)
                alpha = (time - t0) / (t1 - t0)
                vel = (p1 - p0) / (t1 - t0)
                return p0 + alpha * (p1 - p0), vel
        return np.asarray(pts[-1][1], dtype=float), np.zeros(2)

    def _segment_velocity(self, k: int) -> np.ndarray:
        t0, p0 = self.waypoints[k]
        t1, p1 = self.waypoints[k + 1]
        return (np.asarray(p1, float) - np.asarray(p0, float)) / (t1 - t0)

    def heading(self, time: float) -> float:
        """Direction of travel; holds the last segment direction when stopped."""
        pts = self.waypoints
        for k in range(len(pts) - 1):
            if pts[k][0] <= time < pts[k + 1][0]:
                v = self._segment_velocity(k)
                return math.atan2(v[1], v[0])
        v = self._segment_velocity(len(pts) - 2)
        return math.atan2(v[1], v[0])


@dataclass(slots=True)
class BeaconEvent:
    time: float
    beacon_id: int
    action: str  # place | power_on | power_off | move_along
    position: tuple[float, float] | None = None
    trajectory: TrajectoryScript | None = None

    def __post_init__(self):
        if self.action not in ("place", "power_on", "power_off", "move_along"):
            raise ValueError(f"unknown beacon action {self.action!r}")


@dataclass(slots=True)
class BeaconScript:
    """Initial placements plus a timeline of lifecycle events."""

    initial: dict[int, tuple[float, float]] = field(default_factory=dict)
    events: list[BeaconEvent] = field(default_factory=list)

    def __post_init__(self):
        per_beacon: dict[int, float] = {}
        for ev in self.events:
            last = per_beacon.get(ev.beacon_id)
            if last is not None and ev.time < last:
                raise ValueError(f"events for beacon {ev.beacon_id} out of order")
            per_beacon[ev.beacon_id] = ev.time

    def state_at(self, time: float) -> dict[int, tuple[np.ndarray, np.ndarray, bool]]:
        """id -> (position, velocity, powered) after replaying events."""
        out: dict[int, list] = {
            b: [np.asarray(p, float), np.zeros(2), True, None]
            for b, p in self.initial.items()
        }
        for ev in self.events:
            if ev.time > time:
                break
            entry = out.setdefault(
                ev.beacon_id, [np.zeros(2), np.zeros(2), False, None]
            )
            if ev.action == "place":
                entry[0] = np.asarray(ev.position, float)
                entry[3] = None
            elif ev.action == "power_on":
                entry[2] = True
            elif ev.action == "power_off":
                entry[2] = False
            elif ev.action == "move_along":
                entry[3] = ev.trajectory
        result = {}
        for b, (pos, vel, powered, moving) in out.items():
            if moving is not None:
                pos, vel = moving.sample(time)
            result[b] = (pos, vel, powered)
        return result


@dataclass(slots=True, frozen=True)
class FilterParams:
    """Per-scenario EKF tuning: process-noise scale and assumed range noise."""

    sigma_w: float = 0.1
    sigma_n: float = 0.1


@dataclass(slots=True)
class Scenario:
    """Complete description of one reproducible run."""

    name: str
    world: World
    trajectory: TrajectoryScript
    beacons: BeaconScript
    sensors: SensorSpec
    seed: int
    horizon: int
    delta: float = 0.1
    filter: FilterParams = field(default_factory=FilterParams)


def _ray_segment_ranges(
    origin: np.ndarray, directions: np.ndarray, segments: np.ndarray
) -> np.ndarray:
    """Distance to the nearest segment per ray; inf when nothing is hit."""
    if segments.shape[0] == 0:
        return np.full(directions.shape[0], np.inf)
    a = segments[:, :2]
    s = segments[:, 2:] - a
    qp = a - origin  # (m, 2)
    denom = directions[:, 0:1] * s[None, :, 1] - directions[:, 1:2] * s[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[None, :, 0] * s[None, :, 1] - qp[None, :, 1] * s[None, :, 0]) / denom
        u = (qp[None, :, 0] * directions[:, 1:2] - qp[None, :, 1] * directions[:, 0:1]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(ok, t, np.inf)
    return t.min(axis=1)


def segment_blocked(world: World, p: np.ndarray, q: np.ndarray) -> bool:
    """True when the open segment p-q properly crosses any wall."""
    d = q - p
    length = math.hypot(d[0], d[1])
    if length < 1e-12:
        return False
    direction = d / length
    nearest = _ray_segment_ranges(p, direction[None, :], world.segment_array)[0]
    return nearest < length - 1e-9


def raycast(
    world: World,
    pose: Pose2,
    spec: SensorSpec,
    rng: np.random.Generator | None = None,
) -> Scan:
    """Simulated LiDAR sweep at a pose; beams that hit nothing are invalid."""
    bearings = np.linspace(-spec.lidar_fov / 2.0, spec.lidar_fov / 2.0, spec.lidar_beams)
    angles = bearings + pose.theta
    directions = np.column_stack([np.cos(angles), np.sin(angles)])
    origin = np.array([pose.x, pose.y])
    dist = _ray_segment_ranges(origin, directions, world.segment_array)
    valid = dist <= spec.lidar_max_range
    ranges = np.where(valid, dist, spec.lidar_max_range)
    if rng is not None and spec.lidar_noise_std > 0:
        noise = rng.normal(0.0, spec.lidar_noise_std, size=ranges.shape)
        ranges = np.where(valid, np.clip(ranges + noise, 1e-6, spec.lidar_max_range), ranges)
    return Scan(bearings=bearings, ranges=ranges, max_range=spec.lidar_max_range, valid=valid)


def sample_uwb_ranges(
    positions: list[np.ndarray] | np.ndarray,
    world: World,
    spec: SensorSpec,
    rng: np.random.Generator | None = None,
    ids: list[int] | None = None,
    timestamp: float = 0.0,
) -> RangeSet:
    """One ranging round across every reachable unordered node pair.

    LOS pairs get Gaussian noise and a power gap at or below the NLOS
    threshold; wall-blocked pairs get an additional positive exponential
    bias and a power gap above it. Pairs beyond ``uwb_max_range`` are
    silently absent.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    n = pos.shape[0]
    if n < 2:
        raise ValueError("need at least two nodes to range")
    if ids is None:
        ids = list(range(n))
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)

    measurements = []
    for i in range(n):
        for j in range(i + 1, n):
            true_dist = float(np.linalg.norm(pos[i] - pos[j]))
            if true_dist > spec.uwb_max_range:
                continue
            blocked = segment_blocked(world, pos[i], pos[j])
            dist = true_dist + rng.normal(0.0, spec.uwb_sigma_n)
            rx_power = -78.0 + rng.normal(0.0, 2.0)
            if blocked:
                dist += rng.exponential(spec.nlos_bias_mean)
                gap = spec.nlos_power_gap_db + 1.0 + rng.exponential(4.0)
            else:
                gap = rng.uniform(0.0, spec.nlos_power_gap_db)
            a, b = sorted((ids[i], ids[j]))
            measurements.append(
                RangeMeasurement(
                    node_i=a,
                    node_j=b,
                    range=max(dist, 0.0),
                    rx_power_dbm=rx_power,
                    first_path_power_dbm=rx_power - gap,
                )
            )
    return RangeSet(timestamp=timestamp, measurements=measurements)


@dataclass(slots=True)
class SimStep:
    """Everything the simulator emits for one time step."""

    truth: StateVector
    true_pose: Pose2
    scan: Scan
    ranges: RangeSet
    events: list[tuple[str, int]]


def step_scenario(scenario: Scenario, t: int) -> SimStep:
    """Ground truth and sensor draws for step ``t``; pure in (scenario, t)."""
    if not 0 <= t < scenario.horizon:
        raise ValueError(f"step {t} outside horizon {scenario.horizon}")
    time = t * scenario.delta
    rng = np.random.default_rng([scenario.seed, scenario.sensors.rng_seed, t])

    robot_pos, robot_vel = scenario.trajectory.sample(time)
    heading = scenario.trajectory.heading(time)
    pose = Pose2(robot_pos[0], robot_pos[1], heading)

    beacon_states = scenario.beacons.state_at(time)
    alive = sorted(b for b, (_, _, powered) in beacon_states.items() if powered)
    positions = np.vstack([robot_pos] + [beacon_states[b][0] for b in alive])
    velocities = np.vstack([robot_vel] + [beacon_states[b][1] for b in alive])
    truth = StateVector(positions, velocities, alive)

    scan = raycast(scenario.world, pose, scenario.sensors, rng)
    ranges = sample_uwb_ranges(
        positions,
        scenario.world,
        scenario.sensors,
        rng,
        ids=[0] + alive,
        timestamp=time,
    )

    events = []
    prev_time = (t - 1) * scenario.delta
    for ev in scenario.beacons.events:
        if (t == 0 and ev.time <= time) or (prev_time < ev.time <= time):
            events.append((ev.action, ev.beacon_id))
    return SimStep(truth=truth, true_pose=pose, scan=scan, ranges=ranges, events=events)


# ---------------------------------------------------------------------------
# Built-in worlds and scenarios


def workshop_world() -> World:
    """12 x 19 m workshop: outer walls plus interior clutter."""
    segments = []

    def box(x0, y0, x1, y1):
        segments.extend(
            [
                ((x0, y0), (x1, y0)),
                ((x1, y0), (x1, y1)),
                ((x1, y1), (x0, y1)),
                ((x0, y1), (x0, y0)),
            ]
        )

    box(0.0, 0.0, 12.0, 19.0)
    # benches and pillars shadow robot-to-beacon lines over much of the
    # driving loop and thin the beacon-to-beacon graph (both room diagonals
    # and the left column are blocked) while leaving it connected enough
    # for every beacon to be multilaterated as the robot moves
    box(4.6, 3.4, 7.4, 4.8)
    box(4.6, 14.0, 7.4, 15.4)
    box(1.8, 5.4, 2.4, 6.2)
    box(9.6, 5.4, 10.2, 6.2)
    box(1.8, 12.8, 2.4, 13.6)
    box(9.6, 12.8, 10.2, 13.6)
    box(5.7, 9.2, 6.3, 9.8)
    # sloped partitions plus short wall stubs for heading texture
    segments.append(((3.4, 7.6), (4.2, 8.4)))
    segments.append(((7.8, 10.6), (8.6, 11.4)))
    segments.append(((0.0, 9.5), (0.8, 9.5)))
    segments.append(((12.0, 9.5), (11.45, 9.5)))
    segments.append(((5.0, 0.0), (5.0, 0.5)))
    segments.append(((7.0, 19.0), (7.0, 18.55)))
    return World(segments=segments, extent=(0.0, 0.0, 12.0, 19.0))


def corridor_world(length: float = 22.7, width: float = 2.4) -> World:
    """Straight feature-poor corridor with end caps."""
    segments = [
        ((0.0, 0.0), (length, 0.0)),
        ((0.0, width), (length, width)),
        ((0.0, 0.0), (0.0, width)),
        ((length, 0.0), (length, width)),
    ]
    return World(segments=segments, extent=(0.0, 0.0, length, width))


def _round_corners(
    points: list[tuple[float, float]], radius: float, spacing: float = 0.12
) -> list[tuple[float, float]]:
    """Replace each closed-loop corner with a sampled quadratic Bezier blend.

    Dense sampling keeps the heading change per waypoint small, so the
    simulated platform turns continuously instead of snapping.
    """
    n = len(points)
    out: list[tuple[float, float]] = []
    for k in range(n):
        prev = np.asarray(points[(k - 1) % n], float)
        cur = np.asarray(points[k], float)
        nxt = np.asarray(points[(k + 1) % n], float)
        r_in = min(radius, 0.4 * float(np.linalg.norm(cur - prev)))
        r_out = min(radius, 0.4 * float(np.linalg.norm(nxt - cur)))
        din = (cur - prev) / np.linalg.norm(cur - prev)
        dout = (nxt - cur) / np.linalg.norm(nxt - cur)
        a = cur - din * r_in
        b = cur + dout * r_out
        arc = float(np.linalg.norm(cur - a) + np.linalg.norm(b - cur))
        n_samples = max(2, int(np.ceil(arc / spacing)))
        for s in np.linspace(0.0, 1.0, n_samples, endpoint=False):
            p = (1 - s) ** 2 * a + 2 * (1 - s) * s * cur + s**2 * b
            out.append(tuple(p))
        out.append(tuple(b))
    return out


def _timed_loop(
    points: list[tuple[float, float]],
    speed: float,
    loops: int,
    corner_radius: float = 0.0,
):
    """Close a loop through its points ``loops`` times with times from speed."""
    if corner_radius > 0.0:
        points = _round_corners(points, corner_radius)
    waypoints = [(0.0, points[0])]
    t = 0.0
    prev = np.asarray(points[0], float)
    for _ in range(loops):
        for p in points[1:] + [points[0]]:
            cur = np.asarray(p, float)
            step = float(np.linalg.norm(cur - prev)) / speed
            if step > 1e-9:
                t += step
                waypoints.append((t, p))
            prev = cur
    return waypoints


WORKSHOP_BEACONS = {
    1: (0.7, 0.7),
    2: (11.3, 0.7),
    3: (11.3, 18.3),
    4: (0.7, 18.3),
    5: (6.0, 11.6),
}


def workshop_scenario(
    seed: int = 0,
    loops: int = 3,
    speed: float = 0.8,
    fast_turns: bool = False,
) -> Scenario:
    """Five-beacon workshop circuit; ``fast_turns`` swaps in a zig-zag path."""
    if fast_turns:
        circuit = [
            (3.0, 3.0),
            (9.0, 3.6),
            (3.2, 6.4),
            (9.0, 7.4),
            (3.2, 11.6),
            (9.2, 12.4),
            (3.0, 15.8),
            (8.8, 16.6),
            (2.6, 13.4),
            (2.8, 5.2),
        ]
        name = "workshop_fast_turns"
    else:
        circuit = [
            (3.0, 3.0),
            (9.0, 3.0),
            (9.4, 9.6),
            (9.0, 16.0),
            (3.0, 16.0),
            (2.6, 9.6),
        ]
        name = "workshop"
    # Sharp corners model aggressive turning; the regular circuit is driven
    # with rounded corners as a pushed platform would take them.
    waypoints = _timed_loop(circuit, speed, loops, corner_radius=0.0 if fast_turns else 0.8)
    trajectory = TrajectoryScript(waypoints=waypoints, speed_profile=speed)
    horizon = int(trajectory.end_time / 0.1) + 1
    return Scenario(
        name=name,
        world=workshop_world(),
        trajectory=trajectory,
        beacons=BeaconScript(initial=dict(WORKSHOP_BEACONS)),
        sensors=SensorSpec(),
        seed=seed,
        horizon=horizon,
    )


def corridor_scenario(seed: int = 0, speed: float = 0.8) -> Scenario:
    """One pass down the 22.7 m corridor with entrance-side beacons.

    The LiDAR range is short relative to the corridor so the middle stretch
    is feature-poor; the filter runs stiff (low process noise) as fits a
    steady straight push.
    """
    length = 22.7
    waypoints = TrajectoryScript(
        waypoints=[(0.0, (1.2, 1.2)), ((21.0 - 1.2) / speed, (21.0, 1.2))],
        speed_profile=speed,
    )
    beacons = BeaconScript(
        initial={
            1: (0.4, 0.4),
            2: (0.4, 2.0),
            3: (6.0, 0.35),
            4: (6.0, 2.05),
        }
    )
    sensors = SensorSpec(lidar_max_range=8.0, lidar_noise_std=0.02)
    horizon = int(waypoints.end_time / 0.1) + 1
    return Scenario(
        name="corridor",
        world=corridor_world(length),
        trajectory=waypoints,
        beacons=beacons,
        sensors=sensors,
        seed=seed,
        horizon=horizon,
        filter=FilterParams(sigma_w=0.005, sigma_n=0.1),
    )


def dynamic_beacon_scenario(seed: int = 0) -> Scenario:
    """Workshop run where a beacon joins at step 135 and another relocates.

    Timeline (at the 0.1 s step): beacon 5 powers on at step 135; beacon 3
    powers off at step 311, is relocated, and powers back on at step 466.
    """
    base = workshop_scenario(seed=seed, loops=3)
    delta = base.delta
    beacons = BeaconScript(
        initial={b: WORKSHOP_BEACONS[b] for b in (1, 2, 3, 4)},
        events=[
            BeaconEvent(time=135 * delta, beacon_id=5, action="place", position=(6.0, 11.6)),
            BeaconEvent(time=135 * delta, beacon_id=5, action="power_on"),
            BeaconEvent(time=311 * delta, beacon_id=3, action="power_off"),
            BeaconEvent(time=311 * delta, beacon_id=3, action="place", position=(6.4, 1.2)),
            BeaconEvent(time=466 * delta, beacon_id=3, action="power_on"),
        ],
    )
    return Scenario(
        name="dynamic_beacons",
        world=base.world,
        trajectory=base.trajectory,
        beacons=beacons,
        sensors=base.sensors,
        seed=seed,
        horizon=base.horizon,
    )


BUILTIN_SCENARIOS = {
    "workshop": workshop_scenario,
    "workshop_fast_turns": lambda seed=0: workshop_scenario(seed=seed, fast_turns=True),
    "corridor": corridor_scenario,
    "dynamic_beacons": dynamic_beacon_scenario,
}


# ---------------------------------------------------------------------------
# JSON round trip


def scenario_to_json(scenario: Scenario) -> dict:
    """Plain-dict form matching the documented scenario schema."""
    return {
        "name": scenario.name,
        "world": {
            "segments": [[list(a), list(b)] for a, b in scenario.world.segments],
            "extent": list(scenario.world.extent),
        },
        "trajectory": {
            "waypoints": [[t, list(p)] for t, p in scenario.trajectory.waypoints],
            "speed": scenario.trajectory.speed_profile,
        },
        "beacons": {
            "initial": {str(b): list(p) for b, p in scenario.beacons.initial.items()},
            "events": [
                {
                    "time": ev.time,
                    "id": ev.beacon_id,
                    "action": ev.action,
                    **({"position": list(ev.position)} if ev.position else {}),
                }
                for ev in scenario.beacons.events
            ],
        },
        "sensors": {k: v for k, v in asdict(scenario.sensors).items() if math.isfinite(v)},
        "filter": asdict(scenario.filter),
        "seed": scenario.seed,
        "horizon": scenario.horizon,
        "delta": scenario.delta,
    }


def scenario_from_json(data: dict) -> Scenario:
    """Inverse of :func:`scenario_to_json`; world may name a built-in."""
    world_spec = data["world"]
    if isinstance(world_spec, str):
        if world_spec == "workshop":
            world = workshop_world()
        elif world_spec == "corridor":
            world = corridor_world()
        else:
            raise ValueError(f"unknown built-in world {world_spec!r}")
    else:
        world = World(
            segments=[(tuple(a), tuple(b)) for a, b in world_spec["segments"]],
            extent=tuple(world_spec["extent"]),
        )
    trajectory = TrajectoryScript(
        waypoints=[(t, tuple(p)) for t, p in data["trajectory"]["waypoints"]],
        speed_profile=data["trajectory"].get("speed", 0.8),
    )
    beacons_spec = data.get("beacons", {})
    beacons = BeaconScript(
        initial={int(b): tuple(p) for b, p in beacons_spec.get("initial", {}).items()},
        events=[
            BeaconEvent(
                time=ev["time"],
                beacon_id=ev["id"],
                action=ev["action"],
                position=tuple(ev["position"]) if "position" in ev else None,
            )
            for ev in beacons_spec.get("events", [])
        ],
    )
    sensors = SensorSpec(**data.get("sensors", {}))
    return Scenario(
        name=data.get("name", "scenario"),
        world=world,
        trajectory=trajectory,
        beacons=beacons,
        sensors=sensors,
        seed=int(data["seed"]),
        horizon=int(data["horizon"]),
        delta=float(data.get("delta", 0.1)),
        filter=FilterParams(**data.get("filter", {})),
    )


def load_scenario(path_or_name: str) -> Scenario:
    """Load a scenario JSON file, or build a built-in by name."""
    if path_or_name in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[path_or_name]()
    with open(path_or_name, "r", encoding="utf-8") as f:
        return scenario_from_json(json.load(f))

"""Per-step SLAM orchestration: filter, gauge, matcher and map in order.

Each step runs predict, range update, gauge fix, scan matching, state
correction and map integration. The session also owns bootstrap (initial
layout from the first usable range table) and the beacon join/drop
lifecycle.
"""

from __future__ import annotations

import itertools
import logging
import math
import time as _time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .ekf import (
    AnchorRemoval,
    Belief,
    DegenerateGeometry,
    InsufficientRanges,
    MotionModel,
    RangeSet,
    SensorNoise,
    add_beacon,
    bootstrap_geometry,
    gauge_fix,
    nlos_gate,
    predict,
    remove_beacon,
    update,
)
from .geometry import GaugeFrame, Pose2, StationaryRobot, heading_from_velocity, normalize_angle
from .mapping import Scan, _interp_arrays, build_pyramid, make_grid, scan_endpoints
from .matcher import FusionConfig, MatchOffset, apply_correction, match_scan
from .sim import Scenario, step_scenario

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_match", "no_correction", "lidar_only_match")

#: Gamma used when the range term is downplayed to effectively zero.
LIDAR_ONLY_GAMMA = 1e-6

#: Prior stds applied to the bootstrap layout.
BOOTSTRAP_POS_STD = 1.0
BOOTSTRAP_VEL_STD = 0.5


class ScenarioError(Exception):
    """The scenario cannot be run (e.g. bootstrap never succeeds)."""


def _circular_mean(angles) -> float:
    return math.atan2(
        sum(math.sin(a) for a in angles), sum(math.cos(a) for a in angles)
    )


@dataclass(slots=True)
class SessionConfig:
    motion: MotionModel
    noise: SensorNoise
    fusion: FusionConfig = field(default_factory=FusionConfig)
    map_extent: tuple[float, float, float, float] = (0.0, 0.0, 20.0, 20.0)
    map_resolution: float = 0.05
    pyramid_levels: int = 3
    ablation: str = "full"
    bootstrap_retry_limit: int = 100
    beacon_absence_limit: int = 10
    mapping_warmup_steps: int = 25
    match_coverage_min: float = 0.35
    match_heading_hold_steps: int = 10
    heading_blend: float = 0.03

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")


@dataclass(slots=True)
class StepTiming:
    """Wall-clock milliseconds per pipeline stage for one step."""

    predict: float = 0.0
    update: float = 0.0
    gauge: float = 0.0
    match: float = 0.0
    correct: float = 0.0
    integrate: float = 0.0

    @property
    def total(self) -> float:
        return (
            self.predict
            + self.update
            + self.gauge
            + self.match
            + self.correct
            + self.integrate
        )


class SlamSession:
    """One live SLAM run; owns the belief, gauge frame and map pyramid."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.belief: Belief | None = None
        self.frame: GaugeFrame | None = None
        self.last_heading: float | None = None
        self.pyramid = build_pyramid(
            make_grid(cfg.map_extent, cfg.map_resolution), cfg.pyramid_levels
        )
        self.join_order: list[int] = []
        self._missing: dict[int, int] = {}
        self._bootstrap_attempts = 0
        self._steps_since_bootstrap = 0
        self._match_heading: float | None = None
        self._steps_since_match = 0
        self._recent_velocity_headings: deque[float] = deque(maxlen=8)
        self._recent_positions: deque[np.ndarray] = deque(maxlen=11)
        self.timings: list[StepTiming] = []
        effective_gamma = (
            LIDAR_ONLY_GAMMA if cfg.ablation == "lidar_only_match" else cfg.fusion.gamma
        )
        self._fusion = FusionConfig(
            gamma=effective_gamma,
            iterations_per_level=cfg.fusion.iterations_per_level,
            damping=cfg.fusion.damping,
            step_clamp=cfg.fusion.step_clamp,
        )

    # -- bootstrap ---------------------------------------------------------

    def _los_pairs(self, ranges: RangeSet) -> dict[tuple[int, int], float]:
        return {
            m.pair: m.range for m in ranges.measurements if nlos_gate(m) == "LOS"
        }

    def _try_bootstrap(self, ranges: RangeSet) -> bool:
        """Embed the largest LOS-complete node subset containing the robot."""
        pairs = self._los_pairs(ranges)
        nodes = sorted({n for pair in pairs for n in pair})
        if 0 not in nodes:
            return False
        beacon_nodes = [n for n in nodes if n != 0]

        # Node counts are small, so search all beacon subsets for the largest
        # clique that includes the robot; ties prefer lower beacon ids.
        best: tuple[int, ...] | None = None
        for size in range(min(len(beacon_nodes), 12), 1, -1):
            for combo in itertools.combinations(beacon_nodes, size):
                subset = (0,) + combo
                if all(
                    (a, b) in pairs for a, b in itertools.combinations(subset, 2)
                ):
                    best = subset
                    break
            if best is not None:
                break
        if best is None:
            return False
        candidates = list(best)
        beacons = [n for n in candidates if n != 0]

        table = np.zeros((len(candidates), len(candidates)))
        index = {n: k for k, n in enumerate(candidates)}
        for (a, b), dist in pairs.items():
            if a in index and b in index:
                table[index[a], index[b]] = dist
                table[index[b], index[a]] = dist
        try:
            state = bootstrap_geometry(table, beacon_ids=beacons)
        except DegenerateGeometry:
            log.info("bootstrap table degenerate at t=%.2f; retrying", ranges.timestamp)
            return False

        dim = state.dim
        cov = np.zeros((dim, dim))
        half = 2 * state.n_nodes
        cov[:half, :half] = BOOTSTRAP_POS_STD**2 * np.eye(half)
        cov[half:, half:] = BOOTSTRAP_VEL_STD**2 * np.eye(half)
        belief = Belief(state, cov, ranges.timestamp)

        anchor_a, anchor_b = sorted(beacons)[:2]
        self.frame = GaugeFrame(anchor_a=anchor_a, anchor_b=anchor_b)
        self.belief = gauge_fix(belief, self.frame)
        self.join_order = sorted(beacons)
        log.info(
            "bootstrapped %d nodes (anchors %d, %d) at t=%.2f",
            len(candidates),
            anchor_a,
            anchor_b,
            ranges.timestamp,
        )
        return True

    # -- beacon lifecycle --------------------------------------------------

    def _promote_anchor(self, lost: int) -> None:
        frame = self.frame
        survivor = frame.anchor_b if lost == frame.anchor_a else frame.anchor_a
        candidates = [
            b
            for b in self.join_order
            if b in self.belief.state.beacon_ids and b not in (lost, survivor)
        ]
        if not candidates:
            raise ScenarioError("cannot re-anchor: no replacement beacon alive")
        promoted = candidates[0]  # longest-lived remaining beacon
        anchor_a, anchor_b = sorted((survivor, promoted))
        self.frame = GaugeFrame(anchor_a=anchor_a, anchor_b=anchor_b)
        self.belief = gauge_fix(self.belief, self.frame)
        log.warning("anchor %d lost; gauge re-fixed to (%d, %d)", lost, anchor_a, anchor_b)

    def _handle_lifecycle(self, ranges: RangeSet) -> None:
        state = self.belief.state
        heard: set[int] = set()
        for m in ranges.measurements:
            heard.update(m.pair)
        heard.discard(0)

        for beacon_id in list(state.beacon_ids):
            if beacon_id in heard:
                self._missing[beacon_id] = 0
            else:
                self._missing[beacon_id] = self._missing.get(beacon_id, 0) + 1
                if self._missing[beacon_id] > self.cfg.beacon_absence_limit:
                    if beacon_id in (self.frame.anchor_a, self.frame.anchor_b):
                        self._promote_anchor(beacon_id)
                    try:
                        self.belief = remove_beacon(self.belief, beacon_id, self.frame)
                        log.info("beacon %d dropped after silence", beacon_id)
                    except AnchorRemoval:  # pragma: no cover - promoted above
                        continue
                    self._missing.pop(beacon_id, None)

        for beacon_id in sorted(heard):
            if self.belief.state.has_node(beacon_id):
                continue
            related = [m for m in ranges.measurements if beacon_id in m.pair]
            try:
                self.belief = add_beacon(self.belief, beacon_id, related)
                self.join_order.append(beacon_id)
                self._missing[beacon_id] = 0
                log.info("beacon %d joined at t=%.2f", beacon_id, ranges.timestamp)
            except InsufficientRanges:
                pass  # queued implicitly; retried next step

    def _map_coverage(self, pose: Pose2, scan: Scan) -> float:
        """Fraction of scan endpoints landing on already-observed map cells.

        Matching against mostly-unknown space would let the range term yank
        the pose around unopposed, so the matcher stays off until the map
        has had a chance to form under the filter's own poses.
        """
        pts = scan_endpoints(scan)
        if pts.shape[0] == 0:
            return 0.0
        c, s = np.cos(pose.theta), np.sin(pose.theta)
        world = pts @ np.array([[c, s], [-s, c]]) + [pose.x, pose.y]
        prob, _, inside = _interp_arrays(self.pyramid.finest, world)
        return float(np.mean(inside & (np.abs(prob - 0.5) > 0.02)))

    # -- main step ---------------------------------------------------------

    def step(self, ranges: RangeSet, scan: Scan | None) -> Belief | None:
        """Advance one step; returns the current belief (None pre-bootstrap)."""
        if self.belief is None:
            if not self._try_bootstrap(ranges):
                self._bootstrap_attempts += 1
                if self._bootstrap_attempts > self.cfg.bootstrap_retry_limit:
                    raise ScenarioError(
                        f"bootstrap failed for {self._bootstrap_attempts} consecutive steps"
                    )
            return self.belief

        timing = StepTiming()
        clock = _time.perf_counter
        self._steps_since_bootstrap += 1
        # Scans are only trusted into the map once the velocity-derived
        # heading has had time to converge; a map seeded with a wild heading
        # never recovers.
        warmed_up = self._steps_since_bootstrap > self.cfg.mapping_warmup_steps

        t0 = clock()
        self.belief = predict(self.belief, self.cfg.motion)
        timing.predict = (clock() - t0) * 1e3

        self._handle_lifecycle(ranges)

        known = [
            m
            for m in ranges.measurements
            if self.belief.state.has_node(m.node_i) and self.belief.state.has_node(m.node_j)
        ]
        usable = RangeSet(ranges.timestamp, known)

        t0 = clock()
        self.belief = update(self.belief, usable, self.cfg.noise)
        timing.update = (clock() - t0) * 1e3

        t0 = clock()
        self.belief = gauge_fix(self.belief, self.frame)
        timing.gauge = (clock() - t0) * 1e3

        # Heading: the matched heading chains from step to step (the scan
        # matcher tracks the map-relative rotation far more tightly than the
        # velocity estimate, whose direction jitters several degrees per
        # step). The chain is kept weakly pulled toward the direction of
        # recent position displacement, the only drift-free heading evidence
        # in the anchor frame, so a rotation error frozen into the early map
        # bleeds out instead of persisting.
        if (
            self._match_heading is not None
            and self._steps_since_match > self.cfg.match_heading_hold_steps
        ):
            self._match_heading = None
        try:
            velocity_heading = heading_from_velocity(self.belief.state.velocity(0))
            self._recent_velocity_headings.append(velocity_heading)
        except StationaryRobot:
            velocity_heading = None
        self._recent_positions.append(self.belief.state.positions[0].copy())
        travel_heading = None
        if len(self._recent_positions) == self._recent_positions.maxlen:
            displacement = self._recent_positions[-1] - self._recent_positions[0]
            if np.linalg.norm(displacement) > 0.3:
                travel_heading = math.atan2(displacement[1], displacement[0])
        if self._match_heading is not None:
            heading = self._match_heading
            if travel_heading is not None:
                heading = normalize_angle(
                    heading
                    + self.cfg.heading_blend * normalize_angle(travel_heading - heading)
                )
        elif self._recent_velocity_headings:
            heading = _circular_mean(self._recent_velocity_headings)
        else:
            heading = self.last_heading
        self.last_heading = heading

        map_pose: Pose2 | None = None
        if heading is not None:
            map_pose = Pose2(
                self.belief.state.positions[0, 0],
                self.belief.state.positions[0, 1],
                heading,
            )

        offset: MatchOffset | None = None
        matched = False
        if (
            scan is not None
            and map_pose is not None
            and warmed_up
            and self.cfg.ablation != "no_match"
            and self._map_coverage(map_pose, scan) >= self.cfg.match_coverage_min
        ):
            t0 = clock()
            offset = match_scan(
                self.belief,
                scan,
                self.pyramid,
                usable,
                self._fusion,
                heading=heading,
                anchors=(self.frame.anchor_a, self.frame.anchor_b),
            )
            timing.match = (clock() - t0) * 1e3
            matched = True
            map_pose = Pose2(
                map_pose.x + offset.d_positions[0, 0],
                map_pose.y + offset.d_positions[0, 1],
                map_pose.theta + offset.d_theta,
            )
            self._match_heading = map_pose.theta
            self._steps_since_match = 0
            self.last_heading = map_pose.theta
            if self.cfg.ablation != "no_correction":
                t0 = clock()
                self.belief = apply_correction(self.belief, offset)
                timing.correct = (clock() - t0) * 1e3
        if not matched:
            self._steps_since_match += 1

        if scan is not None and map_pose is not None and warmed_up:
            t0 = clock()
            self.pyramid.integrate(map_pose, scan)
            timing.integrate = (clock() - t0) * 1e3

        self.timings.append(timing)
        return self.belief


# ---------------------------------------------------------------------------
# Whole-scenario execution


@dataclass(slots=True)
class StepRecord:
    """Truth and estimate snapshot after one pipeline step."""

    step: int
    time: float
    true_pose: Pose2
    true_beacons: dict[int, tuple[float, float]]
    est_pose: tuple[float, float, float] | None  # x, y, heading (gauge frame)
    est_beacons: dict[int, tuple[float, float]]


@dataclass(slots=True)
class RunResult:
    scenario_name: str
    records: list[StepRecord]
    session: SlamSession

    @property
    def timings_ms(self) -> list[float]:
        return [t.total for t in self.session.timings]


def session_for_scenario(
    scenario: Scenario,
    ablation: str = "full",
    gamma: float | None = None,
    map_margin: float = 1.0,
) -> SlamSession:
    xmin, ymin, xmax, ymax = scenario.world.extent
    fusion = FusionConfig() if gamma is None else FusionConfig(gamma=gamma)
    cfg = SessionConfig(
        motion=MotionModel(delta=scenario.delta, sigma_w=scenario.filter.sigma_w),
        noise=SensorNoise(sigma_n=scenario.filter.sigma_n),
        fusion=fusion,
        map_extent=(xmin - map_margin, ymin - map_margin, xmax + map_margin, ymax + map_margin),
        ablation=ablation,
    )
    return SlamSession(cfg)


def execute_scenario(
    scenario: Scenario,
    ablation: str = "full",
    gamma: float | None = None,
) -> RunResult:
    """Run the full pipeline over a scenario and record every step."""
    session = session_for_scenario(scenario, ablation=ablation, gamma=gamma)
    records: list[StepRecord] = []
    for t in range(scenario.horizon):
        sim = step_scenario(scenario, t)
        belief = session.step(sim.ranges, sim.scan)

        est_pose = None
        est_beacons: dict[int, tuple[float, float]] = {}
        if belief is not None:
            heading = session.last_heading if session.last_heading is not None else float("nan")
            est_pose = (
                float(belief.state.positions[0, 0]),
                float(belief.state.positions[0, 1]),
                heading,
            )
            for k, beacon_id in enumerate(belief.state.beacon_ids):
                est_beacons[beacon_id] = (
                    float(belief.state.positions[k + 1, 0]),
                    float(belief.state.positions[k + 1, 1]),
                )
        true_beacons = {
            beacon_id: (
                float(sim.truth.positions[k + 1, 0]),
                float(sim.truth.positions[k + 1, 1]),
            )
            for k, beacon_id in enumerate(sim.truth.beacon_ids)
        }
        records.append(
            StepRecord(
                step=t,
                time=t * scenario.delta,
                true_pose=sim.true_pose,
                true_beacons=true_beacons,
                est_pose=est_pose,
                est_beacons=est_beacons,
            )
        )
    return RunResult(scenario_name=scenario.name, records=records, session=session)

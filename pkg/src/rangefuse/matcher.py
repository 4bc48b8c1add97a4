"""Joint refinement of robot pose, heading and beacon positions.

A Gauss-Newton step minimizes a two-part objective: scan endpoints should
land on occupied map cells, and pairwise distances between nodes should
agree with the measured ranges. The range term is weighted by a tradeoff
factor gamma; three anchor coordinates stay frozen to preserve the gauge.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .ekf import Belief, RangeSet, nlos_gate
from .geometry import (
    Pose2,
    StateVector,
    Vec2,
    heading_from_velocity,
    normalize_angle,
    rotation_matrix,
)
from .mapping import GridPyramid, OccupancyGrid, Scan, _interp_arrays, scan_endpoints

log = logging.getLogger(__name__)


class SingularSystem(Exception):
    """The damped normal equations could not be solved."""


@dataclass(slots=True, frozen=True)
class FusionConfig:
    """Matcher tuning knobs.

    ``gamma`` trades the occupancy term against the range term;
    ``step_clamp`` bounds one Gauss-Newton step (meters, radians) to keep
    the first-order expansion valid; ``damping`` scales a Levenberg term
    relative to the mean diagonal of the normal matrix.
    """

    gamma: float = 0.65
    iterations_per_level: int = 5
    damping: float = 1e-6
    step_clamp: tuple[float, float] = (0.3, 0.2)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")


@dataclass(slots=True)
class MatchState:
    """Free variables of the matcher: robot pose plus beacon positions.

    The optimization vector is [p_robot, p_beacon_1 .. p_beacon_N, theta].
    ``gauge_mask`` holds flat indices into that vector that stay frozen
    (both anchor_a coordinates and anchor_b's y).
    """

    robot_pose: Pose2
    beacon_positions: np.ndarray  # (N, 2)
    gauge_mask: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        self.beacon_positions = np.atleast_2d(
            np.asarray(self.beacon_positions, dtype=float)
        )
        if self.beacon_positions.size == 0:
            self.beacon_positions = np.zeros((0, 2))

    @property
    def n_nodes(self) -> int:
        return self.beacon_positions.shape[0] + 1

    @property
    def dim(self) -> int:
        return 2 * self.n_nodes + 1

    def node_positions(self) -> np.ndarray:
        """(N+1, 2) positions, robot first."""
        return np.vstack([[self.robot_pose.x, self.robot_pose.y], self.beacon_positions])

    @classmethod
    def from_belief(
        cls,
        belief: Belief,
        heading: float,
        anchors: tuple[int, int] | None = None,
    ) -> "MatchState":
        state = belief.state
        mask: set[int] = set()
        if anchors is not None:
            ia, ib = state.index_of(anchors[0]), state.index_of(anchors[1])
            mask = {2 * ia, 2 * ia + 1, 2 * ib + 1}
        return cls(
            robot_pose=Pose2(state.positions[0, 0], state.positions[0, 1], heading),
            beacon_positions=state.positions[1:].copy(),
            gauge_mask=frozenset(mask),
        )

    def shifted(self, offset: "MatchOffset", scale: float = 1.0) -> "MatchState":
        """New state moved by ``scale`` times an offset."""
        d = offset.d_positions * scale
        return MatchState(
            robot_pose=Pose2(
                self.robot_pose.x + d[0, 0],
                self.robot_pose.y + d[0, 1],
                self.robot_pose.theta + offset.d_theta * scale,
            ),
            beacon_positions=self.beacon_positions + d[1:],
            gauge_mask=self.gauge_mask,
        )


@dataclass(slots=True)
class MatchOffset:
    """Optimal adjustment of node positions and robot heading."""

    d_positions: np.ndarray  # (N+1, 2), robot first
    d_theta: float

    def __post_init__(self):
        self.d_positions = np.atleast_2d(np.asarray(self.d_positions, dtype=float))

    @classmethod
    def zero(cls, n_nodes: int) -> "MatchOffset":
        return cls(np.zeros((n_nodes, 2)), 0.0)

    def d_position(self, index: int) -> Vec2:
        return Vec2.from_array(self.d_positions[index])

    def norm(self) -> float:
        return float(
            math.hypot(np.linalg.norm(self.d_positions), abs(self.d_theta))
        )

    def accumulate(self, other: "MatchOffset", scale: float = 1.0) -> None:
        self.d_positions += other.d_positions * scale
        self.d_theta += other.d_theta * scale


@dataclass(slots=True)
class NormalEquationTerms:
    """Gauss-Newton normal-equation pieces for one linearization point."""

    h_lid: np.ndarray
    h_uwb: np.ndarray
    m_lid: np.ndarray
    m_uwb: np.ndarray
    gauge_mask: frozenset[int]
    n_nodes: int


def _usable_ranges(ms: MatchState, ranges: RangeSet, id_to_index) -> list:
    """(index_i, index_j, measured_range) for LOS pairs between known nodes."""
    out = []
    for m in ranges.measurements:
        if nlos_gate(m) != "LOS":
            continue
        i = id_to_index.get(m.node_i)
        j = id_to_index.get(m.node_j)
        if i is None or j is None:
            continue
        out.append((i, j, m.range))
    return out


def _endpoints_world(ms: MatchState, endpoints: np.ndarray) -> np.ndarray:
    c, s = math.cos(ms.robot_pose.theta), math.sin(ms.robot_pose.theta)
    return endpoints @ np.array([[c, s], [-s, c]]) + [ms.robot_pose.x, ms.robot_pose.y]


def _objective(
    ms: MatchState,
    endpoints: np.ndarray,
    grid: OccupancyGrid,
    pairs: list,
    gamma: float,
) -> float:
    total = 0.0
    if endpoints.shape[0] > 0:
        prob, _, _ = _interp_arrays(grid, _endpoints_world(ms, endpoints))
        total += 0.5 * float(np.sum((1.0 - prob) ** 2))
    if pairs and gamma > 0.0:
        pos = ms.node_positions()
        for i, j, r in pairs:
            d = float(np.linalg.norm(pos[i] - pos[j]))
            total += 0.5 * gamma * (d - r) ** 2
    return total


def _id_to_index(state: StateVector) -> dict[int, int]:
    mapping = {0: 0}
    for k, beacon_id in enumerate(state.beacon_ids):
        mapping[beacon_id] = k + 1
    return mapping


def fused_objective(
    ms: MatchState,
    scan: Scan,
    grid: OccupancyGrid,
    ranges: RangeSet,
    cfg: FusionConfig,
    id_to_index: dict[int, int] | None = None,
) -> float:
    """Joint occupancy + range cost at the current match state.

    Endpoints outside the map contribute the unknown probability 0.5.
    ``id_to_index`` maps measurement node ids to node indices; by default
    ids are taken to be 0..N in state order.
    """
    if id_to_index is None:
        id_to_index = {i: i for i in range(ms.n_nodes)}
    pairs = _usable_ranges(ms, ranges, id_to_index)
    return _objective(ms, scan_endpoints(scan), grid, pairs, cfg.gamma)


def _terms(
    ms: MatchState,
    endpoints: np.ndarray,
    grid: OccupancyGrid,
    pairs: list,
) -> NormalEquationTerms:
    dim = ms.dim
    h_lid = np.zeros((dim, dim))
    m_lid = np.zeros(dim)
    h_uwb = np.zeros((dim, dim))
    m_uwb = np.zeros(dim)

    if endpoints.shape[0] > 0:
        world = _endpoints_world(ms, endpoints)
        prob, grad, _ = _interp_arrays(grid, world)
        theta = ms.robot_pose.theta
        c, s = math.cos(theta), math.sin(theta)
        # d(world)/d(theta) for each endpoint
        dwx = -endpoints[:, 0] * s - endpoints[:, 1] * c
        dwy = endpoints[:, 0] * c - endpoints[:, 1] * s
        # Per-endpoint Jacobian in the (robot x, robot y, theta) block
        jac = np.column_stack([grad[:, 0], grad[:, 1], grad[:, 0] * dwx + grad[:, 1] * dwy])
        residual = 1.0 - prob
        block = jac.T @ jac
        rhs = jac.T @ residual
        rows = [0, 1, dim - 1]
        h_lid[np.ix_(rows, rows)] = block
        m_lid[rows] = rhs

    if pairs:
        pos = ms.node_positions()
        for i, j, r in pairs:
            diff = pos[i] - pos[j]
            d = math.hypot(diff[0], diff[1])
            if d < 1e-12:
                continue
            unit = diff / d
            idx = [2 * i, 2 * i + 1, 2 * j, 2 * j + 1]
            g = np.concatenate([unit, -unit])
            h_uwb[np.ix_(idx, idx)] += np.outer(g, g)
            m_uwb[idx] += g * (d - r)

    mask = sorted(ms.gauge_mask)
    if mask:
        for h in (h_lid, h_uwb):
            h[mask, :] = 0.0
            h[:, mask] = 0.0
        m_lid[mask] = 0.0
        m_uwb[mask] = 0.0
    return NormalEquationTerms(h_lid, h_uwb, m_lid, m_uwb, ms.gauge_mask, ms.n_nodes)


def normal_equation_terms(
    ms: MatchState,
    scan: Scan,
    grid: OccupancyGrid,
    ranges: RangeSet,
    cfg: FusionConfig,
    id_to_index: dict[int, int] | None = None,
) -> NormalEquationTerms:
    """Assemble H and M for both terms at the current linearization point.

    Occupancy residuals only involve the robot pose/heading columns; range
    residuals only involve node position columns. Gauge-masked rows,
    columns and gradient entries are zeroed.
    """
    if id_to_index is None:
        id_to_index = {i: i for i in range(ms.n_nodes)}
    pairs = _usable_ranges(ms, ranges, id_to_index)
    return _terms(ms, scan_endpoints(scan), grid, pairs)


def solve_offset(terms: NormalEquationTerms, cfg: FusionConfig) -> MatchOffset:
    """One damped Gauss-Newton step from assembled normal equations.

    Solves (H_lid + gamma H_uwb + damping I) d = M_lid - gamma M_uwb, then
    clamps the step componentwise and forces gauge-masked entries to zero.
    A numerically singular system yields a zero offset with a diagnostic.
    """
    dim = 2 * terms.n_nodes + 1
    a = terms.h_lid + cfg.gamma * terms.h_uwb
    rhs = terms.m_lid - cfg.gamma * terms.m_uwb
    lam = cfg.damping * np.trace(a) / dim
    a = a + lam * np.eye(dim)
    mask = sorted(terms.gauge_mask)
    if mask:
        a[mask, :] = 0.0
        a[:, mask] = 0.0
        a[mask, mask] = 1.0
        rhs[mask] = 0.0

    try:
        delta = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        delta = None
    if delta is None or not np.all(np.isfinite(delta)):
        log.warning("singular normal equations (dim %d); returning zero offset", dim)
        return MatchOffset.zero(terms.n_nodes)

    clamp_pos, clamp_theta = cfg.step_clamp
    delta[:-1] = np.clip(delta[:-1], -clamp_pos, clamp_pos)
    delta[-1] = float(np.clip(delta[-1], -clamp_theta, clamp_theta))
    if mask:
        delta[mask] = 0.0
    return MatchOffset(delta[:-1].reshape(-1, 2), float(delta[-1]))


def match_scan(
    belief: Belief,
    scan: Scan,
    pyramid: GridPyramid,
    ranges: RangeSet,
    cfg: FusionConfig,
    heading: float | None = None,
    anchors: tuple[int, int] | None = None,
) -> MatchOffset:
    """Coarse-to-fine Gauss-Newton matching against the grid pyramid.

    Runs ``iterations_per_level`` steps per level from coarsest to finest,
    composing accepted offsets. A step is accepted only if the objective at
    that level does not increase; otherwise it is halved up to four times
    and then rejected. Returns the total offset relative to the belief.
    """
    if heading is None:
        heading = heading_from_velocity(belief.state.velocity(0))
    ms = MatchState.from_belief(belief, heading, anchors)
    id_to_index = _id_to_index(belief.state)
    pairs = _usable_ranges(ms, ranges, id_to_index)
    endpoints = scan_endpoints(scan)
    total = MatchOffset.zero(ms.n_nodes)

    for grid in reversed(pyramid.levels):
        objective = _objective(ms, endpoints, grid, pairs, cfg.gamma)
        for _ in range(cfg.iterations_per_level):
            step = solve_offset(_terms(ms, endpoints, grid, pairs), cfg)
            if step.norm() < 1e-12:
                break
            accepted = False
            scale = 1.0
            for _ in range(5):  # full step plus up to four halvings
                candidate = ms.shifted(step, scale)
                cand_obj = _objective(candidate, endpoints, grid, pairs, cfg.gamma)
                if cand_obj <= objective * (1.0 + 1e-12) + 1e-15:
                    ms = candidate
                    objective = cand_obj
                    total.accumulate(step, scale)
                    accepted = True
                    break
                scale *= 0.5
            if not accepted:
                break
    total.d_theta = normalize_angle(total.d_theta)
    return total


def apply_correction(belief: Belief, offset: MatchOffset) -> Belief:
    """Write a match offset back into the belief mean.

    Every node position shifts by its offset; the robot velocity rotates by
    d_theta (preserving speed) so the implied heading follows the matched
    one. The covariance is left unchanged.
    """
    state = belief.state
    if offset.d_positions.shape[0] != state.n_nodes:
        raise ValueError(
            f"offset covers {offset.d_positions.shape[0]} nodes, "
            f"belief has {state.n_nodes}"
        )
    positions = state.positions + offset.d_positions
    velocities = state.velocities.copy()
    velocities[0] = rotation_matrix(offset.d_theta) @ velocities[0]
    new_state = StateVector(positions, velocities, list(state.beacon_ids))
    return Belief(new_state, belief.covariance.copy(), belief.timestamp)

"""Cooperative range-only EKF over a robot and a varying set of beacons.

State layout follows :class:`~rangefuse.geometry.StateVector`: all node
positions stacked first, then all node velocities, so the transition model
is the block form [[I, dI], [0, I]] with per-node constant-velocity motion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GaugeFrame, StateVector, Vec2, rotation_matrix

log = logging.getLogger(__name__)

#: Received-power minus first-path-power gap above which a range is
#: treated as non-line-of-sight and excluded from the update (dB, strict).
NLOS_POWER_GAP_DB = 10.0

#: Prior standard deviations for a newly joined beacon.
NEW_BEACON_POS_STD = 1.0  # m
NEW_BEACON_VEL_STD = 0.5  # m/s

#: Minimum anchor separation for a well-defined gauge.
MIN_ANCHOR_SEPARATION = 1e-6


class DegenerateRange(Exception):
    """A measurement pair with coincident positions has no Jacobian row."""


class SingularInnovation(Exception):
    """The innovation covariance could not be inverted."""


class AnchorsCoincident(Exception):
    """Gauge anchors are too close together to define a frame."""


class DegenerateGeometry(Exception):
    """The range table does not embed in 2D (collinear or empty layout)."""


class InsufficientRanges(Exception):
    """Fewer than three usable ranges were available to place a beacon."""


class AnchorRemoval(Exception):
    """Attempted to drop a beacon that currently anchors the gauge frame."""


@dataclass(slots=True, frozen=True)
class MotionModel:
    """Constant-velocity motion with white velocity noise.

    ``delta`` is the sampling interval in seconds and ``sigma_w`` the
    process-noise scale in meters.
    """

    delta: float
    sigma_w: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("sampling interval must be positive")
        if self.sigma_w < 0:
            raise ValueError("process-noise scale must be non-negative")


@dataclass(slots=True, frozen=True)
class SensorNoise:
    """I.i.d. additive Gaussian range noise, std ``sigma_n`` meters."""

    sigma_n: float

    def __post_init__(self):
        if self.sigma_n <= 0:
            raise ValueError("range noise std must be positive")


@dataclass(slots=True, frozen=True)
class RangeMeasurement:
    """One peer-to-peer range with the signal powers used for NLOS gating.

    Node ids are canonical: ``node_i < node_j`` and the robot is id 0.
    """

    node_i: int
    node_j: int
    range: float
    rx_power_dbm: float
    first_path_power_dbm: float

    def __post_init__(self):
        if self.node_i == self.node_j:
            raise ValueError("a range needs two distinct nodes")
        if self.node_i > self.node_j:
            raise ValueError("node ids must be ordered node_i < node_j")
        if self.range < 0:
            raise ValueError("range must be non-negative")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.node_i, self.node_j)


@dataclass(slots=True)
class RangeSet:
    """All peer-to-peer ranges collected at one timestamp."""

    timestamp: float
    measurements: list[RangeMeasurement] = field(default_factory=list)

    def __post_init__(self):
        pairs = [m.pair for m in self.measurements]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate node pair in range set")


@dataclass(slots=True)
class Belief:
    """Joint state estimate and covariance at a timestamp."""

    state: StateVector
    covariance: np.ndarray
    timestamp: float

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.shape != (self.state.dim, self.state.dim):
            raise ValueError(
                f"covariance shape {self.covariance.shape} does not match "
                f"state dimension {self.state.dim}"
            )

    def validate(self, sym_tol: float = 1e-9, psd_tol: float = -1e-9) -> None:
        """Check covariance symmetry and positive semi-definiteness."""
        asym = np.max(np.abs(self.covariance - self.covariance.T))
        if asym > sym_tol:
            raise ValueError(f"covariance asymmetry {asym:.3e} exceeds {sym_tol}")
        sym = 0.5 * (self.covariance + self.covariance.T)
        min_eig = float(np.linalg.eigvalsh(sym)[0])
        if min_eig < psd_tol:
            raise ValueError(f"covariance min eigenvalue {min_eig:.3e} below {psd_tol}")

    def copy(self) -> "Belief":
        return Belief(self.state.copy(), self.covariance.copy(), self.timestamp)


def build_transition(n_beacons: int, model: MotionModel):
    """Transition matrix F, noise shaping G and process covariance Q.

    For N beacons the blocks act on 2(N+1)-dimensional position and
    velocity halves: F = [[I, dI], [0, I]], G = [dI; I], Q = sigma_w^2 G G^T.
    """
    if n_beacons < 0:
        raise ValueError("beacon count must be non-negative")
    m = 2 * (n_beacons + 1)
    d = model.delta
    eye = np.eye(m)
    f = np.block([[eye, d * eye], [np.zeros((m, m)), eye]])
    g = np.vstack([d * eye, eye])
    q = model.sigma_w**2 * (g @ g.T)
    return f, g, q


def predict(belief: Belief, model: MotionModel) -> Belief:
    """Propagate the belief one sampling interval forward.

    The mean moves by the deterministic part of the motion model; the
    process noise only inflates the covariance.
    """
    f, _, q = build_transition(belief.state.n_beacons, model)
    flat = f @ belief.state.flatten()
    cov = f @ belief.covariance @ f.T + q
    state = StateVector.from_flat(flat, belief.state.beacon_ids)
    return Belief(state, cov, belief.timestamp + model.delta)


def nlos_gate(m: RangeMeasurement) -> str:
    """Classify a measurement as 'LOS' or 'NLOS' from its power gap.

    The channel is flagged NLOS when received power exceeds first-path
    power by strictly more than :data:`NLOS_POWER_GAP_DB`.
    """
    gap = m.rx_power_dbm - m.first_path_power_dbm
    return "NLOS" if gap > NLOS_POWER_GAP_DB else "LOS"


def measurement_jacobian(
    state: StateVector, pairs: list[tuple[int, int]]
) -> np.ndarray:
    """Jacobian of the stacked pairwise ranges w.r.t. the flat state.

    Row k for node-index pair (i, j) holds the unit vector from j to i in
    node i's position columns and its negation in node j's; every velocity
    column is zero because ranges do not depend on velocities.
    """
    h = np.zeros((len(pairs), state.dim))
    for k, (i, j) in enumerate(pairs):
        diff = state.positions[i] - state.positions[j]
        dist = math.hypot(diff[0], diff[1])
        if dist < 1e-12:
            raise DegenerateRange(f"nodes {i} and {j} coincide; range row undefined")
        unit = diff / dist
        h[k, 2 * i : 2 * i + 2] = unit
        h[k, 2 * j : 2 * j + 2] = -unit
    return h


def predicted_ranges(state: StateVector, pairs: list[tuple[int, int]]) -> np.ndarray:
    """Stacked pairwise distances for node-index pairs."""
    diffs = state.positions[[i for i, _ in pairs]] - state.positions[[j for _, j in pairs]]
    return np.hypot(diffs[:, 0], diffs[:, 1])


def update(belief: Belief, ranges: RangeSet, noise: SensorNoise) -> Belief:
    """Standard EKF range update; only LOS measurements enter.

    Pairs whose estimated positions coincide are dropped. If the innovation
    covariance is numerically singular the update is skipped and the prior
    returned unchanged, with a diagnostic logged.
    """
    state = belief.state
    pairs: list[tuple[int, int]] = []
    observed: list[float] = []
    for m in ranges.measurements:
        if nlos_gate(m) != "LOS":
            continue
        if not (state.has_node(m.node_i) and state.has_node(m.node_j)):
            raise ValueError(f"measurement references unknown node pair {m.pair}")
        i, j = state.index_of(m.node_i), state.index_of(m.node_j)
        if np.linalg.norm(state.positions[i] - state.positions[j]) < 1e-9:
            log.warning("dropping degenerate range pair %s", m.pair)
            continue
        pairs.append((i, j))
        observed.append(m.range)
    if not pairs:
        return belief.copy()

    h = measurement_jacobian(state, pairs)
    p = belief.covariance
    s = h @ p @ h.T + noise.sigma_n**2 * np.eye(len(pairs))
    try:
        # K = P H^T S^-1, solved against the factorized innovation covariance
        kt = np.linalg.solve(s, h @ p)
    except np.linalg.LinAlgError:
        log.warning(
            "singular innovation covariance (%d pairs) at t=%.3f; update skipped",
            len(pairs),
            ranges.timestamp,
        )
        return belief.copy()
    k = kt.T
    innovation = np.asarray(observed) - predicted_ranges(state, pairs)
    flat = state.flatten() + k @ innovation
    cov = (np.eye(state.dim) - k @ h) @ p
    cov = 0.5 * (cov + cov.T)  # symmetrize to control round-off drift
    new_state = StateVector.from_flat(flat, state.beacon_ids)
    return Belief(new_state, cov, ranges.timestamp)


def gauge_transform(state: StateVector, anchor_a: int, anchor_b: int):
    """Rotation angle and pre-rotation offset mapping anchors onto the axes.

    Points transform as p' = R(angle) (p - offset); returns (angle, offset,
    separation).
    """
    pa = state.positions[state.index_of(anchor_a)]
    pb = state.positions[state.index_of(anchor_b)]
    diff = pb - pa
    separation = math.hypot(diff[0], diff[1])
    if separation <= MIN_ANCHOR_SEPARATION:
        raise AnchorsCoincident(
            f"anchors {anchor_a},{anchor_b} separated by {separation:.2e} m"
        )
    angle = -math.atan2(diff[1], diff[0])
    return angle, pa.copy(), separation


def gauge_fix(belief: Belief, frame: GaugeFrame) -> Belief:
    """Pin the gauge: anchor_a to the origin, anchor_b to the positive x axis.

    All positions are rigidly transformed, velocities rotate with the same
    rotation, the two anchor velocities are forced to zero, and the
    covariance is congruently transformed by the block rotation. The applied
    rotation/translation are recorded on ``frame``.
    """
    state = belief.state
    angle, offset, separation = gauge_transform(state, frame.anchor_a, frame.anchor_b)
    r = rotation_matrix(angle)

    positions = (state.positions - offset) @ r.T
    velocities = state.velocities @ r.T

    ia = state.index_of(frame.anchor_a)
    ib = state.index_of(frame.anchor_b)
    positions[ia] = (0.0, 0.0)
    positions[ib] = (separation, 0.0)
    velocities[ia] = (0.0, 0.0)
    velocities[ib] = (0.0, 0.0)

    block = np.kron(np.eye(2 * state.n_nodes), r)
    cov = block @ belief.covariance @ block.T
    cov = 0.5 * (cov + cov.T)

    frame.rotation = angle
    frame.translation = Vec2.from_array(-(r @ offset))

    new_state = StateVector(positions, velocities, list(state.beacon_ids))
    return Belief(new_state, cov, belief.timestamp)


def bootstrap_geometry(
    range_table: np.ndarray, beacon_ids: list[int] | None = None
) -> StateVector:
    """Initial relative layout from a complete pairwise range table.

    Classical multidimensional scaling of the squared-distance matrix,
    embedded in 2D, with node 0 as the robot. The layout is gauge-fixed to
    the two lowest-id beacons and mirrored, if needed, so that the first
    off-axis node has positive y; velocities start at zero.
    """
    d = np.asarray(range_table, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("range table must be square")
    n = d.shape[0]
    if n < 3:
        raise ValueError("need at least 3 nodes to bootstrap")
    if beacon_ids is None:
        beacon_ids = list(range(1, n))
    if len(beacon_ids) != n - 1:
        raise ValueError("one beacon id per non-robot node required")

    d = 0.5 * (d + d.T)
    centering = np.eye(n) - np.ones((n, n)) / n
    gram = -0.5 * centering @ (d**2) @ centering
    eigvals, eigvecs = np.linalg.eigh(gram)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    if eigvals[1] <= max(1e-6 * max(eigvals[0], 0.0), 1e-12):
        raise DegenerateGeometry(
            f"centered Gram matrix rank < 2 (eigenvalues {eigvals[:2]})"
        )
    coords = eigvecs[:, :2] * np.sqrt(eigvals[:2])

    state = StateVector(
        positions=coords,
        velocities=np.zeros_like(coords),
        beacon_ids=list(beacon_ids),
    )

    anchor_a, anchor_b = sorted(beacon_ids)[:2]
    ia, ib = state.index_of(anchor_a), state.index_of(anchor_b)
    angle, offset, separation = gauge_transform(state, anchor_a, anchor_b)
    r = rotation_matrix(angle)
    positions = (state.positions - offset) @ r.T
    positions[ia] = (0.0, 0.0)
    positions[ib] = (separation, 0.0)

    # Mirror ambiguity: require the first clearly off-axis node to lie above
    # the anchor axis, then never flip again.
    for idx in range(n):
        if idx in (ia, ib):
            continue
        if abs(positions[idx, 1]) > 1e-9:
            if positions[idx, 1] < 0:
                positions[:, 1] *= -1.0
            break

    return StateVector(positions, np.zeros_like(positions), list(beacon_ids))


def _node_flat_indices(index: int, n_nodes: int) -> list[int]:
    """Flat state indices (2 position + 2 velocity) of one node."""
    base = 2 * index
    vbase = 2 * n_nodes + 2 * index
    return [base, base + 1, vbase, vbase + 1]


def multilaterate(
    anchors: np.ndarray, dists: np.ndarray
) -> np.ndarray:
    """Least-squares position from >= 3 distances to known points.

    Linearizes by subtracting the first circle equation from the rest.
    """
    anchors = np.asarray(anchors, dtype=float)
    dists = np.asarray(dists, dtype=float)
    if anchors.shape[0] < 3:
        raise InsufficientRanges(f"{anchors.shape[0]} anchors, need 3")
    q0 = anchors[0]
    a = 2.0 * (anchors[1:] - q0)
    b = (
        dists[0] ** 2
        - dists[1:] ** 2
        + np.sum(anchors[1:] ** 2, axis=1)
        - np.sum(q0**2)
    )
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol


def add_beacon(
    belief: Belief, beacon_id: int, initial_ranges: list[RangeMeasurement]
) -> Belief:
    """Grow the state with a new beacon at a multilaterated position.

    Requires at least three LOS ranges from the new beacon to already
    localized nodes; raises :class:`InsufficientRanges` otherwise so the
    caller can queue the join and retry on a later step. Existing means and
    covariance blocks are untouched; the new block is diagonal with a large
    prior and zero cross-covariance.
    """
    state = belief.state
    if state.has_node(beacon_id):
        raise ValueError(f"beacon {beacon_id} already in the state")

    anchors: list[np.ndarray] = []
    dists: list[float] = []
    seen: set[int] = set()
    for m in initial_ranges:
        if beacon_id not in m.pair or nlos_gate(m) != "LOS":
            continue
        other = m.node_j if m.node_i == beacon_id else m.node_i
        if other in seen or not state.has_node(other):
            continue
        seen.add(other)
        anchors.append(state.positions[state.index_of(other)])
        dists.append(m.range)
    if len(anchors) < 3:
        raise InsufficientRanges(
            f"beacon {beacon_id}: {len(anchors)} usable LOS ranges, need 3"
        )
    position = multilaterate(np.array(anchors), np.array(dists))

    n_old = state.n_nodes
    positions = np.vstack([state.positions, position])
    velocities = np.vstack([state.velocities, np.zeros(2)])
    new_state = StateVector(positions, velocities, state.beacon_ids + [beacon_id])

    old_flat = [i for idx in range(n_old) for i in _node_flat_indices(idx, n_old)]
    new_flat = [i for idx in range(n_old) for i in _node_flat_indices(idx, n_old + 1)]
    cov = np.zeros((new_state.dim, new_state.dim))
    cov[np.ix_(new_flat, new_flat)] = belief.covariance[np.ix_(old_flat, old_flat)]
    new_idx = _node_flat_indices(n_old, n_old + 1)
    cov[new_idx[0], new_idx[0]] = NEW_BEACON_POS_STD**2
    cov[new_idx[1], new_idx[1]] = NEW_BEACON_POS_STD**2
    cov[new_idx[2], new_idx[2]] = NEW_BEACON_VEL_STD**2
    cov[new_idx[3], new_idx[3]] = NEW_BEACON_VEL_STD**2
    return Belief(new_state, cov, belief.timestamp)


def remove_beacon(
    belief: Belief, beacon_id: int, frame: GaugeFrame | None = None
) -> Belief:
    """Drop a beacon's state and covariance rows/columns.

    Refuses to remove a gauge anchor; the caller must re-anchor first.
    All surviving entries are copied bitwise unchanged.
    """
    state = belief.state
    if not state.has_node(beacon_id) or beacon_id == 0:
        raise ValueError(f"beacon {beacon_id} not present")
    if frame is not None and beacon_id in (frame.anchor_a, frame.anchor_b):
        raise AnchorRemoval(f"beacon {beacon_id} anchors the gauge frame")

    drop = state.index_of(beacon_id)
    keep_nodes = [i for i in range(state.n_nodes) if i != drop]
    positions = state.positions[keep_nodes]
    velocities = state.velocities[keep_nodes]
    beacon_ids = [b for b in state.beacon_ids if b != beacon_id]
    new_state = StateVector(positions, velocities, beacon_ids)

    # Sorting keeps the positions-then-velocities layout, since every
    # position index precedes every velocity index.
    keep_flat = sorted(
        idx
        for node in keep_nodes
        for idx in _node_flat_indices(node, state.n_nodes)
    )
    cov = belief.covariance[np.ix_(keep_flat, keep_flat)]
    return Belief(new_state, cov, belief.timestamp)

"""Shared 2D geometric primitives and the joint robot/beacon state.

Everything here is a plain value type or a pure function; instances can be
shared freely between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class StationaryRobot(Exception):
    """Raised when a heading is requested from a near-zero velocity."""


#: Speed below which a velocity vector carries no usable heading (m/s).
SPEED_EPSILON = 0.05


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(slots=True, frozen=True)
class Vec2:
    """2D vector; meters for positions, m/s for velocities."""

    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Vec2":
        return cls(float(a[0]), float(a[1]))

    def norm(self) -> float:
        return math.hypot(self.x, self.y)


@dataclass(slots=True, frozen=True)
class Pose2:
    """Planar pose: position in meters, heading in radians.

    ``theta`` is normalized into (-pi, pi] on construction.
    """

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def xy(self) -> Vec2:
        return Vec2(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)


def rotation_matrix(theta: float) -> np.ndarray:
    """2x2 counter-clockwise rotation matrix."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rigid_transform(pose: Pose2, point: Vec2) -> Vec2:
    """Map ``point`` through the rigid motion ``pose``: R(theta) p + t."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return Vec2(
        c * point.x - s * point.y + pose.x,
        s * point.x + c * point.y + pose.y,
    )


def pairwise_range(a: Vec2, b: Vec2) -> float:
    """Euclidean distance between two points; symmetric in its arguments."""
    return math.hypot(a.x - b.x, a.y - b.y)


def heading_from_velocity(v: Vec2) -> float:
    """Four-quadrant heading of a velocity vector.

    Raises :class:`StationaryRobot` when the speed is at or below
    ``SPEED_EPSILON``; the caller is expected to reuse its last valid
    heading in that case.
    """
    if v.norm() <= SPEED_EPSILON:
        raise StationaryRobot(f"speed {v.norm():.4f} m/s too low for heading")
    return math.atan2(v.y, v.x)


@dataclass(slots=True)
class StateVector:
    """Stacked 2D positions and velocities of the robot and N beacons.

    Index 0 is always the robot; indices 1..N are beacons in the order of
    ``beacon_ids``. The flattened layout is all positions first, then all
    velocities, giving dimension 4(N+1).
    """

    positions: np.ndarray  # (N+1, 2)
    velocities: np.ndarray  # (N+1, 2)
    beacon_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have equal shape")
        if self.positions.shape[0] != len(self.beacon_ids) + 1:
            raise ValueError("need exactly one position per node (robot + beacons)")
        if len(set(self.beacon_ids)) != len(self.beacon_ids):
            raise ValueError("beacon_ids must be unique")

    @property
    def n_beacons(self) -> int:
        return len(self.beacon_ids)

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return 4 * self.n_nodes

    def index_of(self, node_id: int) -> int:
        """Node index for an id; the robot is id 0, beacons use beacon_ids."""
        if node_id == 0:
            return 0
        return self.beacon_ids.index(node_id) + 1

    def has_node(self, node_id: int) -> bool:
        return node_id == 0 or node_id in self.beacon_ids

    def position(self, index: int) -> Vec2:
        return Vec2.from_array(self.positions[index])

    def velocity(self, index: int) -> Vec2:
        return Vec2.from_array(self.velocities[index])

    def flatten(self) -> np.ndarray:
        """Flat vector [p_0 .. p_N, v_0 .. v_N] of length 4(N+1)."""
        return np.concatenate([self.positions.ravel(), self.velocities.ravel()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, beacon_ids: list[int]) -> "StateVector":
        flat = np.asarray(flat, dtype=float)
        n_nodes = len(beacon_ids) + 1
        if flat.size != 4 * n_nodes:
            raise ValueError(f"flat state has size {flat.size}, expected {4 * n_nodes}")
        half = 2 * n_nodes
        return cls(
            positions=flat[:half].reshape(n_nodes, 2),
            velocities=flat[half:].reshape(n_nodes, 2),
            beacon_ids=list(beacon_ids),
        )

    def copy(self) -> "StateVector":
        return StateVector(
            self.positions.copy(), self.velocities.copy(), list(self.beacon_ids)
        )


@dataclass(slots=True)
class GaugeFrame:
    """Anchor choice pinning the translation/rotation freedom of the state.

    ``anchor_a`` sits at the origin, ``anchor_b`` on the positive x axis.
    ``rotation``/``translation`` record the transform most recently applied;
    ``reflection`` records whether the bootstrap layout was mirrored to fix
    the chirality (it is never flipped again afterwards).
    """

    anchor_a: int
    anchor_b: int
    rotation: float = 0.0
    translation: Vec2 = field(default_factory=lambda: Vec2(0.0, 0.0))
    reflection: bool = False

    def __post_init__(self):
        if self.anchor_a == self.anchor_b:
            raise ValueError("gauge anchors must be distinct beacons")

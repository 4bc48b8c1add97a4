"""Multi-resolution 2D occupancy grids with sub-cell interpolation.

Grids store log-odds so scan integration is additive and clampable; the
matcher reads occupancy probabilities and their spatial gradients through
bilinear interpolation of the four surrounding cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import Pose2, Vec2

#: Log-odds increments and clamps for scan integration.
L_OCC = 0.85
L_FREE = -0.4
L_MIN = -4.0
L_MAX = 4.0

#: Probability band around 0.5 exported as "unknown".
UNKNOWN_BAND = 0.1


class OutOfMap(Exception):
    """Queried point lies outside the interpolatable grid interior."""


@dataclass(slots=True)
class Scan:
    """One LiDAR sweep: per-beam bearing, range and validity."""

    bearings: np.ndarray
    ranges: np.ndarray
    max_range: float
    valid: np.ndarray

    def __post_init__(self):
        self.bearings = np.asarray(self.bearings, dtype=float)
        self.ranges = np.asarray(self.ranges, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (len(self.bearings) == len(self.ranges) == len(self.valid)):
            raise ValueError("bearings, ranges and valid must have equal length")


def scan_endpoints(scan: Scan) -> np.ndarray:
    """Sensor-frame endpoints of the valid beams, shape (n, 2)."""
    b = scan.bearings[scan.valid]
    r = scan.ranges[scan.valid]
    return np.column_stack([r * np.cos(b), r * np.sin(b)])


@dataclass(slots=True)
class OccupancyGrid:
    """Log-odds occupancy field over a fixed world-aligned extent.

    ``origin`` is the world coordinate of the (0, 0) cell corner. The
    backing array is indexed [ix, iy].
    """

    resolution: float
    origin: Vec2
    width: int
    height: int
    log_odds: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.log_odds is None:
            self.log_odds = np.zeros((self.width, self.height))
        elif self.log_odds.shape != (self.width, self.height):
            raise ValueError("log_odds shape must be (width, height)")

    def probabilities(self) -> np.ndarray:
        """Occupancy probabilities for the whole grid."""
        return 1.0 / (1.0 + np.exp(-self.log_odds))

    def cell_units(self, p: np.ndarray) -> np.ndarray:
        """World points to continuous cell-center coordinates."""
        return (np.asarray(p, dtype=float) - self.origin.as_array()) / self.resolution - 0.5

    def world_extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) covered by the grid."""
        o = self.origin
        return (
            o.x,
            o.y,
            o.x + self.width * self.resolution,
            o.y + self.height * self.resolution,
        )


def _interp_arrays(grid: OccupancyGrid, points: np.ndarray):
    """Bilinear probability and gradient at many points, vectorized.

    Points outside the interpolatable interior get probability 0.5 and a
    zero gradient, mirroring unexplored space. Returns (prob, grad, inside).
    """
    pts = np.atleast_2d(points)
    u = grid.cell_units(pts)
    inside = (
        (u[:, 0] >= 0.0)
        & (u[:, 1] >= 0.0)
        & (u[:, 0] <= grid.width - 1.0 - 1e-12)
        & (u[:, 1] <= grid.height - 1.0 - 1e-12)
    )
    uc = np.clip(u, 0.0, [grid.width - 1.0 - 1e-9, grid.height - 1.0 - 1e-9])
    ix = np.floor(uc[:, 0]).astype(np.int64)
    iy = np.floor(uc[:, 1]).astype(np.int64)
    dx = uc[:, 0] - ix
    dy = uc[:, 1] - iy

    lo = grid.log_odds
    p00 = 1.0 / (1.0 + np.exp(-lo[ix, iy]))
    p10 = 1.0 / (1.0 + np.exp(-lo[ix + 1, iy]))
    p01 = 1.0 / (1.0 + np.exp(-lo[ix, iy + 1]))
    p11 = 1.0 / (1.0 + np.exp(-lo[ix + 1, iy + 1]))

    prob = (1.0 - dy) * ((1.0 - dx) * p00 + dx * p10) + dy * ((1.0 - dx) * p01 + dx * p11)
    gx = ((1.0 - dy) * (p10 - p00) + dy * (p11 - p01)) / grid.resolution
    gy = ((1.0 - dx) * (p01 - p00) + dx * (p11 - p10)) / grid.resolution

    prob = np.where(inside, prob, 0.5)
    grad = np.column_stack([gx, gy])
    grad[~inside] = 0.0
    return prob, grad, inside


def occupancy_at(grid: OccupancyGrid, p: Vec2) -> float:
    """Interpolated occupancy probability at a world point.

    Raises :class:`OutOfMap` outside the grid interior (one-cell border);
    callers treating unknown space should substitute 0.5.
    """
    prob, _, inside = _interp_arrays(grid, p.as_array())
    if not inside[0]:
        raise OutOfMap(f"point ({p.x:.2f}, {p.y:.2f}) outside grid interior")
    return float(prob[0])


def occupancy_gradient(grid: OccupancyGrid, p: Vec2) -> Vec2:
    """Analytic spatial gradient of the interpolated occupancy (1/m)."""
    _, grad, inside = _interp_arrays(grid, p.as_array())
    if not inside[0]:
        raise OutOfMap(f"point ({p.x:.2f}, {p.y:.2f}) outside grid interior")
    return Vec2.from_array(grad[0])


@njit(cache=True)
def _trace_and_update(log_odds, cx, cy, ex, ey, mark_hit, l_free, l_occ, l_min, l_max):
    """Bresenham traversal per beam: free cells decremented, hits incremented."""
    width, height = log_odds.shape
    n = ex.shape[0]
    x0 = int(math.floor(cx))
    y0 = int(math.floor(cy))
    for k in range(n):
        x1 = int(math.floor(ex[k]))
        y1 = int(math.floor(ey[k]))
        dx = abs(x1 - x0)
        dy = abs(y1 - y0)
        sx = 1 if x0 < x1 else -1
        sy = 1 if y0 < y1 else -1
        err = dx - dy
        x, y = x0, y0
        while not (x == x1 and y == y1):
            if 0 <= x < width and 0 <= y < height:
                v = log_odds[x, y] + l_free
                log_odds[x, y] = v if v > l_min else l_min
            e2 = 2 * err
            if e2 > -dy:
                err -= dy
                x += sx
            if e2 < dx:
                err += dx
                y += sy
        if mark_hit[k] and 0 <= x1 < width and 0 <= y1 < height:
            v = log_odds[x1, y1] + l_occ
            log_odds[x1, y1] = v if v < l_max else l_max


def integrate_scan(grid: OccupancyGrid, robot_pose: Pose2, scan: Scan) -> OccupancyGrid:
    """Fold one scan into the grid at the given pose (in place).

    Cells along each valid beam get the free-space decrement; the endpoint
    cell gets the occupancy increment. Beams leaving the grid are truncated
    at the boundary and integrate free space only.
    """
    if not (math.isfinite(robot_pose.x) and math.isfinite(robot_pose.y)):
        raise ValueError("robot pose must be finite")
    pts = scan_endpoints(scan)
    if pts.shape[0] == 0:
        return grid
    c, s = math.cos(robot_pose.theta), math.sin(robot_pose.theta)
    world = pts @ np.array([[c, s], [-s, c]]) + [robot_pose.x, robot_pose.y]

    origin = grid.origin.as_array()
    res = grid.resolution
    start = (np.array([robot_pose.x, robot_pose.y]) - origin) / res
    cells = (world - origin) / res

    # Truncate beams at the grid boundary; truncated beams mark no hit.
    robot = start.copy()
    deltas = cells - robot
    tmax = np.ones(cells.shape[0])
    hi = np.array([grid.width - 1e-9, grid.height - 1e-9])
    for axis in range(2):
        d = deltas[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_low = (0.0 - robot[axis]) / d
            t_high = (hi[axis] - robot[axis]) / d
        t_exit = np.where(d > 0, t_high, np.where(d < 0, t_low, np.inf))
        tmax = np.minimum(tmax, t_exit)
    tmax = np.clip(tmax, 0.0, 1.0)
    mark_hit = tmax >= 1.0
    ends = robot + deltas * tmax[:, None]

    _trace_and_update(
        grid.log_odds,
        start[0],
        start[1],
        np.ascontiguousarray(ends[:, 0]),
        np.ascontiguousarray(ends[:, 1]),
        mark_hit,
        L_FREE,
        L_OCC,
        L_MIN,
        L_MAX,
    )
    return grid


@dataclass(slots=True)
class GridPyramid:
    """Stack of grids over one world extent, resolution doubling per level.

    Level 0 is the finest. Each level is maintained independently by
    integrating the same scans at its own resolution rather than by
    downsampling, so coarse levels stay valid occupancy estimates.
    """

    levels: list[OccupancyGrid]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")

    @property
    def finest(self) -> OccupancyGrid:
        return self.levels[0]

    def integrate(self, robot_pose: Pose2, scan: Scan) -> None:
        for level in self.levels:
            integrate_scan(level, robot_pose, scan)


def make_grid(extent: tuple[float, float, float, float], resolution: float) -> OccupancyGrid:
    """Empty grid covering a world-aligned extent (xmin, ymin, xmax, ymax)."""
    xmin, ymin, xmax, ymax = extent
    width = max(2, int(math.ceil((xmax - xmin) / resolution)))
    height = max(2, int(math.ceil((ymax - ymin) / resolution)))
    return OccupancyGrid(resolution, Vec2(xmin, ymin), width, height)


def build_pyramid(finest: OccupancyGrid, levels: int) -> GridPyramid:
    """Pyramid sharing the finest grid's extent, each level twice as coarse."""
    if levels < 1:
        raise ValueError("pyramid needs at least one level")
    extent = finest.world_extent()
    grids = [finest]
    for k in range(1, levels):
        grids.append(make_grid(extent, finest.resolution * 2**k))
    return GridPyramid(grids)


def write_pgm(grid: OccupancyGrid, path: str) -> None:
    """Export the grid as binary PGM (P5) with a text sidecar header.

    255 = free, 0 = occupied, 127 = unknown; image row 0 is maximum y.
    The sidecar ``<path>.meta`` records resolution and origin.
    """
    prob = grid.probabilities()
    img = np.full((grid.height, grid.width), 127, dtype=np.uint8)
    occ = prob.T > 0.5 + UNKNOWN_BAND
    free = prob.T < 0.5 - UNKNOWN_BAND
    img[occ] = 0
    img[free] = 255
    img = img[::-1, :]  # row 0 at maximum y

    with open(path, "wb") as f:
        f.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    with open(path + ".meta", "w", encoding="ascii") as f:
        f.write(f"resolution_m: {grid.resolution}\n")
        f.write(f"origin_x_m: {grid.origin.x}\n")
        f.write(f"origin_y_m: {grid.origin.y}\n")
        f.write(f"width_cells: {grid.width}\n")
        f.write(f"height_cells: {grid.height}\n")


def occupied_extent_x(grid: OccupancyGrid) -> float:
    """Length along x spanned by confidently occupied cells (meters)."""
    occ = grid.log_odds > math.log((0.5 + UNKNOWN_BAND) / (0.5 - UNKNOWN_BAND))
    cols = np.nonzero(occ.any(axis=1))[0]
    if cols.size == 0:
        return 0.0
    return float((cols[-1] - cols[0] + 1) * grid.resolution)

"""Cooperative range-only SLAM: UWB peer ranging fused with 2D LiDAR."""

from .ekf import (
    Belief,
    MotionModel,
    RangeMeasurement,
    RangeSet,
    SensorNoise,
    add_beacon,
    bootstrap_geometry,
    build_transition,
    gauge_fix,
    measurement_jacobian,
    nlos_gate,
    predict,
    remove_beacon,
    update,
)
from .geometry import (
    GaugeFrame,
    Pose2,
    StateVector,
    StationaryRobot,
    Vec2,
    heading_from_velocity,
    pairwise_range,
    rigid_transform,
)
from .mapping import (
    GridPyramid,
    OccupancyGrid,
    Scan,
    build_pyramid,
    integrate_scan,
    occupancy_at,
    occupancy_gradient,
    scan_endpoints,
)
from .matcher import (
    FusionConfig,
    MatchOffset,
    MatchState,
    apply_correction,
    fused_objective,
    match_scan,
    normal_equation_terms,
    solve_offset,
)
from .metrics import MetricsReport, compute_metrics
from .pipeline import SlamSession, SessionConfig, execute_scenario
from .sim import (
    BeaconScript,
    Scenario,
    SensorSpec,
    TrajectoryScript,
    World,
    raycast,
    sample_uwb_ranges,
    step_scenario,
)

__version__ = "0.1.0"

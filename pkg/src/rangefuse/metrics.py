"""Run evaluation: gauge-free error metrics against simulator ground truth.

Estimates live in the beacon-anchored gauge frame, so every metric is
computed after the best rigid alignment (rotation, translation and, if it
helps, reflection) of the estimated beacon constellation onto the true one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .pipeline import StepRecord

#: Steps excluded from metrics while the filter converges from bootstrap.
METRICS_SKIP_STEPS = 50


class EmptyStream(Exception):
    """No overlapping estimate/truth samples to evaluate."""


@dataclass(slots=True)
class MetricsReport:
    """Scenario-level quality numbers, all in meters/milliseconds."""

    beacon_err_mean: float
    beacon_err_std: float
    robot_ate_rmse: float
    final_pose_err: float
    corridor_length_est: float | None = None
    mean_step_ms: float | None = None

    def to_json_dict(self) -> dict:
        """Deterministic fields only; timing is reported separately."""
        d = asdict(self)
        d.pop("mean_step_ms")
        return d

    @classmethod
    def from_json_dict(cls, data: dict, mean_step_ms: float | None = None) -> "MetricsReport":
        return cls(mean_step_ms=mean_step_ms, **data)


def fit_alignment(source: np.ndarray, target: np.ndarray):
    """Best orthogonal transform (reflection allowed) mapping source onto target.

    Returns (R, t) minimizing RMS of ||R s + t - g|| over paired points.
    """
    source = np.atleast_2d(source)
    target = np.atleast_2d(target)
    if source.shape != target.shape or source.shape[0] < 2:
        raise ValueError("need at least two paired points to align")
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    t = ct - r @ cs
    return r, t


def apply_alignment(r: np.ndarray, t: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.atleast_2d(points) @ r.T + t


def compute_metrics(
    records: list[StepRecord], skip_steps: int = METRICS_SKIP_STEPS
) -> MetricsReport:
    """Errors after rigidly aligning the estimated constellation to truth.

    A single alignment is fitted on the window-averaged positions of beacons
    present in at least half of the evaluated steps, then applied to all
    estimates (beacons and robot). Beacon errors average over time steps and
    beacons; the robot error is an RMS over the window.
    """
    window = [r for r in records[skip_steps:] if r.est_pose is not None]
    if not window:
        raise EmptyStream("no post-bootstrap estimates to evaluate")

    counts: dict[int, int] = {}
    sums_est: dict[int, np.ndarray] = {}
    sums_true: dict[int, np.ndarray] = {}
    for rec in window:
        for b, est in rec.est_beacons.items():
            if b not in rec.true_beacons:
                continue
            counts[b] = counts.get(b, 0) + 1
            sums_est[b] = sums_est.get(b, 0.0) + np.asarray(est)
            sums_true[b] = sums_true.get(b, 0.0) + np.asarray(rec.true_beacons[b])
    anchor_ids = sorted(b for b, c in counts.items() if c >= len(window) // 2)
    if len(anchor_ids) < 2:
        raise EmptyStream("fewer than two persistent beacons to align on")

    mean_est = np.array([sums_est[b] / counts[b] for b in anchor_ids])
    mean_true = np.array([sums_true[b] / counts[b] for b in anchor_ids])
    r, t = fit_alignment(mean_est, mean_true)

    beacon_errors: list[float] = []
    robot_errors: list[float] = []
    for rec in window:
        for b, est in rec.est_beacons.items():
            if b not in rec.true_beacons:
                continue
            aligned = r @ np.asarray(est) + t
            beacon_errors.append(float(np.linalg.norm(aligned - rec.true_beacons[b])))
        aligned_robot = r @ np.asarray(rec.est_pose[:2]) + t
        true_xy = np.array([rec.true_pose.x, rec.true_pose.y])
        robot_errors.append(float(np.linalg.norm(aligned_robot - true_xy)))

    if not beacon_errors:
        raise EmptyStream("no beacon estimate/truth overlap in the window")

    return MetricsReport(
        beacon_err_mean=float(np.mean(beacon_errors)),
        beacon_err_std=float(np.std(beacon_errors)),
        robot_ate_rmse=float(np.sqrt(np.mean(np.square(robot_errors)))),
        final_pose_err=float(robot_errors[-1]),
    )


def write_metrics(report: MetricsReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_metrics(path: str, timing_path: str | None = None) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    mean_step_ms = None
    if timing_path is not None:
        with open(timing_path, "r", encoding="utf-8") as f:
            mean_step_ms = json.load(f).get("mean_step_ms")
    return MetricsReport.from_json_dict(data, mean_step_ms=mean_step_ms)


def format_float(value: float) -> str:
    """Six significant digits, the precision used in CSV artifacts."""
    if value != value:  # nan
        return "nan"
    return f"{value:.6g}"

"""Command-line harness: run scenarios, sweep gamma, export maps.

Exit codes: 0 ok, 2 bad configuration, 3 scenario failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from .mapping import occupied_extent_x, write_pgm
from .metrics import EmptyStream, MetricsReport, compute_metrics, format_float, write_metrics
from .pipeline import ABLATIONS, RunResult, ScenarioError, execute_scenario
from .sim import BUILTIN_SCENARIOS, Scenario, load_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCENARIO = 3
EXIT_INTERNAL = 4


class ConfigError(Exception):
    """Malformed scenario file or inconsistent command-line flags."""


@dataclass(slots=True)
class RunConfig:
    """One pipeline execution: scenario, matcher weight, ablation, output."""

    scenario_path: str
    gamma: float | None = None
    ablation: str = "full"
    output_dir: str | None = None
    seed_override: int | None = None

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")


def _load(cfg: RunConfig) -> Scenario:
    try:
        scenario = load_scenario(cfg.scenario_path)
    except FileNotFoundError as e:
        raise ConfigError(f"scenario not found: {cfg.scenario_path}") from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed scenario {cfg.scenario_path}: {e}") from e
    if cfg.seed_override is not None:
        scenario = replace(scenario, seed=cfg.seed_override)
    return scenario


def _output_dir(cfg: RunConfig, scenario: Scenario) -> str:
    out = cfg.output_dir or os.path.join("runs", f"{scenario.name}_{cfg.ablation}")
    os.makedirs(out, exist_ok=True)
    return out


def _write_trajectory(path: str, result: RunResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "true_x", "true_y", "true_theta", "est_x", "est_y", "est_theta"])
        for rec in result.records:
            est = rec.est_pose if rec.est_pose is not None else (math.nan,) * 3
            writer.writerow(
                [format_float(v) for v in (rec.time, rec.true_pose.x, rec.true_pose.y,
                                            rec.true_pose.theta, *est)]
            )


def _write_beacons(path: str, result: RunResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "beacon_id", "est_x", "est_y"])
        for rec in result.records:
            for beacon_id in sorted(rec.est_beacons):
                x, y = rec.est_beacons[beacon_id]
                writer.writerow(
                    [format_float(rec.time), beacon_id, format_float(x), format_float(y)]
                )


def run_scenario(cfg: RunConfig) -> MetricsReport:
    """Execute one configuration and write all artifacts to the output dir."""
    scenario = _load(cfg)
    out = _output_dir(cfg, scenario)
    result = execute_scenario(scenario, ablation=cfg.ablation, gamma=cfg.gamma)

    try:
        report = compute_metrics(result.records)
    except EmptyStream as e:
        raise ScenarioError(f"metrics unavailable: {e}") from e
    report.corridor_length_est = occupied_extent_x(result.session.pyramid.finest)
    timings = result.timings_ms
    report.mean_step_ms = float(np.mean(timings)) if timings else None

    write_pgm(result.session.pyramid.finest, os.path.join(out, "map.pgm"))
    _write_trajectory(os.path.join(out, "trajectory.csv"), result)
    _write_beacons(os.path.join(out, "beacons.csv"), result)
    write_metrics(report, os.path.join(out, "metrics.json"))
    with open(os.path.join(out, "timing.json"), "w", encoding="utf-8") as f:
        json.dump({"mean_step_ms": report.mean_step_ms, "steps": len(timings)}, f, indent=2)
        f.write("\n")
    return report


def gamma_sweep(cfg: RunConfig, gammas: list[float]) -> list[dict]:
    """Run the scenario once per gamma; errors fail the row, not the sweep."""
    if not gammas:
        raise ConfigError("sweep needs at least one gamma")
    rows = []
    for gamma in gammas:
        row_cfg = replace(
            cfg,
            gamma=gamma,
            output_dir=os.path.join(cfg.output_dir or "runs/sweep", f"gamma_{gamma:g}"),
        )
        try:
            report = run_scenario(row_cfg)
            rows.append(
                {
                    "gamma": gamma,
                    "beacon_err_mean": report.beacon_err_mean,
                    "robot_ate_rmse": report.robot_ate_rmse,
                    "mean_step_ms": report.mean_step_ms,
                    "error": "",
                }
            )
        except (ConfigError, ScenarioError) as e:
            rows.append(
                {
                    "gamma": gamma,
                    "beacon_err_mean": math.nan,
                    "robot_ate_rmse": math.nan,
                    "mean_step_ms": math.nan,
                    "error": str(e),
                }
            )
    return rows


def _write_sweep_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["gamma", "beacon_err_mean", "robot_ate_rmse", "mean_step_ms", "error"])
        for row in rows:
            writer.writerow(
                [
                    format_float(row["gamma"]),
                    format_float(row["beacon_err_mean"]),
                    format_float(row["robot_ate_rmse"]),
                    format_float(row["mean_step_ms"] if row["mean_step_ms"] is not None else math.nan),
                    row["error"],
                ]
            )


def export_map(cfg: RunConfig) -> str:
    """Run the scenario and write only the occupancy map artifacts."""
    scenario = _load(cfg)
    out = _output_dir(cfg, scenario)
    result = execute_scenario(scenario, ablation=cfg.ablation, gamma=cfg.gamma)
    path = os.path.join(out, "map.pgm")
    write_pgm(result.session.pyramid.finest, path)
    return path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rangefuse",
        description="Range-only SLAM runs over simulated UWB + LiDAR scenarios.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument(
            "scenario",
            help=f"scenario JSON path or built-in name ({', '.join(sorted(BUILTIN_SCENARIOS))})",
        )
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--ablation", default="full", choices=ABLATIONS)
        p.add_argument("--gamma", type=float, default=None, help="override the fusion weight")

    run_p = sub.add_parser("run", help="run one scenario and write all artifacts")
    add_common(run_p)

    sweep_p = sub.add_parser("sweep", help="run the scenario once per gamma value")
    add_common(sweep_p)
    sweep_p.add_argument(
        "--gammas", required=True, help="comma-separated gamma values, e.g. 1e-6,0.65"
    )

    map_p = sub.add_parser("export-map", help="run the scenario and write only the map")
    add_common(map_p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig(
            scenario_path=args.scenario,
            gamma=args.gamma,
            ablation=args.ablation,
            output_dir=args.out,
            seed_override=args.seed,
        )
        if args.command == "run":
            report = run_scenario(cfg)
            print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
        elif args.command == "sweep":
            try:
                gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
            except ValueError as e:
                raise ConfigError(f"bad --gammas list: {args.gammas!r}") from e
            rows = gamma_sweep(cfg, gammas)
            out = cfg.output_dir or "runs/sweep"
            os.makedirs(out, exist_ok=True)
            path = os.path.join(out, "sweep.csv")
            _write_sweep_csv(path, rows)
            print(path)
            if any(row["error"] for row in rows):
                return EXIT_SCENARIO
        elif args.command == "export-map":
            print(export_map(cfg))
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_SCENARIO
    except Exception as e:  # pragma: no cover - safety net
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

"""Accuracy, joint and diversity metrics, the drivable-area raster and run evaluation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import DataError
from geometry import to_local
from models import METRIC_KEYS, LaneGraph, MetricReport, PolylineKind, Scenario
from scene import absolute_angle, mask_history

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-6
RF_FLOOR = 1e-6
ALPHA_BINS = ((0.0, 10.0, "0-10"), (10.0, 30.0, "10-30"), (30.0, 60.0, "30-60"), (60.0, np.inf, ">=60"))


@dataclass
class Forecast:
    """Model output at the last history step for every agent of a scenario"""

    scenario_id: str
    agent_ids: List[int]
    focal_indices: List[int]
    scored: np.ndarray
    origin_xy: np.ndarray
    origin_heading: np.ndarray
    finals_local: np.ndarray
    finals_global: np.ndarray
    proposals_global: np.ndarray
    probs: np.ndarray
    anchors_global: Optional[np.ndarray] = None
    frac_index: Optional[np.ndarray] = None


def displacement_errors(preds: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """[.., K, F] point-wise Euclidean errors of modes against gt [.., F, 2]"""
    diff = np.asarray(preds) - np.asarray(gt)[..., None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def accuracy_metrics(preds: np.ndarray, probs: np.ndarray, gt: np.ndarray, mr_threshold: float = 2.0) -> Dict[str, float]:
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > PROBABILITY_TOLERANCE:
        raise DataError(f"mode probabilities sum to {probs.sum():.9f}, expected 1")
    errors = displacement_errors(preds, gt)
    ade = errors.mean(axis=-1)
    fde = errors[:, -1]
    best = int(np.argmin(fde))
    min_fde = float(fde[best])
    return {
        "min_ade": float(ade.min()),
        "min_fde": min_fde,
        "mr": float(min_fde > mr_threshold),
        "brier_min_fde": min_fde + (1.0 - float(probs[best])) ** 2,
    }


def joint_metrics(preds: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """preds [N, K, F, 2], gt [N, F, 2]; agents share the mode index"""
    errors = displacement_errors(preds, gt)
    return {
        "min_joint_ade": float(errors.mean(axis=-1).mean(axis=0).min()),
        "min_joint_fde": float(errors[..., -1].mean(axis=0).min()),
    }


def angular_expansion(preds: np.ndarray):
    """(sum of pairwise angles, number of pairs) between endpoint - startpoint vectors"""
    vectors = np.asarray(preds)[:, -1] - np.asarray(preds)[:, 0]
    norms = np.hypot(vectors[:, 0], vectors[:, 1])
    total, pairs = 0.0, 0
    k = len(vectors)
    for i in range(k):
        for j in range(i + 1, k):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            cos = np.dot(vectors[i], vectors[j]) / (norms[i] * norms[j])
            total += float(np.arccos(np.clip(cos, -1.0, 1.0)))
            pairs += 1
    return total, pairs


def _inside_polygon(px: np.ndarray, py: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd rule for many points against one closed polygon"""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = polygon[-1]
    for x1, y1 in polygon:
        crosses = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (x0 - x1) * (py - y1) / (y0 - y1) + x1
        inside ^= crosses & (px < x_cross)
        x0, y0 = x1, y1
    return inside


class DrivableRaster:
    """Boolean occupancy grid of lane areas; cell (r, c) covers
    [x0 + c*cell, x0 + (c+1)*cell) x [y0 + r*cell, y0 + (r+1)*cell)"""

    def __init__(self, origin: Sequence[float], cell: float, grid: np.ndarray):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.cell = float(cell)
        self.grid = np.asarray(grid, dtype=bool)

    @classmethod
    def from_lane_graph(cls, lane_graph: LaneGraph, extra_points: Optional[np.ndarray] = None,
                        cell: float = 0.5, margin: float = 10.0) -> "DrivableRaster":
        points = [np.asarray(p.points, dtype=np.float64) for s in lane_graph.segments for p in s.polylines]
        if extra_points is not None:
            points.append(np.asarray(extra_points, dtype=np.float64).reshape(-1, 2))
        points = [p for p in points if len(p)]
        if not points:
            return cls((0.0, 0.0), cell, np.zeros((0, 0), dtype=bool))
        stacked = np.concatenate(points, axis=0)
        low = np.floor((stacked.min(axis=0) - margin) / cell) * cell
        high = stacked.max(axis=0) + margin
        cols, rows = np.ceil((high - low) / cell).astype(int) + 1
        raster = cls(low, cell, np.zeros((rows, cols), dtype=bool))
        cx = low[0] + (np.arange(cols) + 0.5) * cell
        cy = low[1] + (np.arange(rows) + 0.5) * cell
        grid_x, grid_y = np.meshgrid(cx, cy)
        for segment in lane_graph.segments:
            left = segment.boundary(PolylineKind.LEFT_BOUNDARY)
            right = segment.boundary(PolylineKind.RIGHT_BOUNDARY)
            if left is not None and right is not None:
                polygon = np.concatenate([np.asarray(left.points), np.asarray(right.points)[::-1]], axis=0)
                raster.grid |= _inside_polygon(grid_x, grid_y, polygon)
            centerline = segment.centerline()
            if centerline is not None:
                raster.mark(_densify(np.asarray(centerline.points, dtype=np.float64), 0.5 * cell))
        return raster

    def cells(self, points: np.ndarray):
        """(rows, cols, inside-grid mask) of points [.., 2]"""
        points = np.asarray(points, dtype=np.float64)
        idx = np.floor((points - self.origin) / self.cell).astype(np.int64)
        cols, rows = idx[..., 0], idx[..., 1]
        inside = (rows >= 0) & (rows < self.grid.shape[0]) & (cols >= 0) & (cols < self.grid.shape[1])
        return rows, cols, inside

    def mark(self, points: np.ndarray):
        rows, cols, inside = self.cells(points)
        self.grid[rows[inside], cols[inside]] = True

    def is_drivable(self, points: np.ndarray) -> np.ndarray:
        rows, cols, inside = self.cells(points)
        out = np.zeros(inside.shape, dtype=bool)
        out[inside] = self.grid[rows[inside], cols[inside]]
        return out

    @property
    def drivable_cells(self) -> int:
        return int(self.grid.sum())


def _densify(points: np.ndarray, spacing: float) -> np.ndarray:
    out = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        steps = max(int(np.ceil(np.hypot(*(b - a)) / spacing)), 1)
        frac = np.arange(1, steps + 1)[:, None] / steps
        out.append(a + frac * (b - a))
    return np.concatenate(out, axis=0)


def diversity_metrics(preds: np.ndarray, gt: np.ndarray, raster: DrivableRaster) -> Dict[str, float]:
    """RF, DAO, DAC and AAE of one agent's K global-frame modes"""
    fde = displacement_errors(preds, gt)[:, -1]
    rf = max(1.0, float(fde.mean()) / max(float(fde.min()), RF_FLOOR))
    drivable = raster.is_drivable(preds)
    rows, cols, _ = raster.cells(preds)
    touched = set(zip(rows[drivable].tolist(), cols[drivable].tolist()))
    total_cells = raster.drivable_cells
    aae_sum, aae_pairs = angular_expansion(preds)
    return {
        "rf": rf,
        "dao": len(touched) / total_cells if total_cells else 0.0,
        "dac": float(drivable.all(axis=-1).mean()),
        "aae": aae_sum / aae_pairs if aae_pairs else 0.0,
        "aae_sum": aae_sum,
        "aae_pairs": aae_pairs,
    }


@dataclass
class ScenarioScore:
    scenario_id: str
    kind: Optional[str]
    agents: List[Dict[str, float]] = field(default_factory=list)
    joint: Dict[str, float] = field(default_factory=dict)


def score_forecast(scenario: Scenario, forecast: Forecast, mr_threshold: float = 2.0, raster_cell: float = 0.5,
                   raster_margin: float = 10.0) -> ScenarioScore:
    if forecast.scenario_id != scenario.id:
        raise DataError(f"forecast for {forecast.scenario_id} scored against scenario {scenario.id}")
    h = scenario.history_steps
    positions = scenario.positions()
    gt_global = positions[:, h:]
    gt_local = to_local(gt_global, forecast.origin_xy[:, None, :], forecast.origin_heading[:, None])
    raster = DrivableRaster.from_lane_graph(scenario.map, positions.reshape(-1, 2), raster_cell, raster_margin)
    score = ScenarioScore(scenario.id, scenario.kind.value if scenario.kind is not None else None)
    for i in forecast.focal_indices:
        row = accuracy_metrics(forecast.finals_local[i], forecast.probs[i], gt_local[i], mr_threshold)
        row.update(diversity_metrics(forecast.finals_global[i], gt_global[i], raster))
        row["alpha_deg"] = float(np.degrees(absolute_angle(positions[i], h)))
        score.agents.append(row)
    scored = np.flatnonzero(forecast.scored)
    if len(scored):
        score.joint = joint_metrics(forecast.finals_local[scored], gt_local[scored])
        score.joint["num_agents"] = len(scored)
    return score


def _alpha_bin(alpha: float) -> str:
    for low, high, name in ALPHA_BINS:
        if low <= alpha < high:
            return name
    return ALPHA_BINS[-1][2]


def aggregate_scores(scores: Sequence[ScenarioScore], task: str, split: str = "val", mask_ratio: float = 0.0,
                     challenging: bool = False, parameter_count: Optional[int] = None) -> MetricReport:
    """Means over focal agents (marginal and diversity) and over scenarios (joint)"""
    agent_rows = [dict(row, scenario=s.scenario_id, kind=s.kind) for s in scores for row in s.agents]
    joint_rows = [dict(s.joint, scenario=s.scenario_id, kind=s.kind) for s in scores if s.joint]
    report = MetricReport(task=task, split=split, mask_ratio=mask_ratio, challenging=challenging,
                          parameter_count=parameter_count, num_scenarios=len(scores))
    agents = pd.DataFrame(agent_rows)
    joint = pd.DataFrame(joint_rows)
    values: Dict[str, float] = {}
    if len(agents):
        for key in ("min_ade", "min_fde", "mr", "brier_min_fde", "rf", "dao", "dac"):
            values[key] = float(agents[key].mean())
        pairs = int(agents["aae_pairs"].sum())
        values["aae"] = float(agents["aae_sum"].sum()) / pairs if pairs else 0.0
        report.num_focal_agents = len(agents)
        report.num_aae_pairs = pairs
        agents["alpha_bin"] = agents["alpha_deg"].map(_alpha_bin)
        for _, _, name in ALPHA_BINS:
            group = agents[agents["alpha_bin"] == name]
            if len(group):
                report.by_alpha[name] = {"min_fde": float(group["min_fde"].mean()), "count": int(len(group))}
    if len(joint):
        values["min_joint_ade"] = float(joint["min_joint_ade"].mean())
        values["min_joint_fde"] = float(joint["min_joint_fde"].mean())
        report.num_joint_agents = int(joint["num_agents"].sum())
    for key in METRIC_KEYS:
        if key in values:
            setattr(report, key, values[key])
    kinds = sorted({s.kind for s in scores if s.kind is not None})
    for kind in kinds:
        entry: Dict[str, float] = {}
        if len(agents):
            group = agents[agents["kind"] == kind]
            if len(group):
                entry["min_ade"] = float(group["min_ade"].mean())
                entry["min_fde"] = float(group["min_fde"].mean())
        if len(joint):
            group = joint[joint["kind"] == kind]
            if len(group):
                entry["min_joint_ade"] = float(group["min_joint_ade"].mean())
                entry["min_joint_fde"] = float(group["min_joint_fde"].mean())
                entry["count"] = int(len(group))
        report.by_kind[kind] = entry
    return report


def evaluate_run(model, scenarios: Sequence[Scenario], task: str = "joint", mr_threshold: float = 2.0,
                 raster_cell: float = 0.5, raster_margin: float = 10.0, mask_ratio: float = 0.0, mask_seed: int = 0,
                 workers: int = 1, split: str = "val", challenging: bool = False) -> MetricReport:
    """Forecast every scenario with ``model.forecast`` and aggregate in scenario order"""
    if not scenarios:
        raise DataError("cannot evaluate an empty dataset")

    def run(scenario: Scenario) -> ScenarioScore:
        observed = mask_history(scenario, mask_ratio, mask_seed) if mask_ratio > 0 else scenario
        return score_forecast(scenario, model.forecast(observed), mr_threshold, raster_cell, raster_margin)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(run, scenarios))
    else:
        scores = [run(s) for s in scenarios]
    count = model.parameter_count() if hasattr(model, "parameter_count") else None
    report = aggregate_scores(scores, task, split=split, mask_ratio=mask_ratio, challenging=challenging,
                              parameter_count=count)
    logger.info(f"evaluated {len(scores)} scenarios: minFDE {report.min_fde:.4f}, "
                f"minJointFDE {report.min_joint_fde:.4f}")
    return report

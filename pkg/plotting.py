"""Static SVG rendering of a scenario with its exported predictions.

Drawing coordinates are world meters; a single group flips the y axis so
numbers in the file are the scenario's own coordinates.
"""

import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from errors import DataError
from models import PolylineKind, PredictionRecord, Scenario

logger = logging.getLogger(__name__)

SVG_NS = "http://www.w3.org/2000/svg"
PADDING = 5.0
STYLE = """
.lane-centerline { fill: none; stroke: #b0b0b0; stroke-width: 0.15; stroke-dasharray: 1 1; }
.lane-boundary { fill: none; stroke: #606060; stroke-width: 0.2; }
.history { fill: none; stroke: #1f4e9c; stroke-width: 0.35; }
.ground-truth { fill: none; stroke: #2e8b57; stroke-width: 0.35; stroke-dasharray: 0.8 0.5; }
.proposal { fill: none; stroke: #f0a000; stroke-width: 0.15; opacity: 0.6; }
.prediction { fill: none; stroke: #d62728; stroke-width: 0.25; }
.anchor { fill: #7b1fa2; }
"""


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _points(points: Iterable[Sequence[float]]) -> str:
    return " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)


def _bounds(groups: Iterable[np.ndarray]) -> Tuple[float, float, float, float]:
    stacked = np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1, 2) for g in groups], axis=0)
    low = stacked.min(axis=0) - PADDING
    high = stacked.max(axis=0) + PADDING
    return float(low[0]), float(low[1]), float(high[0]), float(high[1])


def render_svg(scenario: Scenario, record: Optional[PredictionRecord] = None) -> ET.ElementTree:
    if record is not None and record.scenario_id != scenario.id:
        raise DataError(f"predictions are for scenario '{record.scenario_id}', not '{scenario.id}'")
    h = scenario.history_steps
    positions = scenario.positions()
    observed = scenario.observed_mask()

    groups = [positions.reshape(-1, 2)]
    groups += [np.asarray(p.points) for s in scenario.map.segments for p in s.polylines]
    if record is not None:
        for agent in record.agents:
            groups += [np.asarray(agent.finals), np.asarray(agent.proposals)]
    x0, y0, x1, y1 = _bounds(groups)

    ET.register_namespace("", SVG_NS)
    root = ET.Element(f"{{{SVG_NS}}}svg", {
        "viewBox": f"{_fmt(x0)} {_fmt(-y1)} {_fmt(x1 - x0)} {_fmt(y1 - y0)}",
        "width": "800",
        "height": str(int(round(800 * (y1 - y0) / max(x1 - x0, 1e-9)))),
        "data-scenario": scenario.id,
    })
    ET.SubElement(root, f"{{{SVG_NS}}}style").text = STYLE
    world = ET.SubElement(root, f"{{{SVG_NS}}}g", {"transform": "scale(1,-1)"})

    for segment in scenario.map.segments:
        for polyline in segment.polylines:
            css = "lane-centerline" if polyline.kind == PolylineKind.CENTERLINE else "lane-boundary"
            ET.SubElement(world, f"{{{SVG_NS}}}polyline", {
                "class": css, "points": _points(polyline.points), "data-segment": str(segment.id),
            })

    for n, agent in enumerate(scenario.agents):
        seen = positions[n, :h][observed[n]]
        if len(seen) >= 2:
            ET.SubElement(world, f"{{{SVG_NS}}}polyline", {
                "class": "history", "points": _points(seen), "data-agent": str(agent.id),
            })
        future = np.concatenate([positions[n, h - 1:h], positions[n, h:]], axis=0)
        ET.SubElement(world, f"{{{SVG_NS}}}polyline", {
            "class": "ground-truth", "points": _points(future), "data-agent": str(agent.id),
        })

    if record is not None:
        for agent in record.agents:
            for k, proposal in enumerate(agent.proposals):
                ET.SubElement(world, f"{{{SVG_NS}}}polyline", {
                    "class": "proposal", "points": _points(proposal),
                    "data-agent": str(agent.id), "data-mode": str(k),
                })
            for k, (final, prob) in enumerate(zip(agent.finals, agent.probs)):
                ET.SubElement(world, f"{{{SVG_NS}}}polyline", {
                    "class": "prediction", "points": _points(final),
                    "data-agent": str(agent.id), "data-mode": str(k), "data-prob": _fmt(prob),
                })
            for k, (ax, ay) in enumerate(agent.anchors or []):
                ET.SubElement(world, f"{{{SVG_NS}}}circle", {
                    "class": "anchor", "cx": _fmt(ax), "cy": _fmt(ay), "r": "0.4",
                    "data-agent": str(agent.id), "data-mode": str(k),
                })
    return ET.ElementTree(root)


def write_svg(scenario: Scenario, record: Optional[PredictionRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tree = render_svg(scenario, record)
    tree.write(path, encoding="utf-8", xml_declaration=True)
    logger.info(f"Wrote plot of {scenario.id} to {path}")
    return path

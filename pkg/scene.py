"""Scenario files, the synthetic scenario generator and scenario-level utilities."""

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from errors import ArgumentError, DataError, ScenarioParseError, VersionError
from geometry import to_global, wrap_angle
from models import (
    SCENARIO_FORMAT_VERSION, AgentCategory, AgentState, AgentTrack, LaneConnection, LaneGraph, LaneRelation,
    LaneSegment, Polyline, PolylineKind, Scenario, ScenarioKind,
)

logger = logging.getLogger(__name__)

LANE_WIDTH = 3.5
SEGMENT_LENGTH = 10.0
POINT_SPACING = 2.0
INTERACTION_DISTANCE = 5.0
MAX_ATTEMPTS = 20

AGENT_SHAPES = {
    AgentCategory.VEHICLE: (4.5, 1.9),
    AgentCategory.CYCLIST: (1.8, 0.6),
    AgentCategory.PEDESTRIAN: (0.6, 0.6),
}
KIND_CODES = {kind: code for code, kind in enumerate(ScenarioKind)}


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_scenario(scenario: Scenario, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(scenario.json(indent=1) + "\n")
    return path


def _describe_validation(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return f"{location}: {first['msg']}"


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read scenario file {path}: {e}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(str(path), f"line {e.lineno}, column {e.colno}: {e.msg}")
    if not isinstance(raw, dict):
        raise ScenarioParseError(str(path), "top level must be an object")
    version = raw.get("format_version")
    if version != SCENARIO_FORMAT_VERSION:
        raise VersionError(f"{path}: scenario format version {version!r}, expected {SCENARIO_FORMAT_VERSION}")
    try:
        scenario = Scenario.parse_obj(raw)
    except ValidationError as e:
        raise ScenarioParseError(str(path), _describe_validation(e))
    problems = scenario.map.centerline_problems()
    if problems:
        raise ScenarioParseError(str(path), f"map: {problems[0]}")
    return scenario


def scenario_roundtrip(scenario: Scenario, path) -> Scenario:
    """Save then load; the result equals the input bit for bit"""
    return load_scenario(save_scenario(scenario, path))


# ---------------------------------------------------------------------------
# scenario utilities
# ---------------------------------------------------------------------------

def transform_scenario(scenario: Scenario, angle: float, translation: Sequence[float]) -> Scenario:
    """Apply one rigid planar transform to every agent state and lane point"""
    origin = np.asarray(translation, dtype=np.float64)

    def move(points: np.ndarray) -> np.ndarray:
        return to_global(points, origin, angle)

    agents = []
    for agent in scenario.agents:
        xy = move(np.array([(s.x, s.y) for s in agent.states]))
        states = [
            AgentState(x=float(p[0]), y=float(p[1]), heading=wrap_angle(s.heading + angle), speed=s.speed,
                       velocity_dir=wrap_angle(s.velocity_dir + angle), observed=s.observed)
            for p, s in zip(xy, agent.states)
        ]
        agents.append(agent.copy(update={"states": states}))
    segments = []
    for segment in scenario.map.segments:
        polylines = [
            Polyline(kind=p.kind, points=[(float(x), float(y)) for x, y in move(np.array(p.points))])
            for p in segment.polylines
        ]
        segments.append(segment.copy(update={"polylines": polylines}))
    return scenario.copy(update={"agents": agents, "map": LaneGraph(segments=segments)})


def absolute_angle(positions: np.ndarray, history_steps: int) -> float:
    """Angle in radians between the history displacement and the future displacement"""
    positions = np.asarray(positions, dtype=np.float64)
    history = positions[history_steps - 1] - positions[0]
    future = positions[-1] - positions[history_steps - 1]
    if not np.any(history) or not np.any(future):
        return 0.0
    cross = history[0] * future[1] - history[1] * future[0]
    dot = history[0] * future[0] + history[1] * future[1]
    return float(math.atan2(abs(cross), dot))


def constant_velocity_rollout(track: AgentTrack, future_steps: int, history_steps: int, dt: float) -> np.ndarray:
    """Extrapolate the last observed velocity over the next ``future_steps`` steps.

    Steps between the last observed state and the end of the history are
    rolled through, so the result is aligned with the labelled future.
    """
    observed = [i for i, state in enumerate(track.states[:history_steps]) if state.observed]
    if len(observed) < 2:
        raise DataError(f"agent {track.id}: constant-velocity rollout needs 2 observed states, found {len(observed)}")
    last = observed[-1]
    state = track.states[last]
    velocity = state.speed * np.array([math.cos(state.velocity_dir), math.sin(state.velocity_dir)])
    offset = history_steps - 1 - last
    steps = np.arange(offset + 1, offset + future_steps + 1, dtype=np.float64)
    return np.array([state.x, state.y]) + steps[:, None] * dt * velocity


def constant_velocity_fde(scenario: Scenario, agent_index: int) -> float:
    track = scenario.agents[agent_index]
    rollout = constant_velocity_rollout(track, scenario.future_steps, scenario.history_steps, scenario.dt)
    end = track.states[-1]
    return float(np.hypot(rollout[-1, 0] - end.x, rollout[-1, 1] - end.y))


def interaction_steps(scenario: Scenario, agent_index: int, radius: float = INTERACTION_DISTANCE) -> int:
    """Largest number of timestamps any single other agent spends within ``radius`` of the given agent"""
    positions = scenario.positions()
    if positions.shape[0] < 2:
        return 0
    gaps = np.hypot(*(positions - positions[agent_index][None]).transpose(2, 0, 1))
    gaps[agent_index] = np.inf
    return int(np.sum(gaps <= radius, axis=1).max())


def select_challenging(scenarios: Iterable[Scenario], d_fde: float = 5.0, min_interaction_steps: int = 25,
                       alpha_min: float = 10.0) -> List[Scenario]:
    """Intersection scenarios where constant velocity fails, the focal agent interacts and turns.

    ``alpha_min`` is in degrees.
    """
    kept = []
    for scenario in scenarios:
        if scenario.kind != ScenarioKind.INTERSECTION:
            continue
        focal = scenario.agent_index(scenario.focal_ids[0])
        try:
            fde = constant_velocity_fde(scenario, focal)
        except DataError:
            continue
        if fde <= d_fde:
            continue
        if interaction_steps(scenario, focal) < min_interaction_steps:
            continue
        alpha = absolute_angle(scenario.positions()[focal], scenario.history_steps)
        if math.degrees(alpha) < alpha_min:
            continue
        kept.append(scenario)
    logger.debug(f"challenging filter kept {len(kept)} scenarios")
    return kept


def mask_history(scenario: Scenario, ratio: float, seed: int) -> Scenario:
    """Drop round(ratio * (H - 1)) history states per agent, never the last history step"""
    if not 0.0 <= ratio < 1.0:
        raise ArgumentError(f"mask ratio {ratio} outside [0, 1)")
    h = scenario.history_steps
    count = int(round(ratio * (h - 1)))
    if count == 0:
        return scenario
    rng = np.random.default_rng(np.random.SeedSequence([abs(int(seed)), zlib.crc32(scenario.id.encode())]))
    masked = scenario.copy(deep=True)
    for agent in masked.agents:
        candidates = [i for i in range(h - 1) if agent.states[i].observed]
        # keep at least one state besides the last history step
        drop = min(count, len(candidates) - 1)
        if drop <= 0:
            continue
        for i in sorted(rng.choice(candidates, size=drop, replace=False)):
            agent.states[int(i)].observed = False
    return masked


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class Route:
    """Planar path of constant-curvature pieces, parametrized by arc length.

    Before the start and after the last piece the path continues straight.
    """

    x0: float
    y0: float
    heading0: float
    pieces: List[Tuple[float, float]]
    lane: bool = True
    _starts: List[Tuple[float, float, float, float]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        s, x, y, heading = 0.0, self.x0, self.y0, self.heading0
        for length, curvature in self.pieces:
            self._starts.append((s, x, y, heading))
            x, y, heading = _advance(x, y, heading, curvature, length)
            s += length
        self._starts.append((s, x, y, heading))

    def pose_at(self, s: float) -> Tuple[float, float, float]:
        if s < 0.0:
            return _advance(self.x0, self.y0, self.heading0, 0.0, s)
        for (start, x, y, heading), (length, curvature) in zip(self._starts, self.pieces):
            if s <= start + length:
                return _advance(x, y, heading, curvature, s - start)
        start, x, y, heading = self._starts[-1]
        return _advance(x, y, heading, 0.0, s - start)

    def poses(self, s: np.ndarray) -> np.ndarray:
        """[len(s), 3] array of (x, y, heading)"""
        return np.array([self.pose_at(float(v)) for v in np.asarray(s).reshape(-1)])

    def offset(self, lateral: float) -> "Route":
        """Parallel route shifted ``lateral`` meters to the left"""
        nx, ny = -math.sin(self.heading0), math.cos(self.heading0)
        pieces = []
        for length, curvature in self.pieces:
            scale = 1.0 - lateral * curvature
            pieces.append((length * scale, curvature / scale if curvature else 0.0))
        return Route(self.x0 + lateral * nx, self.y0 + lateral * ny, self.heading0, pieces, self.lane)


def _advance(x: float, y: float, heading: float, curvature: float, length: float) -> Tuple[float, float, float]:
    if abs(curvature) < 1e-12:
        return x + length * math.cos(heading), y + length * math.sin(heading), heading
    end = heading + curvature * length
    return (x + (math.sin(end) - math.sin(heading)) / curvature,
            y - (math.cos(end) - math.cos(heading)) / curvature,
            end)


def _s_curve_curvature(length: float, shift: float) -> float:
    """Curvature of two opposite arcs of ``length`` each that shift a path sideways by ``shift``"""
    lo, hi = 1e-9, math.pi / (2.0 * length)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if 2.0 * (1.0 - math.cos(mid * length)) / mid < shift:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class Actor:
    route: Route
    s: np.ndarray
    speed: np.ndarray
    category: AgentCategory = AgentCategory.VEHICLE


def _drive(rng: np.random.Generator, steps: int, dt: float, speed: float, accel: float, noise: float) -> Tuple[np.ndarray, np.ndarray]:
    """Arc-length and speed profiles with bounded acceleration noise, starting at s = 0"""
    s = np.zeros(steps)
    v = np.zeros(steps)
    v[0] = speed
    for i in range(steps - 1):
        a = accel + (rng.uniform(-noise, noise) if noise else 0.0)
        s[i + 1] = s[i] + v[i] * dt
        v[i + 1] = max(v[i] + a * dt, 0.0)
    return s, v


def _place(route: Route, s: np.ndarray, v: np.ndarray, at_step: int, arc: float,
           category: AgentCategory = AgentCategory.VEHICLE) -> Actor:
    """Shift a profile so the actor is at arc length ``arc`` on ``at_step``"""
    return Actor(route, s + (arc - s[at_step]), v, category)


class ScenarioGenerator:
    """Deterministic synthetic scenes of agents on constant-curvature routes"""

    def __init__(self, history_steps: int = 10, future_steps: int = 15, sample_rate_hz: float = 10.0):
        if history_steps < 2 or future_steps < 2:
            raise ArgumentError("history and future need at least 2 steps each")
        self.history_steps = history_steps
        self.future_steps = future_steps
        self.sample_rate_hz = sample_rate_hz
        self.dt = 1.0 / sample_rate_hz
        self.steps = history_steps + future_steps

    def generate(self, kind, seed: int) -> Scenario:
        kind = ScenarioKind(kind)
        if seed < 0:
            raise ArgumentError(f"seed must be non-negative, got {seed}")
        build = {
            ScenarioKind.FOLLOW: self._follow,
            ScenarioKind.INTERSECTION: self._intersection,
            ScenarioKind.MERGE: self._merge,
            ScenarioKind.CURVE: self._curve,
        }[kind]
        actors = None
        for attempt in range(MAX_ATTEMPTS):
            rng = np.random.default_rng(np.random.SeedSequence([seed, KIND_CODES[kind], attempt]))
            actors = build(rng, canonical=False)
            if self._accept(kind, actors):
                break
        else:
            logger.warning(f"{kind.value}-{seed}: no sampled layout met the scenario checks, using the canonical layout")
            rng = np.random.default_rng(np.random.SeedSequence([seed, KIND_CODES[kind], MAX_ATTEMPTS]))
            actors = build(rng, canonical=True)
        scenario = self._assemble(f"{kind.value}-{seed:06d}", kind, actors)
        angle = float(rng.uniform(-math.pi, math.pi))
        shift = rng.uniform(-100.0, 100.0, size=2)
        return transform_scenario(scenario, angle, shift)

    # -- acceptance checks --------------------------------------------------

    def _tracks(self, actors: List[Actor]) -> np.ndarray:
        return np.stack([actor.route.poses(actor.s) for actor in actors])

    def _accept(self, kind: ScenarioKind, actors: List[Actor]) -> bool:
        poses = self._tracks(actors)
        if kind in (ScenarioKind.INTERSECTION, ScenarioKind.MERGE):
            if _closest_pair_steps(poses[:, :, :2]) < math.ceil(self.steps / 2):
                return False
        if kind == ScenarioKind.INTERSECTION:
            headings = poses[:, self.history_steps - 1, 2]
            gaps = np.abs(wrap_angle(headings[:, None] - headings[None, :]))
            if gaps.max() < math.radians(60.0):
                return False
        if kind == ScenarioKind.CURVE:
            if math.degrees(absolute_angle(poses[0, :, :2], self.history_steps)) < 10.0:
                return False
        return True

    # -- scene families -----------------------------------------------------

    def _follow(self, rng: np.random.Generator, canonical: bool) -> List[Actor]:
        h, steps, dt = self.history_steps, self.steps, self.dt
        noise = 0.0 if canonical else 0.4
        main = Route(0.0, 0.0, 0.0, [(2000.0, 0.0)])
        actors = []
        speed = float(rng.uniform(8.0, 12.0))
        arc = 200.0
        for _ in range(int(rng.integers(2, 5))):
            s, v = _drive(rng, steps, dt, speed + float(rng.uniform(-0.5, 0.5)), 0.0, noise)
            actors.append(_place(main, s, v, h - 1, arc))
            arc -= float(rng.uniform(12.0, 20.0))
        if rng.uniform() < 0.5:
            side = main.offset(LANE_WIDTH)
            arc = 200.0 + float(rng.uniform(-10.0, 10.0))
            for _ in range(int(rng.integers(1, 3))):
                category = AgentCategory.CYCLIST if rng.uniform() < 0.2 else AgentCategory.VEHICLE
                side_speed = float(rng.uniform(4.0, 6.0)) if category == AgentCategory.CYCLIST else speed
                s, v = _drive(rng, steps, dt, side_speed, 0.0, noise)
                actors.append(_place(side, s, v, h - 1, arc, category))
                arc -= float(rng.uniform(12.0, 20.0))
        return actors

    def _intersection(self, rng: np.random.Generator, canonical: bool) -> List[Actor]:
        h, steps, dt = self.history_steps, self.steps, self.dt
        noise = 0.0 if canonical else 0.3
        radius = 12.0 if canonical else float(rng.uniform(8.0, 14.0))
        speed = 7.0 if canonical else float(rng.uniform(5.0, 9.0))
        turn_step = max(h - 1, math.ceil(steps / 2)) if canonical else h - 1 + int(rng.integers(0, 3))
        x_turn = 40.0 - radius - LANE_WIDTH / 2
        straight_in = 100.0
        left_turn = Route(x_turn - straight_in, LANE_WIDTH / 2, 0.0,
                          [(straight_in, 0.0), (radius * math.pi / 2, 1.0 / radius), (500.0, 0.0)])
        through = Route(x_turn - straight_in, -LANE_WIDTH / 2, 0.0, [(1000.0, 0.0)])
        crossing = Route(40.0 + LANE_WIDTH / 2, -200.0, math.pi / 2, [(1000.0, 0.0)])
        oncoming = Route(400.0, 1.5 * LANE_WIDTH, math.pi, [(1000.0, 0.0)])

        s, v = _drive(rng, steps, dt, speed, 0.0, noise)
        actors = [_place(left_turn, s, v, turn_step, straight_in)]
        offset = 0.0 if canonical else float(rng.uniform(-1.5, 1.5))
        s, v = _drive(rng, steps, dt, speed + (0.0 if canonical else float(rng.uniform(-0.3, 0.3))), 0.0, noise)
        actors.append(_place(through, s, v, turn_step, straight_in + offset))
        s, v = _drive(rng, steps, dt, float(rng.uniform(5.0, 9.0)), 0.0, noise)
        actors.append(_place(crossing, s, v, h - 1, 200.0 - float(rng.uniform(10.0, 25.0))))
        if rng.uniform() < 0.6:
            s, v = _drive(rng, steps, dt, float(rng.uniform(6.0, 10.0)), 0.0, noise)
            actors.append(_place(oncoming, s, v, h - 1, 400.0 - 40.0 - float(rng.uniform(20.0, 40.0))))
        if rng.uniform() < 0.5:
            s, v = _drive(rng, steps, dt, speed, 0.0, noise)
            actors.append(_place(left_turn, s, v, turn_step, straight_in - float(rng.uniform(12.0, 18.0))))
        if rng.uniform() < 0.4:
            sidewalk = Route(0.0, -2.5 * LANE_WIDTH, 0.0, [(1000.0, 0.0)], lane=False)
            s, v = _drive(rng, steps, dt, float(rng.uniform(1.0, 1.8)), 0.0, 0.0 if canonical else 0.1)
            actors.append(_place(sidewalk, s, v, h - 1, float(rng.uniform(10.0, 30.0)), AgentCategory.PEDESTRIAN))
        return actors

    def _merge(self, rng: np.random.Generator, canonical: bool) -> List[Actor]:
        h, steps, dt = self.history_steps, self.steps, self.dt
        noise = 0.0 if canonical else 0.3
        entry_angle = 0.3
        bend = 20.0
        accel_lane = 40.0
        change = 15.0
        kappa = _s_curve_curvature(change, LANE_WIDTH)
        pieces = [(60.0, 0.0), (bend, -entry_angle / bend), (accel_lane, 0.0),
                  (change, kappa), (change, -kappa), (1000.0, 0.0)]
        probe = Route(0.0, 0.0, entry_angle, pieces)
        xa, ya, _ = probe.pose_at(60.0 + bend)
        ramp = Route(-xa, -LANE_WIDTH - ya, entry_angle, pieces)
        main = Route(-300.0, 0.0, 0.0, [(2000.0, 0.0)])
        fast = main.offset(LANE_WIDTH)

        change_at = 60.0 + bend + accel_lane
        change_step = h - 1 + (0 if canonical else int(rng.integers(0, 4)))
        speed = 12.0 if canonical else float(rng.uniform(10.0, 14.0))
        s, v = _drive(rng, steps, dt, speed, 0.0 if canonical else 0.4, noise)
        actors = [_place(ramp, s, v, change_step, change_at)]
        # the merging vehicle lands roughly 8 m ahead of the yielding one
        merge_x = ramp.pose_at(change_at)[0] + 300.0
        yield_speed = speed - (0.0 if canonical else float(rng.uniform(0.0, 1.5)))
        s, v = _drive(rng, steps, dt, yield_speed, 0.0 if canonical else -0.5, noise)
        actors.append(_place(main, s, v, change_step, merge_x - 8.0))
        pair_speed = yield_speed + (0.0 if canonical else float(rng.uniform(-0.2, 0.2)))
        pair_offset = 0.0 if canonical else float(rng.uniform(-2.0, 2.0))
        s, v = _drive(rng, steps, dt, pair_speed, 0.0 if canonical else -0.5, 0.0 if canonical else 0.15)
        actors.append(_place(fast, s, v, change_step, merge_x - 8.0 + pair_offset))
        for _ in range(int(rng.integers(0, 3))):
            s, v = _drive(rng, steps, dt, float(rng.uniform(10.0, 14.0)), 0.0, noise)
            actors.append(_place(main, s, v, h - 1, merge_x + float(rng.uniform(15.0, 40.0))))
        return actors

    def _curve(self, rng: np.random.Generator, canonical: bool) -> List[Actor]:
        h, steps, dt = self.history_steps, self.steps, self.dt
        noise = 0.0 if canonical else 0.3
        speed = 10.0 if canonical else float(rng.uniform(6.0, 12.0))
        turn = math.pi / 2 if canonical else float(rng.uniform(math.pi / 4, math.pi / 2))
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        travel = speed * self.future_steps * dt
        radius = max(travel / turn if canonical else 0.7 * travel / turn, 2.0 * LANE_WIDTH)
        straight_in = 150.0
        road = Route(0.0, 0.0, 0.0, [(straight_in, 0.0), (radius * turn, direction / radius), (1000.0, 0.0)])
        turn_step = h - 1 if canonical else h - 1 + int(rng.integers(0, 2))
        s, v = _drive(rng, steps, dt, speed, 0.0, noise)
        actors = [_place(road, s, v, turn_step, straight_in)]
        arc = straight_in
        for _ in range(int(rng.integers(1, 3))):
            arc -= float(rng.uniform(12.0, 20.0))
            s, v = _drive(rng, steps, dt, speed + float(rng.uniform(-0.5, 0.5)), 0.0, noise)
            actors.append(_place(road, s, v, turn_step, arc))
        if rng.uniform() < 0.5:
            # the neighbour lane sits on the outside of the bend
            side = road.offset(-direction * LANE_WIDTH)
            s, v = _drive(rng, steps, dt, speed, 0.0, noise)
            actors.append(_place(side, s, v, turn_step, straight_in + float(rng.uniform(-15.0, 5.0))))
        return actors

    # -- assembly -----------------------------------------------------------

    def _assemble(self, scenario_id: str, kind: ScenarioKind, actors: List[Actor]) -> Scenario:
        agents = []
        for index, actor in enumerate(actors):
            poses = actor.route.poses(actor.s)
            length, width = AGENT_SHAPES[actor.category]
            states = [
                AgentState(x=float(x), y=float(y), heading=wrap_angle(float(heading)), speed=float(speed),
                           velocity_dir=wrap_angle(float(heading)), observed=True)
                for (x, y, heading), speed in zip(poses, actor.speed)
            ]
            agents.append(AgentTrack(id=index, category=actor.category, length=length, width=width, states=states))
        lane_map = build_lane_graph(actors)
        return Scenario(id=scenario_id, kind=kind, sample_rate_hz=self.sample_rate_hz,
                        history_steps=self.history_steps, future_steps=self.future_steps,
                        agents=agents, map=lane_map, focal_ids=[0])


def _closest_pair_steps(positions: np.ndarray) -> int:
    """Largest number of timestamps any single agent pair spends within the interaction distance"""
    best = 0
    for i in range(positions.shape[0]):
        for j in range(i + 1, positions.shape[0]):
            gaps = np.hypot(*(positions[i] - positions[j]).T)
            best = max(best, int(np.sum(gaps <= INTERACTION_DISTANCE)))
    return best


def build_lane_graph(actors: List[Actor]) -> LaneGraph:
    """Discretize every lane route the actors drive on into segments with boundaries and connectivity"""
    routes: List[Route] = []
    spans: Dict[int, List[float]] = {}
    for actor in actors:
        if not actor.route.lane:
            continue
        key = next((i for i, r in enumerate(routes) if r is actor.route), None)
        if key is None:
            routes.append(actor.route)
            key = len(routes) - 1
            spans[key] = [np.inf, -np.inf]
        spans[key][0] = min(spans[key][0], float(actor.s.min()) - 5.0)
        spans[key][1] = max(spans[key][1], float(actor.s.max()) + 5.0)

    records = []
    for key, route in enumerate(routes):
        lo, hi = spans[key]
        count = max(1, int(math.ceil((hi - lo) / SEGMENT_LENGTH)))
        edges = np.linspace(lo, hi, count + 1)
        chain = []
        for a, b in zip(edges[:-1], edges[1:]):
            points = max(2, int(math.ceil((b - a) / POINT_SPACING)) + 1)
            poses = route.poses(np.linspace(a, b, points))
            normal = np.stack([-np.sin(poses[:, 2]), np.cos(poses[:, 2])], axis=-1)
            center = poses[:, :2]
            records.append({
                "center": center,
                "left": center + normal * (LANE_WIDTH / 2),
                "right": center - normal * (LANE_WIDTH / 2),
                "heading": poses[:, 2],
            })
            chain.append(len(records) - 1)
        for position, segment in enumerate(chain):
            links = records[segment].setdefault("links", [])
            for hop in (1, 2):
                if position + hop < len(chain):
                    links.append((chain[position + hop], LaneRelation.SUCCESSOR, hop))
                if position - hop >= 0:
                    links.append((chain[position - hop], LaneRelation.PREDECESSOR, hop))

    # neighbours across routes: parallel segments about one lane apart
    mids = np.array([r["center"][len(r["center"]) // 2] for r in records]) if records else np.zeros((0, 2))
    mid_headings = np.array([r["heading"][len(r["heading"]) // 2] for r in records])
    for i in range(len(records)):
        for j in range(len(records)):
            if i == j or any(t == j for t, _, _ in records[i].get("links", [])):
                continue
            close = np.hypot(*(mids[i] - mids[j])) <= LANE_WIDTH + 1.0
            aligned = abs(wrap_angle(mid_headings[i] - mid_headings[j])) <= math.radians(30.0)
            if close and aligned:
                records[i].setdefault("links", []).append((j, LaneRelation.NEIGHBOR, 1))

    segments = []
    for index, record in enumerate(records):
        polylines = [
            Polyline(kind=PolylineKind.CENTERLINE, points=[(float(x), float(y)) for x, y in record["center"]]),
            Polyline(kind=PolylineKind.LEFT_BOUNDARY, points=[(float(x), float(y)) for x, y in record["left"]]),
            Polyline(kind=PolylineKind.RIGHT_BOUNDARY, points=[(float(x), float(y)) for x, y in record["right"]]),
        ]
        connections = [LaneConnection(target=t, relation=rel, hops=hop) for t, rel, hop in record.get("links", [])]
        segments.append(LaneSegment(id=index, polylines=polylines, connections=connections))
    return LaneGraph(segments=segments)


def generate_scenario(kind, seed: int, history_steps: int = 10, future_steps: int = 15,
                      sample_rate_hz: float = 10.0) -> Scenario:
    return ScenarioGenerator(history_steps, future_steps, sample_rate_hz).generate(kind, seed)

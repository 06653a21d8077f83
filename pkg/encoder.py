"""Scene graph construction, map/agent encoders and the agent-map attention.

All edge lists are built once per scenario from observed data only; they
never depend on parameters. Row conventions for flattened tensors:

* agent rows      a = n * H + t
* query rows      r = (n * H + t) * K + k
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import RunConfig
from errors import DataError
from geometry import NeighborIndex, edge_feature_matrix, one_hot, relative_edges, to_local
from layers import MLP, EdgeAttention, EdgeSet, Linear
from models import CATEGORY_CODES, POLYLINE_CODES, RELATION_CODES, LaneGraph, PolylineKind, Scenario
from numerics import DenseArray, ParamStore, reshape

logger = logging.getLogger(__name__)

AGENT_NODE_FEATURES = 5 + len(CATEGORY_CODES)
POLAR_EDGE_FEATURES = 5
POLYLINE_EDGE_FEATURES = POLAR_EDGE_FEATURES + len(POLYLINE_CODES)
LANE_EDGE_FEATURES = POLAR_EDGE_FEATURES + 1 + len(RELATION_CODES)
TEMPORAL_EDGE_FEATURES = POLAR_EDGE_FEATURES + 1


def polyline_reference(points) -> Tuple[float, float, float, float]:
    """(x, y, heading, arc length) at the arc-length midpoint; heading of the chord containing it"""
    pts = np.asarray(points, dtype=np.float64)
    chords = np.diff(pts, axis=0)
    lengths = np.hypot(chords[:, 0], chords[:, 1])
    total = float(lengths.sum())
    if total == 0.0:
        return float(pts[0, 0]), float(pts[0, 1]), 0.0, 0.0
    half = 0.5 * total
    cumulative = np.cumsum(lengths)
    i = min(int(np.searchsorted(cumulative, half)), len(lengths) - 1)
    while lengths[i] == 0.0:
        i -= 1
    frac = (half - (cumulative[i] - lengths[i])) / lengths[i]
    mid = pts[i] + frac * chords[i]
    return float(mid[0]), float(mid[1]), float(np.arctan2(chords[i, 1], chords[i, 0])), total


@dataclass
class MapContext:
    lane_xy: np.ndarray
    lane_heading: np.ndarray
    lane_length: np.ndarray
    polyline_length: np.ndarray
    edges: Dict[str, EdgeSet]

    @property
    def num_segments(self) -> int:
        return int(self.lane_xy.shape[0])


def prepare_map(lane_graph: LaneGraph) -> MapContext:
    """Reference poses of segments and polylines plus the two map edge sets"""
    lane_pose, poly_pose, poly_kind, poly_owner = [], [], [], []
    index_of = {segment.id: g for g, segment in enumerate(lane_graph.segments)}
    for g, segment in enumerate(lane_graph.segments):
        if not segment.polylines:
            raise DataError(f"lane segment {segment.id} has no polylines")
        centerline = segment.centerline()
        if centerline is None:
            raise DataError(f"lane segment {segment.id} has no centerline")
        lane_pose.append(polyline_reference(centerline.points))
        for polyline in segment.polylines:
            poly_pose.append(polyline_reference(polyline.points))
            poly_kind.append(POLYLINE_CODES[PolylineKind(polyline.kind)])
            poly_owner.append(g)
    lanes = np.array(lane_pose, dtype=np.float64).reshape(-1, 4)
    polys = np.array(poly_pose, dtype=np.float64).reshape(-1, 4)

    owner = np.array(poly_owner, dtype=np.int64)
    if len(owner):
        dist, direction, rel = relative_edges(polys[:, :2], polys[:, 2], lanes[owner, :2], lanes[owner, 2])
        features = edge_feature_matrix(dist, direction, rel, one_hot(poly_kind, len(POLYLINE_CODES)))
        polyline_edges = EdgeSet(np.arange(len(owner), dtype=np.int64), owner, features)
    else:
        polyline_edges = EdgeSet.empty(POLYLINE_EDGE_FEATURES)

    src, dst, hops, relations = [], [], [], []
    for g, segment in enumerate(lane_graph.segments):
        for connection in segment.connections:
            src.append(index_of[connection.target])
            dst.append(g)
            hops.append(connection.hops)
            relations.append(RELATION_CODES[connection.relation])
    if src:
        src_a, dst_a = np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)
        dist, direction, rel = relative_edges(lanes[src_a, :2], lanes[src_a, 2], lanes[dst_a, :2], lanes[dst_a, 2])
        extras = [np.array(hops, dtype=np.float64)] + one_hot(relations, len(RELATION_CODES))
        lane_edges = EdgeSet(src_a, dst_a, edge_feature_matrix(dist, direction, rel, extras))
    else:
        lane_edges = EdgeSet.empty(LANE_EDGE_FEATURES)

    return MapContext(
        lane_xy=lanes[:, :2].copy(), lane_heading=lanes[:, 2].copy(), lane_length=lanes[:, 3].copy(),
        polyline_length=polys[:, 3].copy(),
        edges={"map_polyline": polyline_edges, "map_lane": lane_edges},
    )


@dataclass
class SceneContext:
    """Parameter-free view of one scenario: frames, node features, edges and targets"""

    scenario_id: str
    kind: Optional[str]
    agent_ids: List[int]
    focal_indices: List[int]
    history_steps: int
    future_steps: int
    num_modes: int
    observed: np.ndarray
    frame_xy: np.ndarray
    frame_heading: np.ndarray
    node_features: np.ndarray
    map: MapContext
    scene_origin: np.ndarray
    scene_heading: float
    targets: np.ndarray
    target_mask: np.ndarray
    edges: Dict[str, EdgeSet] = field(default_factory=dict)
    lane_index: Optional[NeighborIndex] = None

    @property
    def num_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def supervised(self) -> np.ndarray:
        """[N, H] pairs with an observed frame and at least one valid target step"""
        return self.observed & self.target_mask.any(axis=-1)

    def query_rows(self, n: int, t: int) -> np.ndarray:
        k = self.num_modes
        start = (n * self.history_steps + t) * k
        return np.arange(start, start + k, dtype=np.int64)


def _fill_frames(xy: np.ndarray, heading: np.ndarray, observed: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward-fill poses over unobserved history steps; leading gaps take the first observed pose"""
    xy = xy.copy()
    heading = heading.copy()
    for n in range(xy.shape[0]):
        seen = np.flatnonzero(observed[n])
        if len(seen) == 0:
            xy[n] = 0.0
            heading[n] = 0.0
            continue
        last = seen[0]
        for t in range(xy.shape[1]):
            if observed[n, t]:
                last = t
            else:
                xy[n, t] = xy[n, last]
                heading[n, t] = heading[n, last]
    return xy, heading


def _build_targets(positions: np.ndarray, observed: np.ndarray, frame_xy: np.ndarray, frame_heading: np.ndarray,
                   history_steps: int, future_steps: int) -> Tuple[np.ndarray, np.ndarray]:
    """Local-frame positions t+1..t+F for every (n, t) and their availability"""
    n_agents = positions.shape[0]
    targets = np.zeros((n_agents, history_steps, future_steps, 2))
    mask = np.zeros((n_agents, history_steps, future_steps), dtype=bool)
    available = np.concatenate([observed, np.ones((n_agents, future_steps), dtype=bool)], axis=1)
    for t in range(history_steps):
        window = slice(t + 1, t + 1 + future_steps)
        points = positions[:, window]
        steps = points.shape[1]
        local = to_local(points, frame_xy[:, t][:, None, :], frame_heading[:, t][:, None])
        targets[:, t, :steps] = local
        mask[:, t, :steps] = available[:, window]
    return targets, mask


def _polar(src_xy, src_heading, dst_xy, dst_heading, extras=()) -> np.ndarray:
    dist, direction, rel = relative_edges(src_xy, src_heading, dst_xy, dst_heading)
    return edge_feature_matrix(dist, direction, rel, extras)


def prepare_scene(scenario: Scenario, config: RunConfig) -> SceneContext:
    """Frames, node features, every proposal-stage edge set and supervision targets"""
    n_agents = scenario.num_agents
    h, f, k = scenario.history_steps, scenario.future_steps, config.num_modes
    if h != config.history_steps or f != config.future_steps:
        raise DataError(f"scenario {scenario.id} has H={h}, F={f}; the run expects "
                        f"H={config.history_steps}, F={config.future_steps}")
    positions = scenario.positions()
    observed = scenario.observed_mask()
    frame_xy, frame_heading = _fill_frames(positions[:, :h], scenario.headings()[:, :h], observed)

    speeds = scenario.speeds()[:, :h]
    rel_velocity = scenario.velocity_dirs()[:, :h] - scenario.headings()[:, :h]
    shape = np.array([(agent.length, agent.width) for agent in scenario.agents])
    category = np.array([CATEGORY_CODES[agent.category] for agent in scenario.agents])
    node_features = np.zeros((n_agents, h, AGENT_NODE_FEATURES))
    node_features[..., 0] = speeds
    node_features[..., 1] = np.cos(rel_velocity)
    node_features[..., 2] = np.sin(rel_velocity)
    node_features[..., 3:5] = shape[:, None, :]
    node_features[..., 5:] = np.eye(len(CATEGORY_CODES))[category][:, None, :]
    node_features[~observed] = 0.0

    map_ctx = prepare_map(scenario.map)
    focal = [scenario.agent_index(agent_id) for agent_id in scenario.focal_ids]
    targets, target_mask = _build_targets(positions, observed, frame_xy, frame_heading, h, f)
    ctx = SceneContext(
        scenario_id=scenario.id,
        kind=scenario.kind.value if scenario.kind is not None else None,
        agent_ids=[agent.id for agent in scenario.agents],
        focal_indices=focal,
        history_steps=h,
        future_steps=f,
        num_modes=k,
        observed=observed,
        frame_xy=frame_xy,
        frame_heading=frame_heading,
        node_features=node_features,
        map=map_ctx,
        scene_origin=frame_xy[focal[0], h - 1].copy(),
        scene_heading=float(frame_heading[focal[0], h - 1]),
        targets=targets,
        target_mask=target_mask,
        lane_index=NeighborIndex(map_ctx.lane_xy),
    )
    ctx.edges.update(map_ctx.edges)
    ctx.edges["agent_map"] = build_lane_query_edges(ctx, frame_xy, config.map_radius)
    ctx.edges["temporal"] = build_temporal_edges(ctx)
    ctx.edges["future"] = build_cross_time_edges(ctx, +1, config.future_radius)
    ctx.edges["history"] = build_cross_time_edges(ctx, -1, config.history_radius)
    ctx.edges["agent"] = build_agent_edges(ctx, frame_xy, config.agent_radius)
    ctx.edges["prediction_history"] = build_prediction_history_edges(ctx, frame_xy)
    ctx.edges["mode"] = build_mode_edges(ctx)
    logger.debug(f"prepared {scenario.id}: " + ", ".join(f"{name}={len(e)}" for name, e in ctx.edges.items()))
    return ctx


def _edge_set(src: List[np.ndarray], dst: List[np.ndarray], features: List[np.ndarray], width: int) -> EdgeSet:
    if not src:
        return EdgeSet.empty(width)
    return EdgeSet(np.concatenate(src).astype(np.int64), np.concatenate(dst).astype(np.int64),
                   np.concatenate(features, axis=0) if width else None)


def build_lane_query_edges(ctx: SceneContext, query_xy: np.ndarray, radius: float) -> EdgeSet:
    """Lane segment g -> every mode query of observed (n, t) within ``radius`` of ``query_xy[n, t]``"""
    lanes = ctx.map
    src, dst, features = [], [], []
    pairs = [(n, t) for n in range(ctx.num_agents) for t in range(ctx.history_steps) if ctx.observed[n, t]]
    hits = ctx.lane_index.query(np.array([query_xy[n, t] for n, t in pairs]).reshape(-1, 2), radius)
    for (n, t), near in zip(pairs, hits):
        if len(near) == 0:
            continue
        rows = ctx.query_rows(n, t)
        feats = _polar(lanes.lane_xy[near], lanes.lane_heading[near],
                       np.repeat(query_xy[n, t][None], len(near), axis=0),
                       np.full(len(near), ctx.frame_heading[n, t]))
        for row in rows:
            src.append(near)
            dst.append(np.full(len(near), row))
            features.append(feats)
    return _edge_set(src, dst, features, POLAR_EDGE_FEATURES)


def build_temporal_edges(ctx: SceneContext) -> EdgeSet:
    """Same agent, earlier observed timestamps t' < t -> queries at (n, t), with the time gap"""
    h = ctx.history_steps
    src, dst, features = [], [], []
    for n in range(ctx.num_agents):
        for t in range(1, h):
            if not ctx.observed[n, t]:
                continue
            earlier = np.flatnonzero(ctx.observed[n, :t])
            if len(earlier) == 0:
                continue
            feats = _polar(ctx.frame_xy[n, earlier], ctx.frame_heading[n, earlier],
                           np.repeat(ctx.frame_xy[n, t][None], len(earlier), axis=0),
                           np.full(len(earlier), ctx.frame_heading[n, t]),
                           [(t - earlier).astype(np.float64)])
            for row in ctx.query_rows(n, t):
                src.append(n * h + earlier)
                dst.append(np.full(len(earlier), row))
                features.append(feats)
    return _edge_set(src, dst, features, TEMPORAL_EDGE_FEATURES)


def build_cross_time_edges(ctx: SceneContext, shift: int, radius: float) -> EdgeSet:
    """Other observed agents at t + shift within ``radius`` -> queries at (n, t)"""
    h = ctx.history_steps
    src, dst, features = [], [], []
    for t in range(h):
        ts = t + shift
        if not 0 <= ts < h:
            continue
        sources = np.flatnonzero(ctx.observed[:, ts])
        if len(sources) == 0:
            continue
        index = NeighborIndex(ctx.frame_xy[sources, ts])
        for n in range(ctx.num_agents):
            if not ctx.observed[n, t]:
                continue
            near = sources[index.query(ctx.frame_xy[n, t], radius)[0]]
            near = near[near != n]
            if len(near) == 0:
                continue
            feats = _polar(ctx.frame_xy[near, ts], ctx.frame_heading[near, ts],
                           np.repeat(ctx.frame_xy[n, t][None], len(near), axis=0),
                           np.full(len(near), ctx.frame_heading[n, t]))
            for row in ctx.query_rows(n, t):
                src.append(near * h + ts)
                dst.append(np.full(len(near), row))
                features.append(feats)
    return _edge_set(src, dst, features, POLAR_EDGE_FEATURES)


def agent_pair_index(ctx: SceneContext, query_xy: np.ndarray, radius: float) -> List[Tuple[int, int, np.ndarray]]:
    """(t, n, neighbours m != n observed at t within radius) for observed (n, t)"""
    out = []
    for t in range(ctx.history_steps):
        present = np.flatnonzero(ctx.observed[:, t])
        if len(present) < 2:
            continue
        index = NeighborIndex(query_xy[present, t])
        for n in present:
            near = present[index.query(query_xy[n, t], radius)[0]]
            near = near[near != n]
            if len(near):
                out.append((t, int(n), near))
    return out


def build_agent_edges(ctx: SceneContext, frame_xy: np.ndarray, radius: float) -> EdgeSet:
    """Per (t, k): query (m, t, k) -> (n, t, k) for neighbouring observed agents"""
    h, k = ctx.history_steps, ctx.num_modes
    src, dst, features = [], [], []
    for t, n, near in agent_pair_index(ctx, frame_xy, radius):
        feats = _polar(frame_xy[near, t], ctx.frame_heading[near, t],
                       np.repeat(frame_xy[n, t][None], len(near), axis=0),
                       np.full(len(near), ctx.frame_heading[n, t]))
        for mode in range(k):
            src.append((near * h + t) * k + mode)
            dst.append(np.full(len(near), (n * h + t) * k + mode))
            features.append(feats)
    return _edge_set(src, dst, features, POLAR_EDGE_FEATURES)


def build_prediction_history_edges(ctx: SceneContext, frame_xy: np.ndarray) -> EdgeSet:
    """Per (n, k): query (n, t', k) -> (n, t, k) for observed t' < t, with the time gap"""
    h, k = ctx.history_steps, ctx.num_modes
    src, dst, features = [], [], []
    for n in range(ctx.num_agents):
        for t in range(1, h):
            if not ctx.observed[n, t]:
                continue
            earlier = np.flatnonzero(ctx.observed[n, :t])
            if len(earlier) == 0:
                continue
            feats = _polar(frame_xy[n, earlier], ctx.frame_heading[n, earlier],
                           np.repeat(frame_xy[n, t][None], len(earlier), axis=0),
                           np.full(len(earlier), ctx.frame_heading[n, t]),
                           [(t - earlier).astype(np.float64)])
            for mode in range(k):
                src.append((n * h + earlier) * k + mode)
                dst.append(np.full(len(earlier), (n * h + t) * k + mode))
                features.append(feats)
    return _edge_set(src, dst, features, TEMPORAL_EDGE_FEATURES)


def build_mode_edges(ctx: SceneContext) -> EdgeSet:
    """Per observed (n, t): every other mode -> mode, no edge features"""
    k = ctx.num_modes
    if k < 2:
        return EdgeSet.empty()
    pairs = [(a, b) for b in range(k) for a in range(k) if a != b]
    local_src = np.array([a for a, _ in pairs], dtype=np.int64)
    local_dst = np.array([b for _, b in pairs], dtype=np.int64)
    src, dst = [], []
    for n in range(ctx.num_agents):
        for t in range(ctx.history_steps):
            if ctx.observed[n, t]:
                base = (n * ctx.history_steps + t) * k
                src.append(base + local_src)
                dst.append(base + local_dst)
    return _edge_set(src, dst, [], 0)


@dataclass
class EmbeddingSet:
    map_emb: DenseArray
    agent_emb: DenseArray
    edges: Dict[str, EdgeSet]

    def agent_rows(self) -> DenseArray:
        n, h, d = self.agent_emb.shape
        return reshape(self.agent_emb, (n * h, d))


class SceneEncoder:
    """Map encoder, agent encoder, mode-query seeding and agent-map attention"""

    def __init__(self, store: ParamStore, config: RunConfig, rng: np.random.Generator):
        d, heads = config.hidden_dim, config.num_heads
        self.hidden_dim = d
        self.num_modes = config.num_modes
        self.segment_length = MLP(store, "encoder.segment_length", 1, d, d, rng)
        self.polyline_length = MLP(store, "encoder.polyline_length", 1, d, d, rng)
        self.polyline_attention = EdgeAttention(store, "encoder.polyline_to_segment", d, heads,
                                                POLYLINE_EDGE_FEATURES, rng)
        self.lane_attention = EdgeAttention(store, "encoder.segment_to_segment", d, heads,
                                            LANE_EDGE_FEATURES, rng, self_attention=True)
        self.agent_node = MLP(store, "encoder.agent_node", AGENT_NODE_FEATURES, d, d, rng)
        bound = 1.0 / np.sqrt(d)
        self.mask_embedding = store.add("encoder.mask_embedding", rng.uniform(-bound, bound, d))
        self.mode_embedding = store.add("encoder.mode_embedding", rng.uniform(-bound, bound, (config.num_modes, d)))
        self.query_projection = Linear(store, "encoder.query_projection", d, d, rng)
        self.agent_map = EdgeAttention(store, "encoder.agent_map", d, heads, POLAR_EDGE_FEATURES, rng)

    def encode_map(self, map_ctx: MapContext) -> DenseArray:
        """[G, D]: segments attend over their polylines, then over connected segments"""
        if map_ctx.num_segments == 0:
            return DenseArray(np.zeros((0, self.hidden_dim)))
        segments = self.segment_length(map_ctx.lane_length[:, None])
        polylines = self.polyline_length(map_ctx.polyline_length[:, None])
        segments = self.polyline_attention(segments, polylines, map_ctx.edges["map_polyline"])
        return self.lane_attention(segments, None, map_ctx.edges["map_lane"])

    def encode_agents(self, ctx: SceneContext) -> DenseArray:
        """[N, H, D]; unobserved steps carry the learned mask embedding"""
        nodes = self.agent_node(ctx.node_features)
        seen = ctx.observed[..., None].astype(np.float64)
        return nodes * seen + self.mask_embedding * (1.0 - seen)

    def encode(self, ctx: SceneContext) -> EmbeddingSet:
        return EmbeddingSet(self.encode_map(ctx.map), self.encode_agents(ctx), ctx.edges)

    def init_mode_queries(self, agent_emb: DenseArray) -> DenseArray:
        """q[n, t, k] = mode_embedding[k] + projection(E_a[n, t])"""
        n, h, d = agent_emb.shape
        projected = reshape(self.query_projection(agent_emb), (n, h, 1, d))
        return projected + reshape(self.mode_embedding, (1, 1, self.num_modes, d))

    def agent_map_attention(self, q: DenseArray, emb: EmbeddingSet) -> DenseArray:
        n, h, k, d = q.shape
        out = self.agent_map(reshape(q, (n * h * k, d)), emb.map_emb, emb.edges["agent_map"])
        return reshape(out, (n, h, k, d))

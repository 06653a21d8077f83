"""Dynamic anchor selection and the refinement stage.

Anchors sit at a fractional index along each proposal and are obtained by
linear interpolation, so gradients reach the selection network.
"""

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from config import RunConfig
from encoder import POLAR_EDGE_FEATURES, SceneContext
from errors import ConfigurationError
from geometry import to_local
from interaction import FactorizedRound
from layers import MLP, Conv2d, EdgeAttention, EdgeSet
from numerics import (
    DenseArray, ParamStore, as_dense, concat, getitem, reshape, sigmoid, sqrt, square, stack, transpose,
)

logger = logging.getLogger(__name__)

# keeps distances differentiable at coincident points
DISTANCE_EPS = 1e-12


@dataclass
class AnchorSet:
    frac_index: DenseArray
    anchor_xy: DenseArray


@dataclass
class RefineOutput:
    delta: DenseArray
    logits: DenseArray
    p_fin: DenseArray


def polar_features(x: DenseArray, y: DenseArray) -> DenseArray:
    """[distance, cos bearing, sin bearing] stacked on a new last axis"""
    dist = sqrt(square(x) + square(y) + DISTANCE_EPS)
    return stack([dist, x / dist, y / dist], axis=-1)


def interpolate(points: DenseArray, frac_index: DenseArray) -> DenseArray:
    """Point at fractional index along [.., F, 2] polylines; frac_index has the leading shape"""
    points, frac_index = as_dense(points), as_dense(frac_index)
    f = points.shape[-2]
    lead = frac_index.shape
    # non-finite fractions index the first chord; the value stays non-finite through the weight
    base = np.clip(np.floor(np.nan_to_num(frac_index.data, nan=0.0)), 0, max(f - 2, 0)).astype(np.int64)
    grid = np.indices(lead)
    lower = getitem(points, tuple(grid) + (base,))
    if f == 1:
        return lower
    upper = getitem(points, tuple(grid) + (base + 1,))
    weight = reshape(frac_index - base.astype(np.float64), lead + (1,))
    return lower + (upper - lower) * weight


def scene_frame_transform(ctx: SceneContext):
    """Per (n, t) rotation (cos, sin) and offset taking local points into the scene frame"""
    delta = ctx.frame_heading - ctx.scene_heading
    offset = to_local(ctx.frame_xy, ctx.scene_origin, ctx.scene_heading)
    return np.cos(delta), np.sin(delta), offset


class AnchorSelector:
    """Selects one anchor per proposal from history and proposal embeddings.

    History and proposal points are converted to polar coordinates around the
    focal agent's last observed pose, embedded to scalars, combined, and fed
    through two convolutions: one with history steps as channels, one with
    modes as channels. A small head maps the aligned features to a sigmoid
    fraction of the proposal length.
    """

    def __init__(self, store: ParamStore, config: RunConfig, rng: np.random.Generator):
        h, f, k = config.history_steps, config.future_steps, config.num_modes
        self.mode = config.das_mode
        self.future_steps = f
        if self.mode == "midpoint":
            return
        kernel = h
        if f < h:
            if config.das_strict_shapes and self.mode == "dynamic":
                raise ConfigurationError(f"anchor selection needs future_steps >= history_steps "
                                         f"(got F={f}, H={h}); set das_strict_shapes=false to clamp the kernel")
            kernel = f
        self.kernel = kernel
        hidden = config.das_hidden
        self.history_embedding = MLP(store, "refine.das.history", 3, hidden, 1, rng)
        self.proposal_embedding = MLP(store, "refine.das.proposal", 3, hidden, 1, rng)
        if self.mode == "dynamic":
            self.history_conv = Conv2d(store, "refine.das.history_conv", h, h, (kernel, 1), rng)
            self.mode_conv = Conv2d(store, "refine.das.mode_conv", k, k, (kernel, 1), rng)
            head_in = 2 * (f - kernel + 1)
        else:
            head_in = f
        self.head = MLP(store, "refine.das.head", head_in, hidden, 1, rng)

    def __call__(self, ctx: SceneContext, p_pro: DenseArray) -> AnchorSet:
        n, h, k, f, _ = p_pro.shape
        if self.mode == "midpoint":
            frac = DenseArray(np.full((n, h, k), 0.5 * (f - 1)))
            return AnchorSet(frac, interpolate(p_pro, frac))

        cos, sin, offset = scene_frame_transform(ctx)
        history = polar_features(DenseArray(offset[..., 0]), DenseArray(offset[..., 1]))
        c = cos[:, :, None, None]
        s = sin[:, :, None, None]
        px = getitem(p_pro, (Ellipsis, 0))
        py = getitem(p_pro, (Ellipsis, 1))
        sx = px * c - py * s + offset[:, :, None, None, 0]
        sy = px * s + py * c + offset[:, :, None, None, 1]
        proposal = polar_features(sx, sy)

        hist_emb = reshape(self.history_embedding(history), (n, h, 1, 1))
        prop_emb = reshape(self.proposal_embedding(proposal), (n, h, k, f))
        combined = prop_emb + hist_emb

        if self.mode == "dynamic":
            by_history = self.history_conv(transpose(combined, (0, 1, 3, 2)))
            by_mode = self.mode_conv(transpose(combined, (0, 2, 3, 1)))
            aligned = concat([transpose(by_history, (0, 1, 3, 2)), transpose(by_mode, (0, 3, 1, 2))], axis=-1)
        else:
            aligned = combined
        score = sigmoid(reshape(self.head(aligned), (n, h, k)))
        frac = score * float(f - 1)
        return AnchorSet(frac, interpolate(p_pro, frac))


def das_select_anchor(selector: AnchorSelector, ctx: SceneContext, p_pro: DenseArray) -> AnchorSet:
    return selector(ctx, p_pro)


class RefineStage:
    """Anchor-relative query encoding, one agent-map attention, one factorized round,
    then offset and score heads"""

    def __init__(self, store: ParamStore, config: RunConfig, rng: np.random.Generator):
        d, heads, f = config.hidden_dim, config.num_heads, config.future_steps
        self.future_steps = f
        self.map_radius = config.map_radius
        self.query_embedding = MLP(store, "refine.query", 3 * f, d, d, rng)
        self.agent_map = EdgeAttention(store, "refine.agent_map", d, heads, POLAR_EDGE_FEATURES, rng)
        self.factorized = FactorizedRound(store, "refine.factorized", d, heads, rng)
        self.offset_head = MLP(store, "refine.offset", d, d, 2 * f, rng)
        self.score_head = MLP(store, "refine.score", d, d, 1, rng)

    def anchor_map_edges(self, ctx: SceneContext, anchors: AnchorSet) -> EdgeSet:
        """Lanes within the map radius of each anchor; features stay differentiable in the anchor"""
        n, h, k, _ = anchors.anchor_xy.shape
        lanes = ctx.map
        if lanes.num_segments == 0:
            return EdgeSet.empty(POLAR_EDGE_FEATURES)
        anchor = anchors.anchor_xy.data
        c = np.cos(ctx.frame_heading)[:, :, None]
        s = np.sin(ctx.frame_heading)[:, :, None]
        gx = c * anchor[..., 0] - s * anchor[..., 1] + ctx.frame_xy[:, :, None, 0]
        gy = s * anchor[..., 0] + c * anchor[..., 1] + ctx.frame_xy[:, :, None, 1]

        src, dst, rows_n, rows_t = [], [], [], []
        for i in range(n):
            for t in range(h):
                if not ctx.observed[i, t]:
                    continue
                centers = np.stack([gx[i, t], gy[i, t]], axis=-1)
                finite = np.all(np.isfinite(centers), axis=-1)
                hits = iter(ctx.lane_index.query(centers[finite], self.map_radius))
                for mode in range(k):
                    near = next(hits) if finite[mode] else np.zeros(0, dtype=np.int64)
                    src.append(near)
                    dst.append(np.full(len(near), (i * h + t) * k + mode))
                    rows_n.append(np.full(len(near), i))
                    rows_t.append(np.full(len(near), t))
        if not src or sum(len(x) for x in src) == 0:
            return EdgeSet.empty(POLAR_EDGE_FEATURES)
        src_a = np.concatenate(src).astype(np.int64)
        dst_a = np.concatenate(dst).astype(np.int64)
        ni = np.concatenate(rows_n).astype(np.int64)
        ti = np.concatenate(rows_t).astype(np.int64)
        ki = dst_a % k

        lane_local = to_local(lanes.lane_xy[src_a], ctx.frame_xy[ni, ti], ctx.frame_heading[ni, ti])
        anchor_rows = getitem(anchors.anchor_xy, (ni, ti, ki))
        dx = lane_local[:, 0] - getitem(anchor_rows, (slice(None), 0))
        dy = lane_local[:, 1] - getitem(anchor_rows, (slice(None), 1))
        direction = polar_features(dx, dy)
        rel = lanes.lane_heading[src_a] - ctx.frame_heading[ni, ti]
        heading = DenseArray(np.stack([np.cos(rel), np.sin(rel)], axis=-1))
        return EdgeSet(src_a, dst_a, concat([direction, heading], axis=-1))

    def __call__(self, ctx: SceneContext, p_pro: DenseArray, anchors: AnchorSet, e_q: DenseArray,
                 map_emb: DenseArray, edges: Dict[str, EdgeSet]) -> RefineOutput:
        n, h, k, f, _ = p_pro.shape
        d = e_q.shape[-1]
        relative = p_pro - reshape(anchors.anchor_xy, (n, h, k, 1, 2))
        polar = polar_features(getitem(relative, (Ellipsis, 0)), getitem(relative, (Ellipsis, 1)))
        query = self.query_embedding(reshape(polar, (n, h, k, 3 * f))) + e_q
        rows = reshape(query, (n * h * k, d))
        rows = self.agent_map(rows, map_emb, self.anchor_map_edges(ctx, anchors))
        rows = self.factorized(rows, edges)
        delta = reshape(self.offset_head(rows), (n, h, k, f, 2))
        logits = reshape(self.score_head(rows), (n, h, k))
        return RefineOutput(delta, logits, p_pro + delta)


def refine_trajectories(stage: RefineStage, ctx: SceneContext, p_pro: DenseArray, anchors: AnchorSet,
                        e_q: DenseArray, map_emb: DenseArray, edges: Dict[str, EdgeSet]) -> RefineOutput:
    return stage(ctx, p_pro, anchors, e_q, map_emb, edges)

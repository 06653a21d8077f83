import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from config import RunConfig  # noqa: E402
from models import (  # noqa: E402
    AgentState, AgentTrack, LaneConnection, LaneGraph, LaneRelation, LaneSegment, Polyline, PolylineKind, Scenario,
    ScenarioKind,
)
from scene import generate_scenario  # noqa: E402

MICRO_H = 4
MICRO_F = 5
MICRO_VALUES = dict(
    history_steps=MICRO_H, future_steps=MICRO_F, num_modes=2, hidden_dim=8, num_heads=2, num_recurrent=1,
    das_hidden=4, map_radius=1000.0, agent_radius=1000.0, future_radius=1000.0, history_radius=1000.0,
    n_train=4, n_val=2, epochs=1, batch_size=2, workers=1, ablation_seeds=[1], mask_ratios=[0.5],
)


def micro_config(**changes) -> RunConfig:
    return RunConfig.from_values({**MICRO_VALUES, **changes})


@pytest.fixture
def config():
    return micro_config()


def straight_track(agent_id, x0, y0, heading, speed, steps=MICRO_H + MICRO_F, dt=0.1, observed=None):
    states = []
    for i in range(steps):
        states.append(AgentState(
            x=x0 + i * dt * speed * math.cos(heading), y=y0 + i * dt * speed * math.sin(heading),
            heading=heading, speed=speed, velocity_dir=heading,
            observed=True if observed is None else bool(observed[i]),
        ))
    return AgentTrack(id=agent_id, length=4.5, width=1.9, states=states)


def straight_lane(segment_id, start, end, points=5, width=3.5, connections=()):
    start, end = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    direction = (end - start) / np.linalg.norm(end - start)
    normal = np.array([-direction[1], direction[0]])
    center = start + np.linspace(0.0, 1.0, points)[:, None] * (end - start)

    def poly(kind, pts):
        return Polyline(kind=kind, points=[(float(x), float(y)) for x, y in pts])

    return LaneSegment(
        id=segment_id,
        polylines=[
            poly(PolylineKind.CENTERLINE, center),
            poly(PolylineKind.LEFT_BOUNDARY, center + normal * width / 2),
            poly(PolylineKind.RIGHT_BOUNDARY, center - normal * width / 2),
        ],
        connections=[LaneConnection(target=t, relation=LaneRelation.SUCCESSOR, hops=1) for t in connections],
    )


def make_scenario(agents, segments=(), scenario_id="micro-000001", focal_ids=None, kind=ScenarioKind.FOLLOW,
                  history_steps=MICRO_H, future_steps=MICRO_F):
    return Scenario(
        id=scenario_id, kind=kind, sample_rate_hz=10.0, history_steps=history_steps, future_steps=future_steps,
        agents=list(agents), map=LaneGraph(segments=list(segments)),
        focal_ids=focal_ids or [agents[0].id],
    )


@pytest.fixture
def micro_scenario():
    """Three agents on two connected straight lanes"""
    agents = [
        straight_track(0, 0.0, 0.0, 0.0, 8.0),
        straight_track(1, -6.0, 3.5, 0.1, 9.0),
        straight_track(2, 12.0, -1.0, math.pi / 2, 3.0),
    ]
    lanes = [straight_lane(0, (-10.0, 0.0), (10.0, 0.0), connections=[1]), straight_lane(1, (10.0, 0.0), (30.0, 0.0))]
    return make_scenario(agents, lanes)


@pytest.fixture
def generated_scenario():
    return generate_scenario("intersection", 3, MICRO_H, MICRO_F)


# ---------------------------------------------------------------------------
# scalar oracles
# ---------------------------------------------------------------------------

def _p(store, name):
    return store[name].data


def linear_oracle(store, name, x):
    return np.asarray(x) @ _p(store, f"{name}.weight") + _p(store, f"{name}.bias")


def mlp_oracle(store, name, x):
    h = linear_oracle(store, f"{name}.hidden", x)
    return linear_oracle(store, f"{name}.output", h / (1.0 + np.exp(-h)))


def layer_norm_oracle(store, name, x, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * _p(store, f"{name}.gain") + _p(store, f"{name}.shift")


def attention_oracle(store, name, queries, sources, src, dst, heads, edge_emb=None, self_attention=False):
    """Per-destination, per-head loop version of GraphAttention"""
    queries = np.asarray(queries, dtype=np.float64)
    rows, dim = queries.shape
    head_dim = dim // heads
    h = layer_norm_oracle(store, f"{name}.norm_query", queries)
    base = h if self_attention else layer_norm_oracle(store, f"{name}.norm_source", sources)
    out = queries.copy()
    for row in range(rows):
        incoming = [e for e in range(len(src)) if dst[e] == row]
        if not incoming:
            continue
        q = linear_oracle(store, f"{name}.to_query", h[row])
        message = np.zeros(dim)
        for head in range(heads):
            cols = slice(head * head_dim, (head + 1) * head_dim)
            scores, values = [], []
            for e in incoming:
                kv = base[src[e]] + (edge_emb[e] if edge_emb is not None else 0.0)
                k = linear_oracle(store, f"{name}.to_key", kv)
                v = linear_oracle(store, f"{name}.to_value", kv)
                scores.append(float(np.dot(q[cols], k[cols])) / math.sqrt(head_dim))
                values.append(v[cols])
            weights = np.exp(np.array(scores) - max(scores))
            weights /= weights.sum()
            message[cols] = sum(w * v for w, v in zip(weights, values))
        updated = queries[row] + linear_oracle(store, f"{name}.to_out", message)
        updated = updated + mlp_oracle(store, f"{name}.ffn", layer_norm_oracle(store, f"{name}.norm_ffn", updated))
        out[row] = updated
    return out

import math

import numpy as np
import pytest

from encoder import POLYLINE_EDGE_FEATURES, prepare_map, prepare_scene, polyline_reference
from errors import DataError
from evalmetrics import score_forecast
from ilnet import ILNet
from models import LaneGraph, LaneSegment
from scene import generate_scenario, transform_scenario

from conftest import (
    MICRO_F, MICRO_H, attention_oracle, make_scenario, micro_config, mlp_oracle, straight_lane, straight_track,
)


class TestPolylineReference:
    def test_midpoint_and_heading(self):
        x, y, heading, length = polyline_reference([(0.0, 0.0), (2.0, 0.0), (2.0, 2.0)])
        assert (x, y) == pytest.approx((2.0, 0.0))
        assert length == pytest.approx(4.0)
        assert heading == pytest.approx(0.0) or heading == pytest.approx(math.pi / 2)

    def test_straight_line(self):
        x, y, heading, length = polyline_reference([(0.0, 0.0), (0.0, 10.0)])
        assert (x, y, heading, length) == pytest.approx((0.0, 5.0, math.pi / 2, 10.0))


class TestPrepareScene:
    def test_shapes_and_targets(self, micro_scenario, config):
        ctx = prepare_scene(micro_scenario, config)
        assert ctx.targets.shape == (3, MICRO_H, MICRO_F, 2)
        assert ctx.target_mask.all()
        np.testing.assert_allclose(ctx.targets[0, 0, :, 0], 0.8 * np.arange(1, MICRO_F + 1), atol=1e-12)
        np.testing.assert_allclose(ctx.targets[0, 0, :, 1], 0.0, atol=1e-12)
        assert ctx.supervised.all()

    def test_step_mismatch(self, micro_scenario):
        with pytest.raises(DataError):
            prepare_scene(micro_scenario, micro_config(future_steps=6))

    def test_segment_without_polylines(self):
        with pytest.raises(DataError):
            prepare_map(LaneGraph(segments=[LaneSegment(id=0)]))

    def test_map_edge_sets(self, micro_scenario, config):
        ctx = prepare_scene(micro_scenario, config)
        polylines = ctx.edges["map_polyline"]
        assert len(polylines) == 6
        assert polylines.features.shape == (6, POLYLINE_EDGE_FEATURES)
        np.testing.assert_array_equal(polylines.dst, [0, 0, 0, 1, 1, 1])
        lanes = ctx.edges["map_lane"]
        assert list(zip(lanes.src, lanes.dst)) == [(1, 0)]

    def test_edges_respect_time(self, micro_scenario, config):
        ctx = prepare_scene(micro_scenario, config)
        h, k = ctx.history_steps, ctx.num_modes
        dst_t = lambda rows: (rows // k) % h  # noqa: E731
        temporal = ctx.edges["temporal"]
        assert np.all(temporal.src % h < dst_t(temporal.dst))
        future = ctx.edges["future"]
        assert np.all(future.src % h == dst_t(future.dst) + 1)
        history = ctx.edges["history"]
        assert np.all(history.src % h == dst_t(history.dst) - 1)
        for edges in (future, history):
            assert np.all(edges.src // h != (edges.dst // k) // h)
        agent = ctx.edges["agent"]
        assert np.all(agent.src % k == agent.dst % k)
        assert np.all((agent.src // k) % h == (agent.dst // k) % h)
        pred_hist = ctx.edges["prediction_history"]
        assert np.all((pred_hist.src // k) % h < (pred_hist.dst // k) % h)
        assert len(ctx.edges["mode"]) == 3 * h * k * (k - 1)

    def test_unobserved_steps_have_no_edges(self, config):
        observed = [True, False, True, True] + [True] * MICRO_F
        scenario = make_scenario([straight_track(0, 0.0, 0.0, 0.0, 5.0, observed=observed),
                                  straight_track(1, 0.0, 3.0, 0.0, 5.0)])
        ctx = prepare_scene(scenario, config)
        h, k = ctx.history_steps, ctx.num_modes
        hidden_row = 0 * h + 1
        for name in ("temporal", "future", "history", "agent_map"):
            edges = ctx.edges[name]
            assert not np.any(edges.dst // k == hidden_row)
        for name in ("agent", "prediction_history", "mode"):
            edges = ctx.edges[name]
            assert not np.any(edges.src // k == hidden_row)
            assert not np.any(edges.dst // k == hidden_row)
        assert not ctx.supervised[0, 1]


class TestSceneEncoder:
    def test_shapes(self, micro_scenario, config):
        model = ILNet(config)
        ctx = model.prepare(micro_scenario)
        emb = model.encoder.encode(ctx)
        assert emb.map_emb.shape == (2, config.hidden_dim)
        assert emb.agent_emb.shape == (3, MICRO_H, config.hidden_dim)
        q = model.encoder.init_mode_queries(emb.agent_emb)
        assert q.shape == (3, MICRO_H, config.num_modes, config.hidden_dim)

    def test_map_encoder_matches_oracle(self, config):
        model = ILNet(config)
        store = model.params
        scenario = make_scenario([straight_track(0, 0.0, 0.0, 0.0, 5.0)], [straight_lane(0, (-5.0, 0.0), (15.0, 0.0))])
        ctx = model.prepare(scenario)
        out = model.encoder.encode_map(ctx.map).data

        segments = mlp_oracle(store, "encoder.segment_length", ctx.map.lane_length[:, None])
        polylines = mlp_oracle(store, "encoder.polyline_length", ctx.map.polyline_length[:, None])
        edges = ctx.map.edges["map_polyline"]
        edge_emb = mlp_oracle(store, "encoder.polyline_to_segment.edge", edges.features)
        expected = attention_oracle(store, "encoder.polyline_to_segment.attn", segments, polylines,
                                    edges.src, edges.dst, config.num_heads, edge_emb)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_agent_map_attention_matches_oracle(self, micro_scenario, config):
        model = ILNet(config)
        store = model.params
        ctx = model.prepare(micro_scenario)
        emb = model.encoder.encode(ctx)
        q = model.encoder.init_mode_queries(emb.agent_emb)
        out = model.encoder.agent_map_attention(q, emb).data
        edges = ctx.edges["agent_map"]
        edge_emb = mlp_oracle(store, "encoder.agent_map.edge", edges.features)
        rows = q.data.reshape(-1, config.hidden_dim)
        expected = attention_oracle(store, "encoder.agent_map.attn", rows, emb.map_emb.data, edges.src, edges.dst,
                                    config.num_heads, edge_emb)
        np.testing.assert_allclose(out.reshape(rows.shape), expected, atol=1e-10)

    def test_masked_step_uses_mask_embedding(self, config):
        observed = [True, False, True, True] + [True] * MICRO_F
        scenario = make_scenario([straight_track(0, 0.0, 0.0, 0.0, 5.0, observed=observed)])
        model = ILNet(config)
        agent_emb = model.encoder.encode_agents(model.prepare(scenario)).data
        np.testing.assert_array_equal(agent_emb[0, 1], model.params["encoder.mask_embedding"].data)

    def test_identical_states_embed_identically(self, config):
        scenario = make_scenario([straight_track(0, 0.0, 0.0, 0.3, 6.0), straight_track(1, 50.0, -20.0, 0.3, 6.0)])
        model = ILNet(config)
        agent_emb = model.encoder.encode_agents(model.prepare(scenario)).data
        np.testing.assert_allclose(agent_emb[0], agent_emb[1], atol=1e-12)

    def test_no_lane_within_radius_leaves_queries(self):
        config = micro_config(map_radius=5.0)
        scenario = make_scenario([straight_track(0, 0.0, 0.0, 0.0, 5.0)],
                                 [straight_lane(0, (10000.0, 0.0), (10020.0, 0.0))])
        model = ILNet(config)
        ctx = model.prepare(scenario)
        assert len(ctx.edges["agent_map"]) == 0
        emb = model.encoder.encode(ctx)
        q = model.encoder.init_mode_queries(emb.agent_emb)
        np.testing.assert_array_equal(model.encoder.agent_map_attention(q, emb).data, q.data)

    def test_empty_map(self, config):
        model = ILNet(config)
        ctx = model.prepare(make_scenario([straight_track(0, 0.0, 0.0, 0.0, 5.0)]))
        assert model.encoder.encode_map(ctx.map).shape == (0, config.hidden_dim)

    def test_lane_permutation_permutes_map_embeddings(self, micro_scenario, config):
        model = ILNet(config)
        reordered = micro_scenario.copy(update={"map": LaneGraph(segments=micro_scenario.map.segments[::-1])})
        a = model.encoder.encode_map(model.prepare(micro_scenario).map).data
        b = model.encoder.encode_map(model.prepare(reordered).map).data
        np.testing.assert_allclose(a, b[::-1], atol=1e-12)


KINDS = ("follow", "merge", "intersection", "curve")


def _generated(count):
    return [generate_scenario(KINDS[i % 4], 100 + i, MICRO_H, MICRO_F) for i in range(count)]


def _stage_outputs(model, scenario):
    out = model.forward(model.prepare(scenario))
    return {"p_pro": out.p_pro.data, "anchor_xy": out.anchors.anchor_xy.data, "p_fin": out.p_fin.data,
            "logits": out.logits.data}


ACCURACY_KEYS = ("min_ade", "min_fde", "mr", "brier_min_fde", "rf")


class TestRigidMotionInvariance:
    def test_micro_scene(self, micro_scenario, config):
        model = ILNet(config)
        a = _stage_outputs(model, micro_scenario)
        b = _stage_outputs(model, transform_scenario(micro_scenario, 2.1, (130.0, -45.0)))
        for key in a:
            np.testing.assert_allclose(b[key], a[key], rtol=0, atol=1e-9, err_msg=key)

    def test_generated_scenarios(self, config):
        model = ILNet(config)
        rng = np.random.default_rng(11)
        for scenario in _generated(50):
            moved = transform_scenario(scenario, rng.uniform(-math.pi, math.pi), tuple(rng.uniform(-200, 200, 2)))
            a = _stage_outputs(model, scenario)
            b = _stage_outputs(model, moved)
            for key in a:
                np.testing.assert_allclose(b[key], a[key], rtol=0, atol=1e-9, err_msg=f"{scenario.id} {key}")

            before = score_forecast(scenario, model.forecast(scenario))
            after = score_forecast(moved, model.forecast(moved))
            for row_a, row_b in zip(before.agents, after.agents):
                for key in ACCURACY_KEYS:
                    assert row_b[key] == pytest.approx(row_a[key], abs=1e-9), (scenario.id, key)
            for key in ("min_joint_ade", "min_joint_fde"):
                assert after.joint[key] == pytest.approx(before.joint[key], abs=1e-9), (scenario.id, key)


class TestAgentPermutation:
    def test_generated_scenarios(self, config):
        model = ILNet(config)
        rng = np.random.default_rng(12)
        for scenario in _generated(20):
            order = rng.permutation(len(scenario.agents))
            shuffled = scenario.copy(update={"agents": [scenario.agents[i] for i in order]})
            a = _stage_outputs(model, scenario)
            b = _stage_outputs(model, shuffled)
            for key in a:
                np.testing.assert_allclose(b[key], a[key][order], rtol=1e-12, atol=1e-12,
                                           err_msg=f"{scenario.id} {key}")

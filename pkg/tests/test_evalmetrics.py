import math

import numpy as np
import pytest

from errors import DataError
from evalmetrics import (
    DrivableRaster, Forecast, accuracy_metrics, aggregate_scores, angular_expansion, diversity_metrics,
    evaluate_run, joint_metrics, score_forecast,
)
from geometry import to_local
from scene import generate_scenario, transform_scenario

from conftest import make_scenario, straight_lane, straight_track


class TestAccuracy:
    def test_lateral_offsets(self):
        gt = np.stack([np.arange(1.0, 6.0), np.zeros(5)], axis=-1)
        preds = np.stack([gt + [0.0, 1.0], gt + [0.0, 3.0]])
        metrics = accuracy_metrics(preds, np.array([0.25, 0.75]), gt)
        assert metrics["min_ade"] == pytest.approx(1.0)
        assert metrics["min_fde"] == pytest.approx(1.0)
        assert metrics["mr"] == 0.0
        assert metrics["brier_min_fde"] == pytest.approx(1.0 + 0.75 ** 2)

    def test_miss(self):
        gt = np.zeros((3, 2))
        metrics = accuracy_metrics(np.full((1, 3, 2), 2.0), np.array([1.0]), gt, mr_threshold=2.0)
        assert metrics["mr"] == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            preds = rng.standard_normal((6, 8, 2)) * 4.0
            gt = rng.standard_normal((8, 2))
            probs = rng.dirichlet(np.ones(6))
            metrics = accuracy_metrics(preds, probs, gt)
            errors = np.array([[math.hypot(*(preds[k, j] - gt[j])) for j in range(8)] for k in range(6)])
            best = int(np.argmin(errors[:, -1]))
            assert metrics["min_ade"] == pytest.approx(errors.mean(axis=1).min())
            assert metrics["min_fde"] == pytest.approx(errors[best, -1])
            assert metrics["brier_min_fde"] == pytest.approx(errors[best, -1] + (1 - probs[best]) ** 2)
            assert metrics["min_fde"] <= metrics["brier_min_fde"] <= metrics["min_fde"] + 1.0

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(DataError):
            accuracy_metrics(np.zeros((2, 3, 2)), np.array([0.5, 0.4]), np.zeros((3, 2)))

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(1)
        preds = rng.standard_normal((6, 5, 2))
        gt = rng.standard_normal((5, 2))
        probs = np.full(6, 1 / 6)
        moved = accuracy_metrics(to_local(preds, (3.0, -2.0), 0.8), probs, to_local(gt, (3.0, -2.0), 0.8))
        base = accuracy_metrics(preds, probs, gt)
        for key in base:
            assert moved[key] == pytest.approx(base[key], abs=1e-9)


class TestJoint:
    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        preds = rng.standard_normal((3, 4, 5, 2))
        gt = rng.standard_normal((3, 5, 2))
        errors = np.hypot(*(preds - gt[:, None]).transpose(3, 0, 1, 2))
        metrics = joint_metrics(preds, gt)
        assert metrics["min_joint_fde"] == pytest.approx(errors[..., -1].mean(axis=0).min())
        assert metrics["min_joint_ade"] == pytest.approx(errors.mean(axis=-1).mean(axis=0).min())

    def test_joint_is_not_better_than_marginal(self):
        rng = np.random.default_rng(3)
        preds = rng.standard_normal((3, 4, 5, 2))
        gt = rng.standard_normal((3, 5, 2))
        marginal = np.mean([accuracy_metrics(preds[n], np.full(4, 0.25), gt[n])["min_fde"] for n in range(3)])
        assert joint_metrics(preds, gt)["min_joint_fde"] >= marginal - 1e-12


class TestDiversity:
    def _raster(self):
        grid = np.zeros((10, 10), dtype=bool)
        grid[4:6, :] = True
        return DrivableRaster((0.0, 0.0), 1.0, grid)

    def test_identical_modes(self):
        mode = np.stack([np.arange(5.0), np.full(5, 4.5)], axis=-1)
        gt = mode + [0.0, 0.2]
        metrics = diversity_metrics(np.stack([mode, mode, mode]), gt, self._raster())
        assert metrics["rf"] == pytest.approx(1.0)
        assert metrics["aae"] == pytest.approx(0.0, abs=1e-7)
        assert metrics["dac"] == 1.0
        assert metrics["dao"] == pytest.approx(5 / 20)

    def test_perpendicular_modes(self):
        along = np.stack([np.linspace(0, 4, 5), np.full(5, 4.5)], axis=-1)
        up = np.stack([np.zeros(5), np.linspace(4.5, 8.5, 5)], axis=-1)
        metrics = diversity_metrics(np.stack([along, up]), along, self._raster())
        assert metrics["aae"] == pytest.approx(math.pi / 2)
        assert metrics["dac"] == 0.5

    def test_dao_matches_brute_force(self):
        raster = self._raster()
        rng = np.random.default_rng(4)
        preds = rng.uniform(0, 10, size=(6, 8, 2))
        touched = {(int(y), int(x)) for x, y in preds.reshape(-1, 2) if 4 <= int(y) < 6}
        metrics = diversity_metrics(preds, preds[0], raster)
        assert metrics["dao"] == pytest.approx(len(touched) / 20)
        drivable = [all(4 <= int(y) < 6 for _, y in mode) for mode in preds]
        assert metrics["dac"] == pytest.approx(np.mean(drivable))

    def test_rf_example(self):
        gt = np.zeros((2, 2))
        preds = np.zeros((2, 2, 2))
        preds[0, -1] = [1.0, 0.0]
        preds[1, -1] = [3.0, 0.0]
        assert diversity_metrics(preds, gt, self._raster())["rf"] == pytest.approx(2.0)

    def test_zero_length_modes_are_skipped(self):
        preds = np.zeros((3, 4, 2))
        preds[1, -1] = [1.0, 0.0]
        preds[2, -1] = [0.0, 1.0]
        total, pairs = angular_expansion(preds)
        assert pairs == 1
        assert total == pytest.approx(math.pi / 2)


class TestRaster:
    def test_centerline_is_drivable(self):
        scenario = generate_scenario("curve", 2)
        raster = DrivableRaster.from_lane_graph(scenario.map, cell=0.5, margin=10.0)
        for segment in scenario.map.segments:
            assert raster.is_drivable(np.asarray(segment.centerline().points)).all()

    def test_lane_polygon_is_filled(self):
        lane = straight_lane(0, (0.0, 0.0), (20.0, 0.0))
        scenario = make_scenario([straight_track(0, 0.0, 0.0, 0.0, 5.0)], [lane])
        raster = DrivableRaster.from_lane_graph(scenario.map, cell=0.5, margin=2.0)
        assert raster.is_drivable(np.array([[10.0, 1.0], [10.0, -1.0], [5.0, 0.0]])).all()
        assert not raster.is_drivable(np.array([[10.0, 3.0], [10.0, -3.0], [-50.0, 0.0]])).any()


class OracleModel:
    """Puts the labelled future into mode 0 with all probability mass"""

    def __init__(self, num_modes=3):
        self.num_modes = num_modes
        self.truth = {}

    def forecast(self, scenario):
        h = scenario.history_steps
        truth = self.truth[scenario.id].positions()
        n = truth.shape[0]
        observed = scenario.observed_mask()
        origin = np.array([[s.x, s.y] for s in (a.states[h - 1] for a in scenario.agents)])
        heading = np.array([a.states[h - 1].heading for a in scenario.agents])
        finals = np.repeat(truth[:, None, h:], self.num_modes, axis=1) + np.arange(self.num_modes)[None, :, None, None]
        probs = np.zeros((n, self.num_modes))
        probs[:, 0] = 1.0
        return Forecast(
            scenario_id=scenario.id, agent_ids=[a.id for a in scenario.agents],
            focal_indices=[scenario.agent_index(i) for i in scenario.focal_ids], scored=observed[:, h - 1],
            origin_xy=origin, origin_heading=heading,
            finals_local=to_local(finals, origin[:, None, None], heading[:, None, None]),
            finals_global=finals, proposals_global=finals, probs=probs,
        )


class TestEvaluateRun:
    def _scenarios(self):
        return [generate_scenario(kind, seed) for kind in ("follow", "intersection") for seed in (1, 2)]

    def test_perfect_oracle(self):
        scenarios = self._scenarios()
        model = OracleModel()
        model.truth = {s.id: s for s in scenarios}
        report = evaluate_run(model, scenarios)
        assert report.min_ade == pytest.approx(0.0, abs=1e-9)
        assert report.min_fde == pytest.approx(0.0, abs=1e-9)
        assert report.min_joint_fde == pytest.approx(0.0, abs=1e-9)
        assert report.mr == 0.0
        assert report.brier_min_fde == pytest.approx(0.0, abs=1e-9)
        assert report.num_scenarios == 4
        assert set(report.by_kind) == {"follow", "intersection"}

    def test_deterministic_with_threads(self):
        scenarios = self._scenarios()
        model = OracleModel()
        model.truth = {s.id: s for s in scenarios}
        assert evaluate_run(model, scenarios).dict() == evaluate_run(model, scenarios, workers=3).dict()

    def test_masked_history_keeps_labels(self):
        scenarios = self._scenarios()
        model = OracleModel()
        model.truth = {s.id: s for s in scenarios}
        report = evaluate_run(model, scenarios, mask_ratio=0.5, mask_seed=3)
        assert report.min_fde == pytest.approx(0.0, abs=1e-9)
        assert report.mask_ratio == 0.5

    def test_aggregate_matches_per_scenario_means(self):
        scenarios = self._scenarios()
        model = OracleModel(num_modes=2)
        model.truth = {s.id: transform_scenario(s, 0.0, (0.5, 0.0)) for s in scenarios}
        scores = [score_forecast(s, model.forecast(s)) for s in scenarios]
        report = aggregate_scores(scores, "joint")
        rows = [row for s in scores for row in s.agents]
        assert report.min_fde == pytest.approx(np.mean([r["min_fde"] for r in rows]))
        assert report.min_fde == pytest.approx(0.5)
        assert report.min_joint_fde == pytest.approx(np.mean([s.joint["min_joint_fde"] for s in scores]))
        assert sum(v["count"] for v in report.by_alpha.values()) == report.num_focal_agents

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            evaluate_run(OracleModel(), [])

    def test_mismatched_forecast(self):
        a, b = self._scenarios()[:2]
        model = OracleModel()
        model.truth = {a.id: a, b.id: b}
        with pytest.raises(DataError):
            score_forecast(a, model.forecast(b))

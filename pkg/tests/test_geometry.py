import math

import numpy as np
import pytest

from errors import ArgumentError
from geometry import (
    Pose, relative_edge, relative_edges, radius_neighbors, to_global, to_local, to_local_polar, wrap_angle,
)


class TestWrapAngle:
    @pytest.mark.parametrize("angle, expected", [
        (0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi),
        (1.5 * math.pi, -0.5 * math.pi), (-2.5 * math.pi, -0.5 * math.pi),
    ])
    def test_examples(self, angle, expected):
        assert wrap_angle(angle) == pytest.approx(expected, abs=1e-12)

    def test_range_and_idempotence(self):
        angles = np.random.default_rng(0).uniform(-50, 50, size=5000)
        wrapped = wrap_angle(angles)
        assert np.all(wrapped > -math.pi) and np.all(wrapped <= math.pi)
        assert np.array_equal(wrap_angle(wrapped), wrapped)
        np.testing.assert_allclose(np.cos(wrapped), np.cos(angles), atol=1e-9)


class TestRelativeEdge:
    def test_worked_example(self):
        edge = relative_edge(Pose(0.0, 1.0, math.pi / 2), Pose(0.0, 0.0, 0.0), time_gap=2, attr=1)
        assert edge.dist == pytest.approx(1.0)
        assert edge.edge_dir == pytest.approx(math.pi / 2)
        assert edge.rel_heading == pytest.approx(math.pi / 2)
        assert (edge.time_gap, edge.attr) == (2, 1)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(1)
        count = 1000
        src = rng.uniform(-100, 100, size=(count, 2))
        dst = rng.uniform(-100, 100, size=(count, 2))
        src_h = rng.uniform(-math.pi, math.pi, count)
        dst_h = rng.uniform(-math.pi, math.pi, count)
        angle = rng.uniform(-math.pi, math.pi)
        shift = rng.uniform(-1000, 1000, size=2)
        before = relative_edges(src, src_h, dst, dst_h)
        after = relative_edges(to_global(src, shift, angle), wrap_angle(src_h + angle),
                               to_global(dst, shift, angle), wrap_angle(dst_h + angle))
        np.testing.assert_allclose(after[0], before[0], atol=1e-9)
        for a, b in zip(after[1:], before[1:]):
            np.testing.assert_allclose(np.cos(a), np.cos(b), atol=1e-9)
            np.testing.assert_allclose(np.sin(a), np.sin(b), atol=1e-9)


class TestFrames:
    def test_local_global_inverse(self):
        rng = np.random.default_rng(2)
        points = rng.uniform(-50, 50, size=(20, 2))
        origin = np.array([3.0, -4.0])
        local = to_local(points, origin, 0.7)
        np.testing.assert_allclose(to_global(local, origin, 0.7), points, atol=1e-12)

    def test_forward_axis(self):
        np.testing.assert_allclose(to_local(np.array([1.0, 1.0]), [1.0, 0.0], math.pi / 2), [1.0, 0.0], atol=1e-12)

    def test_local_polar(self):
        dist, angle = to_local_polar((1.0, 1.0), Pose(1.0, 0.0, math.pi / 2))
        assert dist == pytest.approx(1.0)
        assert angle == pytest.approx(0.0, abs=1e-12)
        dist, angle = to_local_polar((-2.0, 0.0), Pose(0.0, 0.0, 0.0))
        assert dist == pytest.approx(2.0)
        assert abs(angle) == pytest.approx(math.pi)


class TestRadiusNeighbors:
    def test_inclusive_boundary(self):
        assert radius_neighbors([(3.0, 4.0), (0.0, 5.0001), (1.0, 1.0)], (0.0, 0.0), 5.0) == [0, 2]

    def test_empty_candidates(self):
        assert radius_neighbors(np.zeros((0, 2)), (0.0, 0.0), 1.0) == []

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        candidates = rng.uniform(-20, 20, size=(300, 2))
        center = rng.uniform(-5, 5, size=2)
        expected = [i for i, p in enumerate(candidates) if math.hypot(*(p - center)) <= 7.5]
        assert radius_neighbors(candidates, center, 7.5) == expected

    def test_radius_must_be_positive(self):
        with pytest.raises(ArgumentError):
            radius_neighbors([(0.0, 0.0)], (0.0, 0.0), 0.0)

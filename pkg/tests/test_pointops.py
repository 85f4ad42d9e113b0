import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fvp.pointops import (
    chamfer_distance,
    denormalize_cloud,
    farthest_point_indices,
    farthest_point_sample,
    normalize_cloud,
)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)
clouds = st.integers(1, 24).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))

LINE = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])


def brute_force_fps(pts, k, start):
    chosen = [start]
    while len(chosen) < min(k, len(pts)):
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen + [chosen[-1]] * (k - len(chosen))


def brute_force_chamfer(a, b):
    ab = np.mean([min(np.sum((p - q) ** 2) for q in b) for p in a])
    ba = np.mean([min(np.sum((p - q) ** 2) for q in a) for p in b])
    return ab + ba


class TestFarthestPoint:
    def test_single_selection_is_start(self):
        assert farthest_point_indices(LINE, 1, 0).tolist() == [0]

    def test_second_pick_is_farthest(self):
        assert farthest_point_indices(LINE, 2, 0).tolist() == [0, 3]

    def test_full_selection_is_permutation(self, rng):
        pts = rng.normal(size=(30, 3))
        assert sorted(farthest_point_indices(pts, 30).tolist()) == list(range(30))

    def test_padding_repeats_last(self):
        out = farthest_point_sample(LINE, 6)
        assert out.shape == (6, 3)
        np.testing.assert_array_equal(out[4], out[3])
        np.testing.assert_array_equal(out[5], out[3])

    def test_ties_take_lowest_index(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
        assert farthest_point_indices(pts, 2).tolist() == [0, 1]

    @pytest.mark.parametrize("k", [0, -3])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            farthest_point_sample(LINE, k)

    def test_bad_start_and_empty(self):
        with pytest.raises(ValueError):
            farthest_point_sample(LINE, 2, start_index=4)
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((0, 3)), 2)

    @settings(max_examples=40, deadline=None)
    @given(clouds, st.integers(1, 30), st.data())
    def test_matches_brute_force(self, pts, k, data):
        start = data.draw(st.integers(0, len(pts) - 1))
        assert farthest_point_indices(pts, k, start).tolist() == brute_force_fps(pts, k, start)


class TestNormalize:
    def test_singleton(self):
        out, c, s = normalize_cloud([[2.0, 2.0, 2.0]])
        np.testing.assert_array_equal(out, [[0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(c, [2.0, 2.0, 2.0])
        assert s == 1.0

    def test_symmetric_pair(self):
        pts = np.array([[-1.0, 0, 0], [1, 0, 0]])
        out, c, s = normalize_cloud(pts)
        np.testing.assert_allclose(out, pts)
        np.testing.assert_allclose(c, 0.0)
        assert s == 1.0

    @settings(max_examples=60, deadline=None)
    @given(clouds)
    def test_round_trip_and_unit_ball(self, pts):
        out, c, s = normalize_cloud(pts)
        np.testing.assert_allclose(denormalize_cloud(out, c, s), pts, atol=1e-6)
        assert np.linalg.norm(out.mean(axis=0)) < 1e-6
        norms = np.linalg.norm(out, axis=1)
        if np.ptp(pts, axis=0).max() > 1e-6:
            assert abs(norms.max() - 1.0) < 1e-6


class TestChamfer:
    def test_identical(self, rng):
        pts = rng.normal(size=(20, 3))
        assert chamfer_distance(pts, pts) == 0.0

    def test_hand_values(self):
        assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)
        assert chamfer_distance([[0, 0, 0], [2, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])

    @settings(max_examples=40, deadline=None)
    @given(clouds, clouds, st.randoms(use_true_random=False))
    def test_symmetric_permutation_invariant_and_brute_force(self, a, b, rnd):
        d = chamfer_distance(a, b)
        assert d >= 0
        assert d == pytest.approx(chamfer_distance(b, a), rel=1e-12, abs=1e-12)
        perm = list(range(len(a)))
        rnd.shuffle(perm)
        assert chamfer_distance(a[perm], b) == pytest.approx(d, rel=1e-12, abs=1e-12)
        assert d == pytest.approx(brute_force_chamfer(a, b), rel=1e-9, abs=1e-9)

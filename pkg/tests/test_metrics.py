import itertools
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import (
    ap_exhaustive,
    brute_force_assignment,
    e_measure_loops,
    f_measure_loops,
    s_measure_loops,
)
from saliency_rl.metrics import (
    EPS,
    ScoredMask,
    average_precision,
    e_measure,
    e_measure_curve,
    evaluate_map,
    f_measure_curve,
    f_measure_max,
    hungarian_max,
    mae,
    s_measure,
)
from saliency_rl.raster import BinaryMask, DimensionError, GrayMask


def left_half(n=8):
    g = np.zeros((n, n))
    g[:, : n // 2] = 1
    return g


def random_binary(rng, shape, p=0.4):
    while True:
        g = (rng.random(shape) < p).astype(float)
        if 0 < g.sum() < g.size:
            return g


unit_maps = arrays(np.float64, (6, 7), elements=st.floats(0, 1))
bool_maps = arrays(np.bool_, (6, 7)).map(lambda a: a.astype(float))


class TestSMeasure:
    def test_hand_derived_left_half_uniform(self):
        # S_o = 0.8 (both regions constant 0.5), S_r = 16/64 (only the two all-foreground blocks score 1).
        assert s_measure(np.full((8, 8), 0.5), left_half()) == pytest.approx(0.525, abs=1e-9)

    def test_degenerate_rules(self):
        z = np.zeros((4, 4))
        assert s_measure(z, z) == 1.0
        assert s_measure(np.ones((4, 4)), z) == 0.0
        p = np.random.default_rng(0).random((4, 4))
        assert s_measure(p, z) == 1.0 - p.mean()
        assert s_measure(p, np.ones((4, 4))) == p.mean()

    def test_all_zero_prediction_on_half_plane(self):
        # S_o = 0.5 (background term only), S_r = 16/64 from the two left blocks.
        assert s_measure(np.zeros((8, 8)), left_half()) == pytest.approx(0.375, abs=1e-9)

    def test_perfect_prediction(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            g = random_binary(rng, (9, 7))
            assert s_measure(g, g) == 1.0

    def test_gray_ground_truth_is_thresholded(self):
        g = left_half()
        soft = np.where(g > 0, 129 / 255, 128 / 255)
        assert s_measure(g, soft) == s_measure(g, g)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            s_measure(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(unit_maps, bool_maps)
    def test_matches_loop_oracle(self, pred, gt):
        assert s_measure(pred, gt) == pytest.approx(s_measure_loops(pred.tolist(), gt.astype(int).tolist()), abs=1e-12)


class TestEMeasure:
    def test_complement_half_plane(self):
        g = left_half()
        # Every threshold below 1 gives perfect anti-alignment (score 0); at k = 255 the
        # prediction is empty, the alignment is 0 and each pixel scores 1/4.
        assert e_measure(1 - g, g) == pytest.approx(16 / (63 + EPS), abs=1e-12)

    def test_perfect_and_degenerate(self):
        g = left_half()
        assert e_measure(g, g) == 1.0
        z = np.zeros((5, 5))
        assert e_measure(z, z) == 1.0
        assert e_measure(np.ones((5, 5)), np.ones((5, 5))) == 1.0

    def test_curve_has_256_entries(self):
        assert e_measure_curve(np.zeros((3, 3)), np.eye(3)).shape == (256,)

    @settings(max_examples=20, deadline=None)
    @given(unit_maps, bool_maps)
    def test_matches_loop_oracle(self, pred, gt):
        assert e_measure(pred, gt) == pytest.approx(e_measure_loops(pred.tolist(), gt.astype(int).tolist()), abs=1e-12)


class TestFMeasure:
    def test_hand_case(self):
        gt = np.zeros((4, 4))
        gt[0, :] = 1
        pred = np.zeros((4, 4))
        pred[0, :2] = 1
        pred[3, :2] = 1
        assert f_measure_max(pred, gt) == pytest.approx(0.5, abs=1e-12)

    def test_perfect_and_empty_prediction(self):
        g = left_half()
        assert f_measure_max(g, g) == pytest.approx(1.0, abs=1e-12)
        assert f_measure_max(np.zeros((8, 8)), g) == 0.0

    def test_empty_ground_truth_warns(self):
        with pytest.warns(UserWarning, match="empty"):
            assert f_measure_max(np.ones((3, 3)), np.zeros((3, 3))) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(unit_maps, bool_maps)
    def test_matches_loop_oracle_and_dominates_points(self, pred, gt):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = f_measure_max(pred, gt)
        assert got == pytest.approx(f_measure_loops(pred.tolist(), gt.astype(int).tolist()), abs=1e-12)
        assert np.all(f_measure_curve(pred, gt) <= got)


class TestMAE:
    def test_examples(self):
        z = np.zeros((3, 3))
        assert mae(z, z) == 0.0
        assert mae(np.ones((3, 3)), z) == 1.0
        assert mae(np.full((3, 3), 0.25), z) == 0.25

    @settings(max_examples=50, deadline=None)
    @given(unit_maps, unit_maps, unit_maps)
    def test_symmetry_and_triangle(self, a, b, c):
        assert mae(a, b) == mae(b, a)
        assert mae(a, c) <= mae(a, b) + mae(b, c) + 1e-12


@settings(max_examples=40, deadline=None)
@given(unit_maps, bool_maps)
def test_all_metrics_in_unit_interval(pred, gt):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rec = evaluate_map(GrayMask(pred), GrayMask(gt)).as_record()
    assert set(rec) == {"S_m", "E_xi", "F_beta_max", "MAE"}
    assert all(0.0 <= v <= 1.0 for v in rec.values())


class TestHungarian:
    def test_examples(self):
        a = hungarian_max([[0.9]])
        assert a.pairs == [(0, 0)] and a.total_value == 0.9
        a = hungarian_max([[0.9, 0.1], [0.8, 0.7]])
        assert a.pairs == [(0, 0), (1, 1)] and a.total_value == pytest.approx(1.6)
        a = hungarian_max([[0.5, 0.9], [0.9, 0.5], [0.1, 0.1]])
        assert a.pairs == [(0, 1), (1, 0)] and a.total_value == pytest.approx(1.8)

    def test_empty_matrix(self):
        with pytest.raises(ValueError):
            hungarian_max(np.zeros((0, 3)))

    @settings(max_examples=80, deadline=None)
    @given(
        st.integers(1, 6).flatmap(
            lambda r: st.integers(1, 6).flatmap(lambda c: arrays(np.float64, (r, c), elements=st.floats(0, 1)))
        )
    )
    def test_assignment_invariants(self, w):
        a = hungarian_max(w)
        rows = [i for i, _ in a.pairs]
        cols = [j for _, j in a.pairs]
        assert len(a.pairs) == min(w.shape)
        assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
        assert a.total_value == pytest.approx(sum(w[i, j] for i, j in a.pairs), abs=1e-12)
        assert a.total_value == brute_force_assignment(w.tolist())


class TestAveragePrecision:
    def setup_method(self):
        self.gt = np.zeros((4, 4))
        self.gt[:2, :2] = 1
        self.fp = np.zeros((4, 4))
        self.fp[3, 3] = 1

    def test_examples(self):
        gt = BinaryMask(self.gt)
        assert average_precision([ScoredMask(gt, 1.0)], [gt], 0.5) == 1.0
        assert average_precision([], [gt], 0.5) == 0.0
        assert average_precision([ScoredMask(gt, 0.9), ScoredMask(BinaryMask(self.fp), 0.8)], [gt], 0.5) == 1.0

    def test_false_positive_ranked_first(self):
        gt = BinaryMask(self.gt)
        # PR points (0, 0) then (1, 1/2): area 1/2.
        assert average_precision([ScoredMask(BinaryMask(self.fp), 0.9), ScoredMask(gt, 0.8)], [gt], 0.5) == 0.5

    def test_no_ground_truth(self):
        assert average_precision([ScoredMask(BinaryMask(self.fp))], [], 0.5) == 0.0

    def test_bad_threshold_and_score(self):
        with pytest.raises(ValueError):
            average_precision([], [BinaryMask(self.gt)], 0.0)
        with pytest.raises(ValueError):
            ScoredMask(BinaryMask(self.gt), 1.5)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        preds = [ScoredMask(BinaryMask(random_binary(rng, (6, 6))), 0.5) for _ in range(4)]
        gts = [BinaryMask(random_binary(rng, (6, 6))) for _ in range(3)]
        assert len({average_precision(preds, gts, 0.3) for _ in range(5)}) == 1

    def test_matches_rational_oracle_on_random_sets(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            preds = [
                ScoredMask(BinaryMask((rng.random((5, 5)) < 0.3).astype(float)), float(rng.integers(0, 4)) / 4)
                for _ in range(rng.integers(0, 5))
            ]
            gts = [BinaryMask((rng.random((5, 5)) < 0.3).astype(float)) for _ in range(rng.integers(0, 4))]

            def cells(m):
                return frozenset(zip(*np.nonzero(m.values)))

            expect = ap_exhaustive([(cells(p.mask), Fraction(p.score)) for p in preds], [cells(g) for g in gts], 0.25)
            assert average_precision(preds, gts, 0.25) == float(expect)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedmsrw.objectives import (ConfusionCounts, aggregate_metrics, confusion, dice, fpr,
                                soft_dice_loss, tpr)

from conftest import central_diff, max_rel_err


class TestSoftDice:
    def test_perfect_overlap(self):
        y = np.array([1.0, 0, 1, 1, 0])
        assert soft_dice_loss(y, y)[0] == 0.0

    def test_worked_example(self):
        y = np.array([1.0, 0, 0, 1])
        p = np.array([0.8, 0.2, 0.1, 0.9])
        # independent arithmetic: 2*(0.8+0.9) / (0.64+0.04+0.01+0.81 + 2)
        expected = 1 - 3.4 / 3.5
        assert soft_dice_loss(p, y)[0] == pytest.approx(expected, abs=1e-15)
        assert soft_dice_loss(p, y)[0] == pytest.approx(0.028571, abs=1e-6)

    def test_both_empty(self):
        loss, g = soft_dice_loss(np.zeros(4), np.zeros(4))
        assert loss == 0.0 and not g.any()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            soft_dice_loss(np.array([1.2]), np.array([1.0]))

    def test_gradient(self, rng):
        p = rng.uniform(0.05, 0.95, (3, 7))
        y = (rng.random((3, 7)) < 0.4).astype(float)
        _, g = soft_dice_loss(p, y)
        assert max_rel_err(g, central_diff(lambda: soft_dice_loss(p, y)[0], p)) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(data=st.data())
    def test_range(self, data):
        n = data.draw(st.integers(1, 30))
        p = data.draw(arrays(np.float64, n, elements=st.floats(0, 1)))
        y = data.draw(arrays(np.float64, n, elements=st.sampled_from([0.0, 1.0])))
        loss = soft_dice_loss(p, y)[0]
        assert -1e-12 <= loss <= 1 + 1e-12


class TestConfusion:
    def test_hand_count(self):
        c = confusion(np.array([0.6, 0.4, 0.6, 0.4]), np.array([1, 1, 0, 0]))
        assert c == ConfusionCounts(tp=1, fp=1, fn=1, tn=1)

    def test_identical(self):
        y = np.array([1.0, 0, 1])
        c = confusion(y, y)
        assert c.fp == c.fn == 0

    def test_all_zero(self):
        c = confusion(np.zeros(9), np.zeros(9))
        assert (c.tp, c.fp, c.fn, c.tn) == (0, 0, 0, 9)

    def test_threshold_tie_maps_to_one(self):
        assert confusion(np.array([0.5]), np.array([1.0])).tp == 1


class TestRatios:
    def test_hand_values(self):
        c = ConfusionCounts(tp=2, fp=1, fn=1)
        assert dice(c) == pytest.approx(4 / 6)
        assert tpr(c) == pytest.approx(2 / 3)
        assert fpr(c) == pytest.approx(1 / 3)

    def test_perfect(self):
        c = ConfusionCounts(tp=5)
        assert (dice(c), tpr(c), fpr(c)) == (1.0, 1.0, 0.0)

    def test_both_empty_sentinels(self):
        c = ConfusionCounts(tn=10)
        assert (dice(c), tpr(c), fpr(c)) == (1.0, 1.0, 0.0)

    def test_empty_label_nonempty_prediction(self):
        assert dice(ConfusionCounts(fp=3)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(a=arrays(np.uint8, (4, 4), elements=st.integers(0, 1)),
           b=arrays(np.uint8, (4, 4), elements=st.integers(0, 1)))
    def test_bounds_and_dice_symmetry(self, a, b):
        c1 = confusion(a.astype(float), b)
        c2 = confusion(b.astype(float), a)
        for f in (dice, tpr, fpr):
            assert 0.0 <= f(c1) <= 1.0
        assert dice(c1) == dice(c2)


class TestAggregate:
    def test_single_case(self):
        r = aggregate_metrics([ConfusionCounts(tp=3, fp=1, fn=2, tn=4)])
        assert r.c_dice == r.v_dice

    def test_two_cases(self):
        cases = [ConfusionCounts(tp=3), ConfusionCounts(fp=1, fn=1)]
        r = aggregate_metrics(cases)
        assert r.c_dice == 0.5
        assert r.v_dice == pytest.approx(6 / 8)

    def test_duplicating_cases(self):
        cases = [ConfusionCounts(tp=3, fp=2), ConfusionCounts(tp=1, fn=4, tn=2)]
        a, b = aggregate_metrics(cases), aggregate_metrics(cases * 2)
        assert a.as_dict() == pytest.approx(b.as_dict())

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_metrics([])

    def test_voxel_dice_brute_force(self, rng):
        preds = [rng.random((8, 8)) for _ in range(5)]
        labels = [(rng.random((8, 8)) < 0.3).astype(float) for _ in range(5)]
        r = aggregate_metrics([confusion(p, y) for p, y in zip(preds, labels)])
        tp = fp = fn = 0
        for p, y in zip(preds, labels):
            for i in range(8):
                for j in range(8):
                    hit, truth = p[i, j] >= 0.5, y[i, j] == 1
                    tp += hit and truth
                    fp += hit and not truth
                    fn += (not hit) and truth
        assert r.v_dice == 2 * tp / (fn + 2 * tp + fp)

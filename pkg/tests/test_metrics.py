import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nestseg.metrics import (HEADERS, METRIC_NAMES, MetricReport, all_metrics, boundary,
                             confusion, evaluate_dataset, pixel_metrics, surface_distances)
from oracles import (brute_boundary, brute_confusion, brute_pixel_metrics, brute_surface,
                     random_mask_pairs)


def masks(max_side=8):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: st.tuples(arrays(bool, s), arrays(bool, s)))


class TestHandCases:
    def test_cross_case(self):
        pred = np.array([[1, 1], [0, 0]])
        truth = np.array([[1, 0], [1, 0]])
        assert confusion(pred, truth) == (1, 1, 1, 1)
        m = pixel_metrics(pred, truth)
        assert m["IoU"] == 1 / 3 and m["Dice"] == 1 / 2 and m["FOR"] == 1 / 2

    def test_three_four_five(self):
        pred = np.zeros((4, 5), bool)
        truth = np.zeros((4, 5), bool)
        pred[0, 0] = True
        truth[3, 4] = True
        d = surface_distances(pred, truth)
        assert d == {"HD95": 5.0, "ASD": 5.0}

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        m = all_metrics(z, z)
        assert m["IoU"] == m["Dice"] == m["Precision"] == m["Recall"] == 1.0
        assert m["FOR"] == 0.0 and m["HD95"] == 0.0 and m["ASD"] == 0.0

    def test_one_empty_scores_diagonal(self):
        z = np.zeros((3, 4), bool)
        o = z.copy()
        o[1, 1] = True
        assert surface_distances(z, o) == {"HD95": 5.0, "ASD": 5.0}
        assert pixel_metrics(z, o)["IoU"] == 0.0

    def test_identical_masks(self):
        m = np.zeros((6, 6), bool)
        m[1:4, 2:5] = True
        r = all_metrics(m, m)
        assert r["IoU"] == 1.0 and r["HD95"] == 0.0 and r["ASD"] == 0.0

    def test_boundary_treats_outside_as_background(self):
        full = np.ones((3, 3), bool)
        b = boundary(full)
        assert b.sum() == 8 and not b[1, 1]

    @pytest.mark.parametrize("bad", [np.zeros((2, 2, 2)), np.array([[0, 2]]), np.zeros((0, 3))])
    def test_invalid_masks(self, bad):
        with pytest.raises(ValueError):
            pixel_metrics(bad, bad)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            pixel_metrics(np.zeros((2, 2)), np.zeros((2, 3)))


class TestAgainstOracle:
    def test_random_pairs(self):
        for pred, truth in random_mask_pairs(300, seed=11):
            assert confusion(pred, truth) == brute_confusion(pred, truth)
            assert pixel_metrics(pred, truth) == brute_pixel_metrics(pred, truth)
            assert surface_distances(pred, truth) == brute_surface(pred, truth)

    @given(masks())
    def test_boundary(self, pair):
        pred, _ = pair
        assert sorted(zip(*np.nonzero(boundary(pred)))) == brute_boundary(pred)

    @given(masks())
    def test_dice_iou_relation(self, pair):
        m = pixel_metrics(*pair)
        assert abs(m["Dice"] - 2 * m["IoU"] / (1 + m["IoU"])) < 1e-12

    @given(masks())
    def test_symmetry_of_distances(self, pair):
        a, b = surface_distances(*pair), surface_distances(pair[1], pair[0])
        assert math.isclose(a["HD95"], b["HD95"], abs_tol=1e-12)
        assert math.isclose(a["ASD"], b["ASD"], abs_tol=1e-12)

    @given(masks())
    def test_ranges(self, pair):
        m = all_metrics(*pair)
        for k in ("IoU", "Dice", "Precision", "Recall", "FOR"):
            assert 0.0 <= m[k] <= 1.0
        assert 0.0 <= m["ASD"] and 0.0 <= m["HD95"] <= math.hypot(*pair[0].shape) + 1e-12


def test_percentile_agrees_with_numpy(rng):
    from nestseg.metrics import percentile_linear

    for n in range(1, 40):
        v = rng.uniform(0, 10, size=n)
        assert math.isclose(percentile_linear(v, 95), float(np.percentile(v, 95)), abs_tol=1e-12)


class TestReport:
    def test_column_order(self):
        assert HEADERS == ("IoU", "Dice", "Prec.", "Rec.", "FOR", "HD95", "ASD")
        rep = evaluate_dataset([(np.eye(3), np.eye(3))], ["a"])
        assert rep.to_text().splitlines()[0].split() == ["sample", *HEADERS]

    def test_means_and_order(self):
        z, o = np.zeros((2, 2)), np.ones((2, 2))
        rep = evaluate_dataset([(o, o), (z, o)], ["x", "y"])
        assert rep.ids == ["x", "y"]
        assert rep.means["IoU"] == 0.5
        d = json.loads(rep.to_json())
        assert d["metrics"] == list(METRIC_NAMES) and [s["id"] for s in d["samples"]] == ["x", "y"]

    def test_summary_only(self):
        rep = evaluate_dataset([(np.eye(2), np.eye(2))])
        assert len(rep.to_text(per_sample=False).splitlines()) == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            evaluate_dataset([])

    def test_id_count_mismatch(self):
        with pytest.raises(ValueError, match="ids"):
            evaluate_dataset([(np.eye(2), np.eye(2))], ["a", "b"])

    def test_report_type(self):
        assert isinstance(evaluate_dataset([(np.eye(2), np.eye(2))]), MetricReport)

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg import EmptyInputError, InvalidMaskError, ShapeError
from lesionseg.evaluate import (
    ConfusionCounts,
    aggregate,
    confusion,
    contact_sheet,
    jaccard,
    write_report,
)

PAPER_FOUR = [0.943, 0.875, 0.271, 0.527]


def set_jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Brute-force oracle over explicit coordinate sets."""
    a = {(i, j) for i, j in zip(*np.nonzero(pred))}
    b = {(i, j) for i, j in zip(*np.nonzero(gt))}
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class TestConfusion:
    def test_identical_ones(self):
        c = confusion(np.ones((2, 2), np.uint8), np.ones((2, 2), np.uint8))
        assert (c.n11, c.n10, c.n01, c.n00) == (4, 0, 0, 0)

    def test_offset_blocks(self):
        pred = np.zeros((3, 3), np.uint8)
        pred[:2, :2] = 1
        gt = np.zeros((3, 3), np.uint8)
        gt[1:, 1:] = 1
        c = confusion(pred, gt)
        assert (c.n11, c.n10, c.n01, c.n00) == (1, 3, 3, 2)

    def test_disjoint(self):
        c = confusion(np.zeros((2, 2), np.uint8), np.ones((2, 2), np.uint8))
        assert (c.n11, c.n10, c.n01, c.n00) == (0, 0, 4, 0)

    def test_counts_cover_all_pixels(self, rng):
        pred = (rng.random((9, 7)) > 0.4).astype(np.uint8)
        gt = (rng.random((9, 7)) > 0.6).astype(np.uint8)
        c = confusion(pred, gt)
        assert c.n11 + c.n10 + c.n01 + c.n00 == 63

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros((2, 2), np.uint8), np.zeros((3, 3), np.uint8))

    def test_nonbinary_rejected(self):
        with pytest.raises(InvalidMaskError):
            confusion(np.full((2, 2), 2, np.uint8), np.zeros((2, 2), np.uint8))


class TestJaccard:
    def test_identical_masks(self):
        assert jaccard(ConfusionCounts(5, 0, 0, 3)) == 1.0

    def test_one_seventh(self):
        val = jaccard(ConfusionCounts(1, 3, 3, 2))
        assert abs(val - 1 / 7) < 1e-12

    def test_both_empty_convention(self):
        assert jaccard(ConfusionCounts(0, 0, 0, 9)) == 1.0

    def test_disjoint_is_zero(self):
        assert jaccard(ConfusionCounts(0, 4, 4, 0)) == 0.0

    def test_symmetry_and_range(self, rng):
        for _ in range(50):
            pred = (rng.random((8, 8)) > 0.5).astype(np.uint8)
            gt = (rng.random((8, 8)) > 0.5).astype(np.uint8)
            a = jaccard(confusion(pred, gt))
            b = jaccard(confusion(gt, pred))
            assert a == b
            assert 0.0 <= a <= 1.0

    def test_matches_set_oracle_on_200_pairs(self, rng):
        for _ in range(200):
            pred = (rng.random((16, 16)) > rng.random()).astype(np.uint8)
            gt = (rng.random((16, 16)) > rng.random()).astype(np.uint8)
            assert jaccard(confusion(pred, gt)) == set_jaccard(pred, gt)


class TestAggregate:
    def test_paper_fig1_values(self):
        rep = aggregate(PAPER_FOUR, threshold=0.65)
        assert abs(rep.mean - 0.654) <= 1e-3
        assert abs(rep.median - 0.701) <= 1e-3
        assert abs(rep.std - 0.2717) <= 1e-3
        assert rep.success_rate == 0.5
        assert rep.success_count == 2

    def test_335_of_963(self):
        vals = [1.0] * 335 + [0.0] * (963 - 335)
        rep = aggregate(vals, threshold=0.65)
        assert abs(rep.success_rate - 0.34787) <= 1e-5

    def test_singleton(self):
        rep = aggregate([0.4], threshold=0.65)
        assert rep.mean == rep.median == 0.4
        assert rep.std == 0.0
        assert rep.success_rate == 0.0

    def test_empty_rejected(self):
        with pytest.raises(EmptyInputError):
            aggregate([], threshold=0.5)

    def test_matches_naive_reference(self, rng):
        vals = rng.random(101).tolist()
        rep = aggregate(vals, threshold=0.3)
        n = len(vals)
        mean = sum(vals) / n
        med = sorted(vals)[n // 2]
        var = sum((v - mean) ** 2 for v in vals) / n
        assert abs(rep.mean - mean) < 1e-12
        assert abs(rep.median - med) < 1e-12
        assert abs(rep.std - math.sqrt(var)) < 1e-12

    def test_even_count_median_is_middle_mean(self):
        rep = aggregate([0.1, 0.2, 0.6, 0.9], threshold=0.5)
        assert abs(rep.median - 0.4) < 1e-12

    def test_threshold_monotonicity(self, rng):
        vals = rng.random(40).tolist()
        counts = [aggregate(vals, threshold=t).success_count
                  for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert counts == sorted(counts, reverse=True)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50),
           st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_invariants(self, vals, thr):
        rep = aggregate(vals, threshold=thr)
        assert 0.0 <= rep.success_rate <= 1.0
        assert rep.success_count == sum(v >= thr for v in vals)
        assert min(vals) <= rep.median <= max(vals)


class TestReports:
    @staticmethod
    def report():
        return aggregate([0.943, 0.875], threshold=0.65, ids=["a", "b"])

    def test_csv_line_count_and_format(self, tmp_path):
        path = tmp_path / "r.csv"
        write_report(self.report(), path, "csv")
        lines = path.read_text().splitlines()
        assert len(lines) == 7  # header + 2 images + 4 summary rows
        assert lines[0] == "id,jaccard"
        assert lines[1] == "a,0.943000"
        assert lines[3].startswith("mean,")
        assert lines[4].startswith("median,")
        assert lines[5].startswith("std,")
        assert lines[6].startswith("success_rate,")
        for line in lines[1:]:
            assert len(line.split(",")[1].split(".")[1]) == 6

    def test_json_roundtrip(self, tmp_path):
        path = tmp_path / "r.json"
        rep = self.report()
        write_report(rep, path, "json")
        obj = json.loads(path.read_text())
        assert json.loads(json.dumps(obj)) == obj
        assert obj["mean"] == rep.mean
        assert obj["threshold"] == 0.65
        assert obj["success_count"] == 2
        assert obj["per_image"] == [{"id": "a", "jaccard": 0.943},
                                    {"id": "b", "jaccard": 0.875}]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            write_report(self.report(), tmp_path / "x", "xml")


class TestContactSheet:
    def test_geometry(self, rng):
        pred = (rng.random((4, 4)) > 0.5).astype(np.uint8)
        gt = (rng.random((4, 4)) > 0.5).astype(np.uint8)
        sheet = contact_sheet(pred, gt)
        assert sheet.shape == (4, 10, 3)

    def test_identical_masks_mirror(self, rng):
        m = (rng.random((5, 5)) > 0.5).astype(np.uint8)
        sheet = contact_sheet(m, m)
        assert np.array_equal(sheet[:, :5], sheet[:, 7:])

    def test_palette(self, rng):
        pred = (rng.random((6, 6)) > 0.3).astype(np.uint8)
        gt = (rng.random((6, 6)) > 0.7).astype(np.uint8)
        sheet = contact_sheet(pred, gt)
        assert set(np.unique(sheet)) <= {0, 128, 255}

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            contact_sheet(np.zeros((2, 2), np.uint8), np.zeros((3, 3), np.uint8))

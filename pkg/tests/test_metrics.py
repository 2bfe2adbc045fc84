import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pppad.metrics import (
    InvarianceReport,
    VoteHistogram,
    accumulate_votes,
    build_patch_grid,
    confusion_matrix,
    cyclic_shift_eval,
    disagreement_rate,
    mean_entropy,
    miou,
    pixel_entropy,
    sliding_window_eval,
    write_pgm,
)


def brute_entropy(row):
    total = sum(row)
    e = 0.0
    for c in row:
        if c:
            p = c / total
            e -= p * math.log(p, 2)
    return e


def brute_miou(truth, pred, k):
    ious = []
    for cls in range(k):
        gt = {i for i, t in enumerate(truth) if t == cls}
        pr = {i for i, p in enumerate(pred) if p == cls}
        union = gt | pr
        if union:
            ious.append(len(gt & pr) / len(union))
    return sum(ious) / len(ious) if ious else 0.0


class TestPatchGrid:
    def test_single_patch(self):
        assert build_patch_grid(10, 10, 10, 5).coords == ((0, 0),)

    def test_even_grid(self):
        grid = build_patch_grid(12, 12, 8, 4)
        assert grid.coords == ((0, 0), (0, 4), (4, 0), (4, 4))

    def test_clamped_last_position(self):
        grid = build_patch_grid(10, 10, 8, 4)
        assert sorted({y for y, _ in grid.coords}) == [0, 2]

    def test_full_scale_geometry(self):
        ys = sorted({y for y, _ in build_patch_grid(1050, 1400, 475, 47).coords})
        assert ys[0] == 0 and ys[-1] == 1050 - 475
        assert all(b - a == 47 for a, b in zip(ys[:-2], ys[1:-1]))

    def test_stride_beyond_patch(self):
        with pytest.raises(ValueError):
            build_patch_grid(10, 10, 4, 5)

    def test_patch_too_big(self):
        with pytest.raises(ValueError):
            build_patch_grid(8, 12, 10, 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(4, 30), st.integers(4, 30), st.integers(1, 4), st.integers(1, 9))
    def test_full_coverage(self, h, w, p_div, stride):
        patch = max(1, min(h, w) // p_div)
        stride = min(stride, patch)
        grid = build_patch_grid(h, w, patch, stride)
        covered = np.zeros((h, w), bool)
        for y, x in grid.coords:
            covered[y:y + patch, x:x + patch] = True
        assert covered.all()


class TestVotes:
    def test_single_patch_one_vote_each(self):
        grid = build_patch_grid(6, 6, 6, 1)
        hist = accumulate_votes(grid, [np.zeros((6, 6), int)], 3)
        assert np.all(hist.totals() == 1)

    def test_overlapping_agreeing_patches(self):
        grid = build_patch_grid(5, 5, 5, 1)
        grid = type(grid)(5, 5, 5, 1, grid.coords * 2)
        hist = accumulate_votes(grid, [np.full((5, 5), 2)] * 2, 3)
        assert np.all(hist.counts == np.array([0, 0, 2]))

    def test_coverage_matches_rasterization(self, rng):
        grid = build_patch_grid(12, 12, 8, 4)
        maps = [rng.integers(0, 3, (8, 8)) for _ in grid.coords]
        hist = accumulate_votes(grid, maps, 3)
        raster = np.zeros((12, 12), int)
        for y, x in grid.coords:
            for i in range(8):
                for j in range(8):
                    raster[y + i, x + j] += 1
        assert np.array_equal(hist.totals().reshape(12, 12), raster)
        assert hist.totals().sum() == len(grid) * 64

    def test_class_out_of_range(self):
        grid = build_patch_grid(4, 4, 4, 1)
        with pytest.raises(ValueError):
            accumulate_votes(grid, [np.full((4, 4), 3)], 3)


class TestEntropy:
    def test_unanimous(self):
        assert pixel_entropy([0, 5, 0]) == 0

    def test_binary_split(self):
        assert pixel_entropy([4, 4]) == pytest.approx(1.0)

    def test_three_to_one(self):
        assert pixel_entropy([3, 1]) == pytest.approx(0.8112781244591328, rel=1e-12)

    def test_empty_row(self):
        with pytest.raises(ValueError):
            pixel_entropy([0, 0])

    def test_mean_entropy_half_split(self):
        hist = VoteHistogram(np.array([[2, 0], [0, 3], [1, 1], [5, 5]]))
        assert mean_entropy(hist) == pytest.approx(0.5)

    def test_disagreement_quarter(self):
        hist = VoteHistogram(np.array([[2, 0], [0, 3], [4, 0], [2, 2]]))
        assert disagreement_rate(hist, 0.0) == 0.25

    def test_threshold_above_bound(self, rng):
        hist = VoteHistogram(rng.integers(0, 5, (50, 4)) + 1)
        assert disagreement_rate(hist, math.log2(4)) == 0

    def test_all_unanimous(self):
        hist = VoteHistogram(np.array([[3, 0, 0], [0, 0, 1]]))
        assert mean_entropy(hist) == 0 and disagreement_rate(hist, 0.3) == 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 6), min_size=3, max_size=3).filter(lambda r: sum(r) > 0),
                    min_size=1, max_size=30), st.floats(0, 2))
    def test_properties(self, rows, theta):
        hist = VoteHistogram(np.array(rows))
        e = np.array([brute_entropy(r) for r in rows])
        assert np.all(e <= math.log2(3) + 1e-12)
        assert mean_entropy(hist) == pytest.approx(e.mean(), rel=1e-9, abs=1e-15)
        assert disagreement_rate(hist, theta) == np.mean(e > theta)
        assert disagreement_rate(hist, theta) <= disagreement_rate(hist, theta / 2)
        assert (disagreement_rate(hist, 0) == 0) == (mean_entropy(hist) == 0)
        relabeled = VoteHistogram(np.array(rows)[:, [2, 0, 1]])
        assert mean_entropy(relabeled) == pytest.approx(mean_entropy(hist), rel=1e-12, abs=1e-15)
        assert disagreement_rate(relabeled, theta) == disagreement_rate(hist, theta)


class TestMIoU:
    def test_perfect(self):
        assert miou(np.diag([5, 3, 2])) == 1.0

    def test_all_class_zero(self):
        truth = np.array([0] * 50 + [1] * 50)
        cm = confusion_matrix(truth, np.zeros(100, int), 2)
        assert miou(cm) == pytest.approx(0.25)

    def test_empty(self):
        assert miou(np.zeros((3, 3))) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_set_oracle(self, seed):
        r = np.random.default_rng(seed)
        truth, pred = r.integers(0, 4, 60), r.integers(0, 4, 60)
        pred[pred == 3] = 2  # class 3 absent from predictions
        assert miou(confusion_matrix(truth, pred, 5)) == pytest.approx(brute_miou(truth, pred, 5), rel=1e-12)

    def test_confusion_total(self, rng):
        truth, pred = rng.integers(0, 3, (4, 5)), rng.integers(0, 3, (4, 5))
        cm = confusion_matrix(truth, pred, 3)
        assert cm.sum() == 20 and np.all(cm >= 0)


class TestReports:
    def test_bound_audit(self):
        with pytest.raises(AssertionError):
            InvarianceReport(meanE=32.8108, disR=0.8374, theta=0, N=10, K=21).check_bounds()
        InvarianceReport(meanE=1.8811, disR=0.6482, theta=0, N=10, K=21).check_bounds()

    def test_json_fields(self):
        report = InvarianceReport.from_histogram(VoteHistogram(np.array([[1, 1], [2, 0]])))
        assert set(json.loads(json.dumps(report.to_dict()))) == {"meanE", "disR", "theta", "N", "K"}

    def test_constant_predictor(self, rng):
        images = rng.random((2, 3, 16, 16)).astype(np.float32)
        labels = rng.integers(0, 3, (2, 16, 16))
        report, score, cm = sliding_window_eval(
            lambda batch: np.ones((len(batch), 8, 8), int), images, labels, 8, 4, 3
        )
        assert report.meanE == 0 and report.disR == 0
        assert report.N == 2 * 16 * 16
        # IoU of class 1 is (its GT pixels) / (all pixels); classes 0 and 2 have IoU 0
        iou1 = cm[1, 1] / cm.sum()
        assert score == pytest.approx(iou1 / 3)

    def test_cyclic_oracle_on_shift_equivariant_predictor(self, rng):
        image = rng.random((3, 12, 12))

        def predict(batch):
            return (batch[:, 0] > 0.5).astype(int)

        shifts = [(int(a), int(b)) for a, b in rng.integers(0, 12, (16, 2))]
        report = cyclic_shift_eval(predict, image, shifts, 2)
        assert report.meanE == 0 and report.disR == 0

    def test_cyclic_oracle_detects_position_dependence(self, rng):
        image = rng.random((1, 8, 8))

        def predict(batch):
            out = np.zeros(batch.shape[:1] + batch.shape[2:], int)
            out[:, 0, :] = 1  # a "border detector"
            return out

        report = cyclic_shift_eval(predict, image, [(0, 0), (1, 0)], 2)
        assert report.meanE > 0 and report.disR == pytest.approx(2 * 8 / 64)

    def test_pgm_export(self, tmp_path):
        write_pgm(tmp_path / "e.pgm", np.array([[0.0, 1.0], [0.5, 2.0]]), 2.0)
        data = (tmp_path / "e.pgm").read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert list(data[-4:]) == [0, 128, 64, 255]

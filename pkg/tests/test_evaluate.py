"""Canny edges, boundary precision/recall, thickness, frame alignment."""

import numpy as np
import pytest
from scipy import ndimage

from evbei.evaluate import align_frame, boundary_pr, canny, edge_thickness


def step_image(h, w, col, lo=0.0, hi=1.0):
    img = np.full((h, w), lo)
    img[:, col:] = hi
    return img


class TestCanny:
    def test_step_single_edge_within_one_px(self):
        img = step_image(40, 60, 30)
        edges = canny(img, 0.15, 0.45)
        cols = np.unique(np.nonzero(edges)[1])
        assert len(cols) == 1
        assert abs(int(cols[0]) - 30) <= 1
        # One edge pixel per row in the interior (smoothing clips corners).
        per_row = edges.sum(axis=1)
        assert (per_row[5:-5] == 1).all()

    def test_constant_image_empty(self):
        assert not canny(np.full((30, 30), 0.7), 0.15, 0.45).any()

    def test_extreme_thresholds_empty(self):
        img = step_image(30, 40, 20)
        assert not canny(img, 1.0, 1.0).any()

    def test_invalid_thresholds(self):
        img = step_image(10, 10, 5)
        with pytest.raises(ValueError):
            canny(img, 0.5, 0.2)
        with pytest.raises(ValueError):
            canny(img, -0.1, 0.5)
        with pytest.raises(ValueError):
            canny(img, 0.1, 1.5)

    def test_horizontal_edge(self):
        img = step_image(60, 40, 30).T.copy()
        edges = canny(img, 0.15, 0.45)
        rows = np.unique(np.nonzero(edges)[0])
        assert len(rows) == 1
        assert abs(int(rows[0]) - 30) <= 1

    def test_diagonal_edge_thin(self):
        # 45 degree edge: NMS keeps a thin chain, roughly one per scanline.
        h = w = 48
        ys, xs = np.mgrid[0:h, 0:w]
        img = (xs + ys >= 48).astype(float)
        edges = canny(img, 0.15, 0.45)
        assert edges.any()
        interior = edges[8:-8, 8:-8]
        per_row = interior.sum(axis=1)
        assert per_row.max() <= 2  # never a thick band

    def test_nms_one_px_along_gradient(self):
        # No edge pixel may have a same-direction edge neighbor on both
        # perpendicular offsets: that would be a >1 px thick response.
        for col in (15, 20):
            img = step_image(40, 40, col)
            edges = canny(img, 0.1, 0.3)
            gx = ndimage.sobel(ndimage.gaussian_filter(img, 1.4), axis=1)
            gy = ndimage.sobel(ndimage.gaussian_filter(img, 1.4), axis=0)
            ang = np.mod(np.arctan2(gy, gx), np.pi)
            sector = np.floor((ang + np.pi / 8) / (np.pi / 4)).astype(int) % 4
            off = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
            ys, xs = np.nonzero(edges)
            for y, x in zip(ys, xs):
                dy, dx = off[int(sector[y, x])]
                both = True
                for s in (+1, -1):
                    yy, xx = y + s * dy, x + s * dx
                    if not (0 <= yy < 40 and 0 <= xx < 40):
                        both = False
                        break
                    if not edges[yy, xx]:
                        both = False
                        break
                    if abs(ang[yy, xx] - ang[y, x]) > np.pi / 8:
                        both = False
                        break
                assert not both


def pr_oracle(pred, gt, tol):
    h, w = pred.shape
    tp_pred = 0
    for y in range(h):
        for x in range(w):
            if not pred[y, x]:
                continue
            hit = False
            for yy in range(max(0, y - tol), min(h, y + tol + 1)):
                for xx in range(max(0, x - tol), min(w, x + tol + 1)):
                    if gt[yy, xx]:
                        hit = True
            tp_pred += hit
    tp_gt = 0
    for y in range(h):
        for x in range(w):
            if not gt[y, x]:
                continue
            hit = False
            for yy in range(max(0, y - tol), min(h, y + tol + 1)):
                for xx in range(max(0, x - tol), min(w, x + tol + 1)):
                    if pred[yy, xx]:
                        hit = True
            tp_gt += hit
    return tp_pred, tp_gt


class TestBoundaryPR:
    def test_identical_maps(self):
        rng = np.random.default_rng(0)
        m = rng.random((20, 20)) < 0.2
        m[0, 0] = True
        pr = boundary_pr(m, m)
        assert pr.precision == 1.0 and pr.recall == 1.0

    def test_one_px_shift_within_tolerance(self):
        gt = np.zeros((20, 20), dtype=bool)
        gt[:, 10] = True
        pred = np.zeros_like(gt)
        pred[:, 11] = True
        pr = boundary_pr(pred, gt)
        assert pr.precision == 1.0 and pr.recall == 1.0

    def test_random_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            pred = rng.random((16, 16)) < 0.15
            gt = rng.random((16, 16)) < 0.15
            pr = boundary_pr(pred, gt)
            tp_pred, tp_gt = pr_oracle(pred, gt, 1)
            assert pr.tp_pred == tp_pred
            assert pr.tp_gt == tp_gt

    def test_swap_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.random((24, 24)) < 0.1
        b = rng.random((24, 24)) < 0.1
        ab = boundary_pr(a, b)
        ba = boundary_pr(b, a)
        assert ab.precision == ba.recall
        assert ab.recall == ba.precision

    def test_tolerance_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pred = rng.random((20, 20)) < 0.1
            gt = rng.random((20, 20)) < 0.1
            p0 = boundary_pr(pred, gt, tol=0)
            p1 = boundary_pr(pred, gt, tol=1)
            assert p1.precision >= p0.precision - 1e-15
            assert p1.recall >= p0.recall - 1e-15

    def test_empty_conventions(self):
        empty = np.zeros((8, 8), dtype=bool)
        some = np.zeros((8, 8), dtype=bool)
        some[4, 4] = True
        both = boundary_pr(empty, empty)
        assert both.precision == 1.0 and both.recall == 1.0
        pe = boundary_pr(empty, some)
        assert pe.precision == 1.0 and pe.recall == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            boundary_pr(np.zeros((4, 4), dtype=bool), np.zeros((4, 5), dtype=bool))

    def test_counts_sum(self):
        rng = np.random.default_rng(4)
        pred = rng.random((16, 16)) < 0.2
        gt = rng.random((16, 16)) < 0.2
        pr = boundary_pr(pred, gt)
        assert pr.tp_pred + pr.fp == int(pred.sum())
        assert pr.tp_gt + pr.fn == int(gt.sum())


class TestEdgeThickness:
    def test_single_vertical_line(self):
        a = np.zeros((20, 20), dtype=bool)
        a[:, 10] = True
        assert edge_thickness(a, max_run=9) == 1.0

    def test_three_px_band(self):
        a = np.zeros((20, 20), dtype=bool)
        a[:, 9:12] = True
        assert edge_thickness(a, max_run=9) == 3.0

    def test_empty(self):
        assert edge_thickness(np.zeros((5, 5), dtype=bool)) == 0.0

    def test_no_exclusion_counts_long_runs(self):
        a = np.zeros((6, 6), dtype=bool)
        a[:, 2] = True
        # rows: six 1-runs; columns: one 6-run
        assert edge_thickness(a, max_run=None) == pytest.approx((6 * 1 + 6) / 7)


class TestAlignFrame:
    def test_nearest(self):
        assert align_frame([0.0, 0.1], 0.04) == 0

    def test_tie_goes_earlier(self):
        assert align_frame([0.0, 0.1], 0.05) == 0

    def test_clamps_to_nearest_end(self):
        assert align_frame([0.0, 0.1], 0.2) == 1

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            align_frame([], 0.1)

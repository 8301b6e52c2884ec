import math

import numpy as np
import pytest

from gixtrack.detect import Detection
from gixtrack.geometry import ExperimentGeometry
from gixtrack.pipeline import (
    BenchmarkResult,
    benchmark_frame,
    benchmark_series,
    preprocess_frame,
)


def truth_row(q_lo, q_hi, phi_lo, phi_hi):
    return [q_lo, q_hi, phi_lo, phi_hi, (q_lo + q_hi) / 2, (q_hi - q_lo) / 8]


def det(q, w, phi, ext, score=1.0, frame=0):
    return Detection(
        q_center=q, q_width=w, phi_center=phi, phi_extent=ext, score=score, frame=frame
    )


def replay(boxes, frame=0):
    return [
        det((b[0] + b[1]) / 2, b[1] - b[0], (b[2] + b[3]) / 2, b[3] - b[2], frame=frame)
        for b in boxes
    ]


class TestMatching:
    def test_truth_replayed_as_detections_is_perfect(self):
        boxes = np.array([
            truth_row(100.0, 110.0, 10.0, 30.0),
            truth_row(200.0, 220.0, 40.0, 80.0),
            truth_row(300.0, 304.0, 5.0, 6.0),
        ])
        r = benchmark_frame(replay(boxes), boxes)
        assert r.recall == 1.0
        assert r.n_false == 0 and r.n_duplicates == 0
        assert r.error_percentile(95) == 0.0
        assert r.missed_by_frame == {0: 0}

    def test_no_detections(self):
        boxes = np.array([truth_row(100.0, 110.0, 10.0, 30.0)])
        r = benchmark_frame([], boxes)
        assert r.recall == 0.0
        assert r.n_detections == 0
        assert r.missed_by_frame == {0: 1}
        assert math.isnan(r.error_percentile(95))

    def test_no_truth(self):
        r = benchmark_frame([det(50.0, 4.0, 20.0, 10.0)], np.zeros((0, 6)))
        assert r.n_false == 1
        assert r.recall == 0.0

    def test_radial_window_is_the_detected_width(self):
        boxes = np.array([truth_row(100.0, 104.0, 10.0, 30.0)])
        w = 5.0
        inside = det(102.0 + w * 1.0, w, 20.0, 40.0)
        outside = det(102.0 + w * 1.01, w, 20.0, 40.0)
        assert benchmark_frame([inside], boxes).recall == 1.0
        r = benchmark_frame([outside], boxes)
        assert r.recall == 0.0 and r.n_false == 1

    def test_angular_window_is_the_detected_extent(self):
        boxes = np.array([truth_row(100.0, 104.0, 10.0, 30.0)])
        ext = 8.0
        inside = det(102.0, 5.0, 20.0 + ext * 1.0, ext)
        outside = det(102.0, 5.0, 20.0 + ext * 1.01, ext)
        assert benchmark_frame([inside], boxes).recall == 1.0
        assert benchmark_frame([outside], boxes).recall == 0.0

    def test_one_detection_may_cover_overlapping_truths(self):
        boxes = np.array([
            truth_row(100.0, 106.0, 10.0, 30.0),
            truth_row(103.0, 109.0, 12.0, 32.0),
        ])
        wide = det(104.5, 8.0, 21.0, 22.0)
        r = benchmark_frame([wide], boxes)
        assert r.n_matched_truth == 2
        assert r.n_false == 0 and r.n_duplicates == 0
        assert len(r.center_errors) == 2

    def test_error_taken_from_radially_closest(self):
        boxes = np.array([truth_row(100.0, 104.0, 10.0, 30.0)])
        near = det(102.5, 5.0, 20.0, 40.0)
        far = det(104.0, 5.0, 20.0, 40.0)
        r = benchmark_frame([far, near], boxes)
        assert r.n_matched_truth == 1
        assert r.center_errors == [pytest.approx(0.5)]
        assert r.n_duplicates == 1 and r.n_false == 0

    def test_ignored_truth_rows_neutralize_both_sides(self):
        boxes = np.array([
            truth_row(100.0, 104.0, 10.0, 30.0),
            truth_row(300.0, 302.0, 50.0, 52.0),  # faint: below the floor
        ])
        ignore = np.array([False, True])
        covering = replay(boxes)
        r = benchmark_frame(covering, boxes, ignore=ignore)
        assert r.n_truth == 1 and r.recall == 1.0
        assert r.n_false == 0  # covering an ignored row is not spurious
        assert len(r.center_errors) == 1

        r_missed = benchmark_frame(covering[:1], boxes, ignore=ignore)
        assert r_missed.recall == 1.0  # the faint row does not count missed
        assert r_missed.missed_by_frame == {0: 0}

    def test_zero_size_detection_matches_nothing(self):
        boxes = np.array([truth_row(100.0, 104.0, 10.0, 30.0)])
        r = benchmark_frame([det(102.0, 0.0, 20.0, 40.0)], boxes)
        assert r.recall == 0.0 and r.n_false == 1


class TestAggregation:
    def test_series_merges_over_the_frame_union(self):
        boxes = np.array([truth_row(100.0, 110.0, 10.0, 30.0)])
        dets = {0: replay(boxes, frame=0), 2: [det(50.0, 4.0, 20.0, 10.0, frame=2)]}
        truth = {0: boxes, 1: boxes}
        r = benchmark_series(dets, truth)
        assert r.n_frames == 3
        assert r.n_truth == 2 and r.n_matched_truth == 1
        assert r.n_false == 1
        assert r.missed_by_frame == {0: 0, 1: 1, 2: 0}
        assert r.false_by_frame == {0: 0, 1: 0, 2: 1}
        assert r.false_per_frame == pytest.approx(1.0 / 3.0)

    def test_merge_accumulates(self):
        boxes = np.array([truth_row(100.0, 110.0, 10.0, 30.0)])
        total = BenchmarkResult()
        for frame in range(4):
            total.merge(benchmark_frame(replay(boxes, frame=frame), boxes, frame=frame))
        assert total.n_frames == 4
        assert total.n_truth == 4 and total.recall == 1.0
        assert len(total.center_errors) == 4


class TestPreprocess:
    def test_frame_to_plain_and_enhanced(self, use_case_geom):
        rng = np.random.default_rng(9)
        img = rng.uniform(5.0, 50.0, size=use_case_geom.detector_shape)
        plain, enhanced = preprocess_frame(img, use_case_geom, shape=(32, 64))
        assert plain.intensities.shape == (32, 64)
        assert enhanced.intensities.shape == (32, 64)
        np.testing.assert_array_equal(plain.mask, enhanced.mask)
        np.testing.assert_array_equal(plain.q, enhanced.q)
        vis = enhanced.intensities[~enhanced.mask]
        assert vis.min() >= 0.0 and vis.max() <= 1.0
        # uniform grids: the on-disk axes description must be loss-free
        dq = np.diff(plain.q)
        dphi = np.diff(plain.phi_deg)
        assert np.allclose(dq, dq[0]) and np.allclose(dphi, dphi[0])

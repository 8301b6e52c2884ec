"""End-to-end composition of the analysis stages, plus detector benchmarking.

The canonical chain for measured data is::

    detector frame -> LP correction -> reciprocal regrid -> polar resample
                   -> CLAHE -> peak detection -> NMS -> score filter
                   -> frame linking -> duration filter -> profile fits
                   -> phase identification / indexing -> lattice refinement

Synthetic training canvases skip the geometry stages: they are already
polar, in pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detect as _detect
from . import postprocess as _post
from .enhance import clahe
from .geometry import ExperimentGeometry, PolarImage, polar_map


def preprocess_frame(
    img: np.ndarray,
    geom: ExperimentGeometry,
    shape: tuple[int, int] = (512, 1024),
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    lp: bool = True,
    tiles: tuple[int, int] = (8, 8),
    clip_limit: float | None = 4.0,
    nbins: int = 256,
) -> tuple[PolarImage, PolarImage]:
    """Detector frame to ``(plain, enhanced)`` polar images.

    The plain image feeds profile fitting and intensity analysis; the
    contrast-enhanced one exists solely for peak detection.
    """
    pimg = polar_map(img, geom, shape=shape, grid=grid, lp=lp)
    enhanced = clahe(
        pimg.intensities, mask=pimg.mask, tiles=tiles, clip_limit=clip_limit, nbins=nbins
    )
    return pimg, PolarImage(
        intensities=enhanced, phi_deg=pimg.phi_deg, q=pimg.q, mask=pimg.mask
    )


def pixel_polar(img: np.ndarray, mask: np.ndarray | None = None) -> PolarImage:
    """Wrap an already-polar canvas (e.g. a synthetic frame) with pixel axes."""
    img = np.asarray(img, dtype=np.float64)
    if mask is None:
        mask = np.zeros(img.shape, dtype=bool)
    n_phi, n_q = img.shape
    return PolarImage(
        intensities=img,
        phi_deg=np.arange(n_phi, dtype=np.float64),
        q=np.arange(n_q, dtype=np.float64),
        mask=np.asarray(mask, dtype=bool),
    )


def detect_and_clean(
    pimg: PolarImage,
    frame: int = 0,
    nms_iou: float = 0.1,
    min_score: float = 0.5,
    **detector_kwargs,
) -> list[_detect.Detection]:
    """Detection plus standard cleanup on one frame."""
    dets = _detect.detect_peaks(pimg, frame=frame, **detector_kwargs)
    dets = _post.nms(dets, iou_threshold=nms_iou)
    return _post.filter_score(dets, min_score=min_score)


def track_series(
    detections: list[_detect.Detection],
    link_iou: float = 0.3,
    min_frames: int = 3,
) -> list[_post.Track]:
    """Link per-frame detections and keep persistent tracks."""
    tracks = _post.link_frames(detections, iou_threshold=link_iou)
    return _post.filter_duration(tracks, min_frames=min_frames)


# --------------------------------------------------------------------------
# benchmarking against ground truth


@dataclass
class BenchmarkResult:
    """Detector quality against ground-truth boxes.

    Matching uses size-normalized residuals: a detection qualifies for a
    truth peak when ``|q_det - q_truth| / q_width <= 1`` and
    ``|phi_det - phi_truth| / phi_extent <= 1`` (both normalized by the
    detection's own box size).  A truth peak is found when any detection
    qualifies for it - overlapping features legitimately share one
    detected box - and its radial error is sampled from the radially
    closest qualifying detection, so ``center_errors`` percentiles
    describe localization quality of correct detections.  A detection
    qualifying for no truth peak is false; one whose every qualifying peak
    is better served by another detection is a duplicate.
    """

    n_truth: int = 0
    n_detections: int = 0
    n_matched_truth: int = 0
    n_false: int = 0
    n_duplicates: int = 0
    n_frames: int = 0
    center_errors: list[float] = field(default_factory=list)
    missed_by_frame: dict[int, int] = field(default_factory=dict)
    false_by_frame: dict[int, int] = field(default_factory=dict)

    @property
    def recall(self) -> float:
        return self.n_matched_truth / self.n_truth if self.n_truth else 0.0

    @property
    def false_discovery_rate(self) -> float:
        return self.n_false / self.n_detections if self.n_detections else 0.0

    @property
    def false_per_frame(self) -> float:
        return self.n_false / self.n_frames if self.n_frames else 0.0

    @property
    def duplicate_rate(self) -> float:
        return self.n_duplicates / self.n_detections if self.n_detections else 0.0

    def error_percentile(self, pct: float) -> float:
        if not self.center_errors:
            return float("nan")
        return float(np.percentile(self.center_errors, pct))

    def merge(self, other: "BenchmarkResult") -> None:
        self.n_truth += other.n_truth
        self.n_detections += other.n_detections
        self.n_matched_truth += other.n_matched_truth
        self.n_false += other.n_false
        self.n_duplicates += other.n_duplicates
        self.n_frames += other.n_frames
        self.center_errors.extend(other.center_errors)
        self.missed_by_frame.update(other.missed_by_frame)
        self.false_by_frame.update(other.false_by_frame)


def benchmark_frame(
    detections: list[_detect.Detection],
    truth_boxes: np.ndarray,
    frame: int = 0,
    ignore: np.ndarray | None = None,
) -> BenchmarkResult:
    """Match detections of one frame against its truth boxes.

    Every truth peak with at least one qualifying detection (see
    ``BenchmarkResult``) counts as found, with its radial error taken from
    the radially closest qualifying detection.  Truth rows flagged in
    ``ignore`` still take part in
    matching - a detection covering one is not false - but are excluded
    from the truth count, recall, and error samples; use this to exclude
    peaks below an amplitude floor from the guarantee without letting
    their detections look spurious.
    """
    truth_boxes = np.asarray(truth_boxes, dtype=np.float64).reshape(-1, 6)
    n_rows = truth_boxes.shape[0]
    if ignore is None:
        ignore_mask = np.zeros(n_rows, dtype=bool)
    else:
        ignore_mask = np.asarray(ignore, dtype=bool).reshape(n_rows)
    truth_q = truth_boxes[:, 4]
    truth_phi = 0.5 * (truth_boxes[:, 2] + truth_boxes[:, 3])

    best_dist = np.full(n_rows, np.inf)
    best_det = np.full(n_rows, -1, dtype=np.intp)
    qualifies = np.zeros(len(detections), dtype=bool)
    centers = np.zeros(len(detections))
    for di, det in enumerate(detections):
        qc = det.q_refined
        centers[di] = qc
        rad = np.abs(truth_q - qc) / det.q_width if det.q_width > 0 else np.full(n_rows, np.inf)
        ang = (
            np.abs(truth_phi - det.phi_center) / det.phi_extent
            if det.phi_extent > 0
            else np.full(n_rows, np.inf)
        )
        ok = (rad <= 1.0) & (ang <= 1.0)
        if not ok.any():
            continue
        qualifies[di] = True
        dist = np.abs(truth_q - qc)
        closer = ok & (dist < best_dist)
        best_dist[closer] = dist[closer]
        best_det[closer] = di

    found = best_det >= 0
    scored = ~ignore_mask
    n_truth = int(scored.sum())
    n_found = int((found & scored).sum())
    errors = [
        float(np.abs(truth_q[t] - centers[best_det[t]]))
        for t in np.flatnonzero(found & scored)
    ]
    primary = set(best_det[found].tolist())
    n_false = int((~qualifies).sum())
    n_dup = int(sum(1 for di in range(len(detections)) if qualifies[di] and di not in primary))
    return BenchmarkResult(
        n_truth=n_truth,
        n_detections=len(detections),
        n_matched_truth=n_found,
        n_false=n_false,
        n_duplicates=n_dup,
        n_frames=1,
        center_errors=errors,
        missed_by_frame={frame: n_truth - n_found},
        false_by_frame={frame: n_false},
    )


def benchmark_series(
    detections_by_frame: dict[int, list[_detect.Detection]],
    truth_by_frame: dict[int, np.ndarray],
    ignore_by_frame: dict[int, np.ndarray] | None = None,
) -> BenchmarkResult:
    """Aggregate benchmark over all frames present in either mapping."""
    total = BenchmarkResult()
    for frame in sorted(set(detections_by_frame) | set(truth_by_frame)):
        total.merge(
            benchmark_frame(
                detections_by_frame.get(frame, []),
                truth_by_frame.get(frame, np.zeros((0, 6))),
                frame=frame,
                ignore=None if ignore_by_frame is None else ignore_by_frame.get(frame),
            )
        )
    return total

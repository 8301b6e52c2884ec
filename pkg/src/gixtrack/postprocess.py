"""Detection cleanup and tracking across frames of an in-situ series.

Stages, in the order a pipeline normally applies them:

1. :func:`nms` - greedy non-maximum suppression on (radius, angle) boxes.
2. :func:`filter_score` - drop low-confidence detections.
3. :func:`fit_detections` - refine each detection's radial position by a
   Gaussian-plus-linear-background least-squares fit to the local profile.
4. :func:`link_frames` - connect detections in adjacent frames into tracks
   by highest box overlap, each detection joining at most one track.
5. :func:`filter_duration` - keep tracks observed over enough frames.

All geometry is axis-aligned boxes in the polar plane, in the units of the
underlying image axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .detect import Detection, PeakFit
from .geometry import PolarImage


def iou(a: Detection, b: Detection) -> float:
    """Intersection over union of two detection boxes."""
    aq, ap = a.q_interval, a.phi_interval
    bq, bp = b.q_interval, b.phi_interval
    iw = min(aq[1], bq[1]) - max(aq[0], bq[0])
    ih = min(ap[1], bp[1]) - max(ap[0], bp[0])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.q_width * a.phi_extent + b.q_width * b.phi_extent - inter
    if union <= 0:
        return 0.0
    return inter / union


def _rank_key(d: Detection):
    return (-d.score, d.q_center, d.phi_center)


def nms(detections: list[Detection], iou_threshold: float = 0.1) -> list[Detection]:
    """Greedy non-maximum suppression.

    Detections are visited by descending score (ties broken by position);
    each kept detection suppresses every remaining one overlapping it with
    IoU strictly above ``iou_threshold``.
    """
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: _rank_key(detections[i]))
    q_lo = np.array([detections[i].q_interval[0] for i in order])
    q_hi = np.array([detections[i].q_interval[1] for i in order])
    p_lo = np.array([detections[i].phi_interval[0] for i in order])
    p_hi = np.array([detections[i].phi_interval[1] for i in order])
    areas = np.array([detections[i].q_width * detections[i].phi_extent for i in order])

    n = len(order)
    alive = np.ones(n, dtype=bool)
    kept: list[Detection] = []
    if n <= 2000:
        # moderate counts: all pairwise overlaps in one broadcast, so the
        # greedy loop below touches a single precomputed row per survivor
        iw = np.minimum(q_hi[:, None], q_hi[None, :]) - np.maximum(q_lo[:, None], q_lo[None, :])
        ih = np.minimum(p_hi[:, None], p_hi[None, :]) - np.maximum(p_lo[:, None], p_lo[None, :])
        inter = iw * ih
        union = areas[:, None] + areas[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            overlap = np.where((iw > 0) & (ih > 0) & (union > 0), inter / union, 0.0)
        suppress = overlap <= iou_threshold
        for i in range(n):
            if alive[i]:
                kept.append(detections[order[i]])
                alive &= suppress[i]
        return kept
    for i in range(n):
        if not alive[i]:
            continue
        kept.append(detections[order[i]])
        iw = np.minimum(q_hi[i], q_hi) - np.maximum(q_lo[i], q_lo)
        ih = np.minimum(p_hi[i], p_hi) - np.maximum(p_lo[i], p_lo)
        inter = iw * ih
        union = areas[i] + areas - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            overlap = np.where(
                (iw > 0) & (ih > 0) & (union > 0), inter / union, 0.0
            )
        alive &= ~(overlap > iou_threshold)
    return kept


def filter_score(detections: list[Detection], min_score: float = 0.8) -> list[Detection]:
    """Keep detections with score >= ``min_score``."""
    return [d for d in detections if d.score >= min_score]


@dataclass
class Track:
    """One diffraction peak followed through consecutive frames."""

    track_id: int
    detections: list[Detection]

    @property
    def frames(self) -> list[int]:
        return [d.frame for d in self.detections]

    @property
    def duration(self) -> int:
        return len(self.detections)


def link_frames(detections: list[Detection], iou_threshold: float = 0.3) -> list[Track]:
    """Link detections of adjacent frames into tracks.

    For each pair of consecutive frame numbers, candidate links are ranked
    by IoU and accepted greedily from the top, so every detection continues
    at most one track and links are mutually best.  Links require
    IoU >= ``iou_threshold``; a skipped frame number ends a track.
    """
    by_frame: dict[int, list[Detection]] = {}
    for d in detections:
        by_frame.setdefault(d.frame, []).append(d)
    for dets in by_frame.values():
        dets.sort(key=_rank_key)

    frames = sorted(by_frame)
    successor: dict[tuple[int, int], tuple[int, int]] = {}
    has_pred: set[tuple[int, int]] = set()
    for f in frames:
        if f + 1 not in by_frame:
            continue
        cur, nxt = by_frame[f], by_frame[f + 1]
        pairs = []
        for i, a in enumerate(cur):
            for j, b in enumerate(nxt):
                v = iou(a, b)
                if v >= iou_threshold:
                    pairs.append((v, i, j))
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_i, used_j = set(), set()
        for v, i, j in pairs:
            if i in used_i or j in used_j:
                continue
            successor[(f, i)] = (f + 1, j)
            has_pred.add((f + 1, j))
            used_i.add(i)
            used_j.add(j)

    heads = []
    for f in frames:
        for i, d in enumerate(by_frame[f]):
            if (f, i) not in has_pred:
                heads.append((f, i, d))
    heads.sort(key=lambda t: (t[0], t[2].q_center, t[2].phi_center))

    tracks = []
    for tid, (f, i, _) in enumerate(heads):
        chain = []
        node = (f, i)
        while True:
            chain.append(by_frame[node[0]][node[1]])
            if node not in successor:
                break
            node = successor[node]
        tracks.append(Track(track_id=tid, detections=chain))
    return tracks


def filter_duration(tracks: list[Track], min_frames: int = 3) -> list[Track]:
    """Keep tracks observed in at least ``min_frames`` consecutive frames."""
    return [t for t in tracks if t.duration >= min_frames]


def _gauss_linear(q, height, center, sigma, slope, offset):
    return height * np.exp(-((q - center) ** 2) / (2.0 * sigma**2)) + slope * q + offset


def fit_radial_profile(
    pimg: PolarImage,
    det: Detection,
    window_factor: float = 3.0,
    min_samples: int = 7,
) -> PeakFit:
    """Least-squares fit of a Gaussian on a linear background to a detection.

    The profile is the masked mean over the detection's angular rows, taken
    on a radial window ``window_factor`` times the detected width.  The fit
    is marked not-ok when there are too few valid samples, the optimizer
    fails, the fitted center leaves the window, or the fitted width falls
    below one grid step.
    """
    q = pimg.q
    dq = float(q[1] - q[0])
    phi_lo, phi_hi = det.phi_interval
    rows = np.flatnonzero((pimg.phi_deg >= phi_lo) & (pimg.phi_deg <= phi_hi))
    if rows.size == 0:
        rows = np.array([int(np.argmin(np.abs(pimg.phi_deg - det.phi_center)))])

    half = window_factor * det.q_width / 2.0
    cols = np.flatnonzero((q >= det.q_center - half) & (q <= det.q_center + half))
    fallback = PeakFit(
        center=det.q_center, sigma=det.q_width / 2.0, height=0.0, slope=0.0, offset=0.0, ok=False
    )
    if cols.size == 0:
        return fallback

    sub = pimg.intensities[np.ix_(rows, cols)]
    submask = pimg.mask[np.ix_(rows, cols)]
    counts = (~submask).sum(axis=0)
    good = counts > 0
    if int(good.sum()) < min_samples:
        return fallback
    profile = np.where(submask, 0.0, sub).sum(axis=0)[good] / counts[good]
    qs = q[cols][good]

    baseline = float(np.median(profile))
    p0 = (float(profile.max() - baseline), det.q_center, max(det.q_width / 2.0, dq / 2.0), 0.0, baseline)
    try:
        popt, pcov = curve_fit(
            _gauss_linear, qs, profile, p0=p0, method="lm", maxfev=200 * (len(p0) + 1)
        )
    except (RuntimeError, ValueError):
        return fallback

    height, center, sigma, slope, offset = popt
    sigma = abs(float(sigma))
    fit = PeakFit(
        center=float(center),
        sigma=sigma,
        height=float(height),
        slope=float(slope),
        offset=float(offset),
        covariance=np.asarray(pcov),
    )
    if not np.isfinite(popt).all():
        fit.ok = False
    elif abs(center - det.q_center) > half:
        fit.ok = False
    elif sigma < dq:
        fit.ok = False
    elif height <= 0:
        fit.ok = False
    return fit


def fit_detections(
    images: dict[int, PolarImage],
    detections: list[Detection],
    window_factor: float = 3.0,
) -> list[Detection]:
    """Attach radial profile fits to detections, keyed by frame number.

    Detections whose frame has no image are passed through unfitted.
    """
    out = []
    for d in detections:
        pimg = images.get(d.frame)
        if pimg is None:
            out.append(d)
        else:
            out.append(d.moved(fit=fit_radial_profile(pimg, d, window_factor=window_factor)))
    return out


def track_detections(tracks: list[Track]) -> list[Detection]:
    """All detections of all tracks, ordered by (track, frame)."""
    return [d for t in tracks for d in t.detections]

"""Phase identification and reflection indexing for crystalline thin films.

A :class:`PhaseCard` describes one candidate phase: its unit cell, an optional
preferred-orientation plane normal (textured films) or powder designation, and
an optional table of relative reflection intensities.  From a card the module
predicts every reachable reflection position, scores how completely a set of
detections covers the predicted pattern, and assigns Miller indices to
detections.

Positions live in the polar plane: radius ``|Q|`` from the reciprocal lattice
(for orthorhombic cells ``|Q| = 2 pi sqrt((h/a)^2 + (k/b)^2 + (l/c)^2)``; the
general case goes through the reciprocal basis matrix) and, for oriented
phases, azimuth ``phi = atan2(Q_z, Q_par)`` with ``Q_z`` the component of the
scattering vector along the orientation normal.  Powder phases have no defined
azimuth and are matched radially only.

A detection covers a reflection when the residuals normalized by the box size
are both at most one: ``||Q_det| - |Q_sim|| / w_detected <= 1`` and, for
oriented phases, ``|phi_det - phi_sim| / a_detected <= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .detect import Detection
from .geometry import wedge_bounds


@dataclass(frozen=True)
class UnitCell:
    """Lattice constants in Angstroms and cell angles in degrees."""

    a: float
    b: float
    c: float
    alpha: float = 90.0
    beta: float = 90.0
    gamma: float = 90.0

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("lattice constants must be positive")
        if not all(0.0 < ang < 180.0 for ang in (self.alpha, self.beta, self.gamma)):
            raise ValueError("cell angles must be in (0, 180) degrees")
        ca, cb, cg = (_cos_deg(ang) for ang in (self.alpha, self.beta, self.gamma))
        if 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg <= 0.0:
            raise ValueError("cell angles do not define a positive-definite metric")


def _cos_deg(angle: float) -> float:
    # exact zero at 90 deg so right-angled cells reduce to the diagonal case
    return 0.0 if angle == 90.0 else float(np.cos(np.radians(angle)))


def _sin_deg(angle: float) -> float:
    return 1.0 if angle == 90.0 else float(np.sin(np.radians(angle)))


@lru_cache(maxsize=64)
def _reciprocal_basis(cell: UnitCell) -> np.ndarray:
    """Matrix whose columns are the reciprocal basis vectors (no 2 pi factor)."""
    ca, cb, cg = (_cos_deg(x) for x in (cell.alpha, cell.beta, cell.gamma))
    sg = _sin_deg(cell.gamma)
    vol_factor = np.sqrt(1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg)
    direct = np.array(
        [
            [cell.a, cell.b * cg, cell.c * cb],
            [0.0, cell.b * sg, cell.c * (ca - cb * cg) / sg],
            [0.0, 0.0, cell.c * vol_factor / sg],
        ]
    )
    return np.linalg.inv(direct).T


@dataclass(frozen=True)
class PhaseCard:
    """Candidate phase: unit cell, texture, and optional intensity table.

    ``orientation`` is the (u, v, w) normal of the contact plane for textured
    films (e.g. ``(0, 1, 0)`` for layers stacked along b), or None for an
    untextured powder.  ``reflections`` optionally lists relative intensities
    as ((h, k, l), intensity) pairs; reflections absent from a provided table
    are treated as extinct.  ``metadata`` carries free-form key-value notes.
    """

    name: str
    cell: UnitCell
    orientation: tuple[int, int, int] | None = None
    reflections: tuple[tuple[tuple[int, int, int], float], ...] | None = None
    metadata: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.orientation is not None and not any(self.orientation):
            raise ValueError("orientation normal must be non-zero")
        if self.reflections is not None:
            if any(inten < 0 for _, inten in self.reflections):
                raise ValueError("reflection intensities must be non-negative")

    def intensity_of(self, hkl: tuple[int, int, int]) -> float:
        """Relative intensity for ``hkl``; Friedel mates share one entry."""
        if self.reflections is None:
            return 1.0
        table = dict(self.reflections)
        if hkl in table:
            return table[hkl]
        mate = (-hkl[0], -hkl[1], -hkl[2])
        return table.get(mate, 0.0)


@dataclass(frozen=True)
class Reflection:
    """A predicted reflection: position in the polar plane plus its label."""

    hkl: tuple[int, int, int]
    q: float
    phi: float | None  # degrees; None for powder phases
    intensity: float


def q_of_hkl(cell: UnitCell, hkl) -> float | np.ndarray:
    """Scattering-vector magnitude(s) of the given Miller indices."""
    hkl = np.asarray(hkl, dtype=np.float64)
    comp = hkl @ _reciprocal_basis(cell).T
    q = 2.0 * np.pi * np.sqrt((comp**2).sum(axis=-1))
    if q.ndim == 0:
        return float(q)
    return q


def phi_of_hkl(card: PhaseCard, hkl) -> float | np.ndarray:
    """Azimuth (degrees) of reflections for an oriented card.

    The orientation normal splits each scattering vector into an out-of-plane
    component and its in-plane remainder; the azimuth is the elevation out of
    the sample plane, folded to [0, 90] degrees.
    """
    if card.orientation is None:
        raise ValueError("card has no orientation normal")
    hkl = np.asarray(hkl, dtype=np.float64)
    basis = _reciprocal_basis(card.cell)
    n = basis @ np.asarray(card.orientation, dtype=np.float64)
    n /= np.sqrt((n**2).sum())
    comp = hkl @ basis.T
    q_z = np.abs(comp @ n)
    q_sq = (comp**2).sum(axis=-1)
    q_par = np.sqrt(np.maximum(q_sq - q_z**2, 0.0))
    phi = np.degrees(np.arctan2(q_z, q_par))
    if phi.ndim == 0:
        return float(phi)
    return phi


def reflection_list(
    card: PhaseCard,
    q_max: float,
    q_min: float = 0.0,
    hkl_range: int = 20,
    merge_tol: float = 1e-6,
    phi_range: tuple[float, float] | None = None,
) -> list[Reflection]:
    """All distinct reflections of a card with ``q_min <= q <= q_max``.

    Miller indices are enumerated over ``[-hkl_range, hkl_range]^3`` (the
    origin excluded).  For oriented cards ``phi_range`` additionally restricts
    the azimuth to the measured window.  Reflections coinciding in position
    within ``merge_tol`` are merged: intensities add, and the lexicographically
    largest index triple becomes the representative label.  Zero-intensity
    reflections are dropped.
    """
    r = np.arange(-hkl_range, hkl_range + 1)
    h, k, l = np.meshgrid(r, r, r, indexing="ij")
    hkl = np.stack([h.ravel(), k.ravel(), l.ravel()], axis=-1)
    hkl = hkl[np.any(hkl != 0, axis=-1)]

    q = q_of_hkl(card.cell, hkl)
    keep = (q >= q_min) & (q <= q_max)
    hkl, q = hkl[keep], q[keep]
    if card.orientation is not None:
        phi = phi_of_hkl(card, hkl)
        if phi_range is not None:
            keep = (phi >= phi_range[0]) & (phi <= phi_range[1])
            hkl, q, phi = hkl[keep], q[keep], phi[keep]
    else:
        phi = None

    merged: dict[tuple[int, int], dict] = {}
    for i in range(hkl.shape[0]):
        trip = (int(hkl[i, 0]), int(hkl[i, 1]), int(hkl[i, 2]))
        inten = card.intensity_of(trip)
        if inten <= 0:
            continue
        key = (
            int(round(q[i] / merge_tol)),
            int(round(phi[i] / merge_tol)) if phi is not None else 0,
        )
        slot = merged.get(key)
        if slot is None:
            merged[key] = {
                "hkl": trip,
                "q": float(q[i]),
                "phi": float(phi[i]) if phi is not None else None,
                "intensity": inten,
            }
        else:
            slot["intensity"] += inten
            if trip > slot["hkl"]:
                slot["hkl"] = trip
    out = [Reflection(**slot) for slot in merged.values()]
    out.sort(key=lambda refl: (refl.q, refl.phi if refl.phi is not None else -1.0))
    return out


def _coverage(detections: list[Detection], refls: list[Reflection], oriented: bool) -> np.ndarray:
    """Boolean per reflection: some detection satisfies the matching conditions."""
    if not detections or not refls:
        return np.zeros(len(refls), dtype=bool)
    det_q = np.array([d.q_refined for d in detections])
    det_w = np.array([d.q_width for d in detections])
    det_phi = np.array([d.phi_center for d in detections])
    det_a = np.array([d.phi_extent for d in detections])
    ref_q = np.array([r.q for r in refls])
    ok = np.abs(ref_q[:, None] - det_q[None, :]) <= np.where(det_w > 0, det_w, -1.0)[None, :]
    if oriented:
        ref_phi = np.array([r.phi for r in refls])
        ok &= (
            np.abs(ref_phi[:, None] - det_phi[None, :])
            <= np.where(det_a > 0, det_a, -1.0)[None, :]
        )
    return ok.any(axis=1)


def covers(det: Detection, refl: Reflection, oriented: bool) -> bool:
    """True when one detection's box covers one reflection (both conditions)."""
    return bool(_coverage([det], [refl], oriented)[0])


def cluster_angular(
    detections: list[Detection],
    q_par_max: float,
    q_z_max: float,
) -> np.ndarray:
    """Split detections into arc-like (True) and spot-like (False).

    Each detection's angular extent is normalized by the maximum arc length
    available at its radius, and the ratios are clustered by a 1-D 2-means
    seeded at the extremes; the cluster with the larger mean is arc-like.
    A lone detection is arc-like when its ratio is at least 0.5.
    """
    if not detections:
        return np.zeros(0, dtype=bool)
    phi_lo, phi_hi = wedge_bounds(np.array([d.q_refined for d in detections]), q_par_max, q_z_max)
    avail = np.maximum(phi_hi - phi_lo, 1e-9)
    ratios = np.clip(np.array([d.phi_extent for d in detections]) / avail, 0.0, 1.5)

    if ratios.size == 1 or np.ptp(ratios) < 1e-12:
        return ratios >= 0.5

    lo, hi = float(ratios.min()), float(ratios.max())
    for _ in range(100):
        arcs = np.abs(ratios - hi) < np.abs(ratios - lo)
        new_lo = ratios[~arcs].mean() if np.any(~arcs) else lo
        new_hi = ratios[arcs].mean() if np.any(arcs) else hi
        if new_lo == lo and new_hi == hi:
            break
        lo, hi = new_lo, new_hi
    return np.abs(ratios - hi) < np.abs(ratios - lo)


def prolong_to_wedge(
    detections: list[Detection],
    q_par_max: float,
    q_z_max: float,
    row_deg: float,
) -> list[Detection]:
    """Extend arcs cut off by the missing wedge up to 90 degrees.

    An out-of-plane reflection whose ring crosses the missing wedge is
    detected only up to the accessible-region boundary, short of its true
    azimuth.  Any detection whose upper angular edge reaches within
    ``row_deg`` (one grid row) of that boundary at its radius has the upper
    edge set to 90 degrees; everything else is returned unchanged.
    """
    out = []
    for d in detections:
        lo_lim, hi_lim = wedge_bounds(d.q_refined, q_par_max, q_z_max)
        lo, hi = d.phi_interval
        if hi_lim > lo_lim and hi >= hi_lim - row_deg and hi < 90.0:
            out.append(d.moved(phi_center=(lo + 90.0) / 2, phi_extent=90.0 - lo))
        else:
            out.append(d)
    return out


@dataclass
class PhaseMatch:
    """Coverage of one card's predicted pattern by the detections."""

    card: PhaseCard
    score: float
    covered: list[Reflection]
    missed: list[Reflection]

    @property
    def n_reflections(self) -> int:
        return len(self.covered) + len(self.missed)


def match_score(
    card: PhaseCard,
    detections: list[Detection],
    q_range: tuple[float, float],
    hkl_range: int = 20,
    phi_range: tuple[float, float] | None = None,
) -> PhaseMatch:
    """Intensity-weighted fraction of a card's predicted pattern that is covered.

    Every predicted reflection within ``q_range`` counts as covered when some
    detection encloses it: within one box width radially and, for oriented
    cards, within one box extent in azimuth (powder reflections are matched
    radially only).  A card with no reflections in range scores 0 (no-match).
    """
    refls = reflection_list(
        card, q_max=q_range[1], q_min=q_range[0], hkl_range=hkl_range, phi_range=phi_range
    )
    hit = _coverage(detections, refls, oriented=card.orientation is not None)
    covered = [r for r, h in zip(refls, hit) if h]
    missed = [r for r, h in zip(refls, hit) if not h]
    total = sum(r.intensity for r in refls)
    score = sum(r.intensity for r in covered) / total if total > 0 else 0.0
    return PhaseMatch(card=card, score=score, covered=covered, missed=missed)


def identify(
    cards: list[PhaseCard],
    detections: list[Detection],
    q_range: tuple[float, float],
    hkl_range: int = 20,
    arc_labels: np.ndarray | None = None,
    phi_range: tuple[float, float] | None = None,
) -> list[PhaseMatch]:
    """Rank candidate phases by coverage of their predicted patterns.

    When ``arc_labels`` is given (from :func:`cluster_angular`), powder cards
    only consult arc-like detections and oriented cards only spot-like ones.
    Results are sorted by descending score; ties prefer the card predicting
    fewer reflections (the most parsimonious explanation), then name order.
    """
    matches = []
    for card in cards:
        oriented = card.orientation is not None
        if arc_labels is not None and len(detections) == len(arc_labels):
            pool = [d for d, arc in zip(detections, arc_labels) if arc != oriented]
        else:
            pool = detections
        matches.append(
            match_score(card, pool, q_range=q_range, hkl_range=hkl_range, phi_range=phi_range)
        )
    matches.sort(key=lambda m: (-m.score, m.n_reflections, m.card.name))
    return matches


@dataclass
class Assignment:
    """Miller-index assignment of one detection under one card."""

    detection: int  # index into the detection list
    card: str
    hkl: tuple[int, int, int]
    q: float
    phi: float | None
    distance: float  # normalized residual used for the choice


def index_detections(
    cards: list[PhaseCard],
    detections: list[Detection],
    hkl_range: int = 20,
    q_margin: float = 1.2,
) -> list[Assignment]:
    """Assign each detection the nearest in-tolerance reflection per card.

    The residual is measured in units of the detection's own box size
    (radial width, and angular extent for oriented cards); candidates beyond
    one box size are rejected.  A detection may receive assignments from
    several cards; ambiguity is left to the caller.
    """
    if not detections:
        return []
    det_q = np.array([d.q_refined for d in detections])
    det_w = np.array([d.q_width for d in detections])
    det_phi = np.array([d.phi_center for d in detections])
    det_a = np.array([d.phi_extent for d in detections])
    q_top = float((det_q + det_w).max()) * q_margin
    out = []
    for card in cards:
        oriented = card.orientation is not None
        refls = reflection_list(card, q_max=q_top, hkl_range=hkl_range)
        if not refls:
            continue
        ref_q = np.array([r.q for r in refls])
        dq = np.abs(ref_q[:, None] - det_q[None, :]) / np.where(det_w > 0, det_w, np.inf)
        dist = dq.copy()
        ok = dq <= 1.0
        if oriented:
            ref_phi = np.array([r.phi for r in refls])
            dphi = np.abs(ref_phi[:, None] - det_phi[None, :]) / np.where(
                det_a > 0, det_a, np.inf
            )
            ok &= dphi <= 1.0
            dist = np.hypot(dq, dphi)
        dist = np.where(ok, dist, np.inf)
        best = dist.argmin(axis=0)
        for i, j in enumerate(best):
            if not np.isfinite(dist[j, i]):
                continue
            refl = refls[j]
            out.append(
                Assignment(
                    detection=i,
                    card=card.name,
                    hkl=refl.hkl,
                    q=refl.q,
                    phi=refl.phi,
                    distance=float(dist[j, i]),
                )
            )
    out.sort(key=lambda a: (a.detection, a.card))
    return out

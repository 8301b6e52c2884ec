"""Contrast enhancement for polar diffraction images.

The central routine is a contrast-limited adaptive histogram equalization
(CLAHE) that understands missing-data masks: masked pixels contribute to no
tile histogram and are passed through unchanged (after the initial
normalization), so detector gaps and missing wedges cannot distort the
mapping of their neighborhoods.

Exact conventions (fixed so results are reproducible bit for bit):

* The input is first normalized to [0, 1] using the minimum and maximum over
  unmasked pixels (``normalize_unit``).
* A value ``v`` falls into histogram bin ``min(floor(v * nbins), nbins - 1)``.
* Tile ``i`` of ``t`` along an axis of length ``n`` covers rows
  ``floor(i*n/t)`` to ``floor((i+1)*n/t) - 1``; its center sits at
  ``(lo + hi) / 2`` in pixel coordinates (with ``hi`` the inclusive end).
* The clip ceiling is the float ``clip_limit * n_tile / nbins``; histogram
  mass above it is redistributed uniformly over all bins in a single pass.
* The tile mapping is ``m(b) = (cdf(b) - cdf_min) / (n_tile - cdf_min)``
  where ``cdf_min`` is the cumulative count at the first occupied bin of the
  clipped, redistributed histogram.  A tile whose histogram is degenerate
  (empty, or all mass in the first occupied bin) passes values through
  unchanged.
* Pixel outputs blend the mappings of the (up to) four surrounding tile
  centers bilinearly; beyond the outermost centers the nearest tile is used.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _as_mask(img: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.zeros(img.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise ValueError("mask shape does not match image")
    return mask


def normalize_unit(img: np.ndarray, mask=None) -> np.ndarray:
    """Scale so the unmasked range becomes exactly [0, 1].

    A constant (or fully masked) image comes back as all zeros.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = _as_mask(img, mask)
    keep = ~mask
    if not keep.any():
        return np.zeros_like(img)
    mn = np.min(img, initial=np.inf, where=keep)
    mx = np.max(img, initial=-np.inf, where=keep)
    if mx <= mn:
        return np.zeros_like(img)
    return (img - mn) / (mx - mn)


def _tile_edges(n: int, t: int) -> np.ndarray:
    return np.array([(i * n) // t for i in range(t + 1)], dtype=np.intp)


def _axis_blend(n: int, centers: np.ndarray):
    """Per-pixel neighbor tile indices and blend weight along one axis."""
    pos = np.arange(n, dtype=np.float64)
    if centers.size == 1:
        zero = np.zeros(n, dtype=np.intp)
        return zero, zero, np.zeros(n)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, centers.size - 1)
    hi = np.clip(hi, 0, centers.size - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def _runs(lo: np.ndarray, hi: np.ndarray):
    """Half-open index ranges over which the (lo, hi) pair is constant."""
    change = np.flatnonzero((np.diff(lo) != 0) | (np.diff(hi) != 0)) + 1
    breaks = np.concatenate(([0], change, [lo.size]))
    return list(zip(breaks[:-1], breaks[1:]))


@lru_cache(maxsize=4)
def _tile_plane(h: int, w: int, th: int, tw: int, nbins: int):
    """Per-pixel ``tile_index * nbins`` plane for joint (tile, bin) encoding."""
    r_edges = _tile_edges(h, th)
    c_edges = _tile_edges(w, tw)
    tile_of = (
        np.repeat(np.arange(th, dtype=np.intp), np.diff(r_edges))[:, None] * tw
        + np.repeat(np.arange(tw, dtype=np.intp), np.diff(c_edges))[None, :]
    )
    return tile_of * nbins


@lru_cache(maxsize=4)
def _blend_geometry(h: int, w: int, th: int, tw: int):
    """Neighbor tile indices and the four corner weight planes per pixel.

    Everything here depends only on the image and tile shape, so repeated
    frames of one series reuse the same planes.
    """
    r_edges = _tile_edges(h, th)
    c_edges = _tile_edges(w, tw)
    r_centers = (r_edges[:-1] + r_edges[1:] - 1) / 2.0
    c_centers = (c_edges[:-1] + c_edges[1:] - 1) / 2.0
    ry0, ry1, wy = _axis_blend(h, r_centers)
    cx0, cx1, wx = _axis_blend(w, c_centers)
    w00 = (1 - wy)[:, None] * (1 - wx)[None, :]
    w01 = (1 - wy)[:, None] * wx[None, :]
    w10 = wy[:, None] * (1 - wx)[None, :]
    w11 = wy[:, None] * wx[None, :]
    return ry0, ry1, cx0, cx1, w00, w01, w10, w11


def clahe(
    img: np.ndarray,
    mask=None,
    tiles: tuple[int, int] = (8, 8),
    clip_limit: float | None = 4.0,
    nbins: int = 256,
) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization with mask support.

    Parameters
    ----------
    img : 2-D array, any scale; it is normalized to [0, 1] internally.
    mask : optional bool array, True where data is missing.
    tiles : tile grid as (rows, cols); clamped so every tile spans >= 1 pixel.
    clip_limit : histogram clip factor relative to the uniform bin count,
        or None to disable clipping.
    nbins : number of histogram bins.

    Returns the enhanced image in [0, 1]; masked pixels hold their
    normalized input value.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    mask = _as_mask(img, mask)
    if nbins < 2:
        raise ValueError("nbins must be >= 2")
    if clip_limit is not None and clip_limit < 1.0 / nbins:
        # the ceiling would fall below a uniform histogram, erasing all contrast
        raise ValueError("clip_limit must be None or at least 1/nbins")

    v = normalize_unit(img, mask)
    h, w = img.shape
    th = max(1, min(int(tiles[0]), h))
    tw = max(1, min(int(tiles[1]), w))

    bins = np.clip((v * nbins).astype(np.intp), 0, nbins - 1)

    # all tile histograms in one pass: encode (tile, bin) jointly and count
    code = _tile_plane(h, w, th, tw, nbins) + bins
    hists = np.bincount(code[~mask], minlength=th * tw * nbins).reshape(th, tw, nbins)

    luts = np.zeros((th, tw, nbins))
    passthrough = np.zeros((th, tw), dtype=bool)
    for ti in range(th):
        for tj in range(tw):
            n_tile = int(hists[ti, tj].sum())
            if n_tile == 0:
                passthrough[ti, tj] = True
                continue
            hist = hists[ti, tj].astype(np.float64)
            if clip_limit is not None:
                ceil = clip_limit * n_tile / nbins
                excess = np.maximum(hist - ceil, 0.0).sum()
                hist = np.minimum(hist, ceil) + excess / nbins
            cdf = np.cumsum(hist)
            occupied = np.flatnonzero(hist > 0)
            cdf_min = cdf[occupied[0]]
            denom = n_tile - cdf_min
            if denom <= 0:
                passthrough[ti, tj] = True
                continue
            luts[ti, tj] = np.clip((cdf - cdf_min) / denom, 0.0, 1.0)

    if th == 1 and tw == 1:
        # single tile: every blend weight is zero, so the output is its map
        out = v if passthrough[0, 0] else luts[0, 0][bins]
        out = out.copy()
        out[mask] = v[mask]
        return out

    ry0, ry1, cx0, cx1, w00, w01, w10, w11 = _blend_geometry(h, w, th, tw)

    # Between consecutive tile centers the four blend partners are fixed, so
    # the image splits into sectors that each need only 1-D table lookups.
    out = np.empty_like(v)
    for rs, re in _runs(ry0, ry1):
        t0, t1 = ry0[rs], ry1[rs]
        for cs, ce in _runs(cx0, cx1):
            u0, u1 = cx0[cs], cx1[cs]
            sector = (slice(rs, re), slice(cs, ce))
            b_s = bins[sector]
            m00 = v[sector] if passthrough[t0, u0] else luts[t0, u0][b_s]
            m01 = v[sector] if passthrough[t0, u1] else luts[t0, u1][b_s]
            m10 = v[sector] if passthrough[t1, u0] else luts[t1, u0][b_s]
            m11 = v[sector] if passthrough[t1, u1] else luts[t1, u1][b_s]
            out[sector] = (
                w00[sector] * m00 + w01[sector] * m01 + w10[sector] * m10 + w11[sector] * m11
            )
    out[mask] = v[mask]
    return out


def equalize_global(img: np.ndarray, mask=None, nbins: int = 256) -> np.ndarray:
    """Plain (unclipped) histogram equalization over the whole image."""
    return clahe(img, mask=mask, tiles=(1, 1), clip_limit=None, nbins=nbins)

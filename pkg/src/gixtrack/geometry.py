"""Detector-frame kinematics: reciprocal-space mapping, polar resampling, intensity corrections.

Conventions used throughout:

* Detector pixels are addressed as ``(px_x, px_z)`` = (column, row), with the
  row index increasing *upwards* so that pixels above the direct beam carry
  positive ``Q_z``.
* ``Q_||`` is the in-plane component ``(Q_x^2 + Q_y^2)^(1/2)`` signed by the
  horizontal side of the detector; the negative half is folded onto the
  positive one before polar mapping (quadrant convention).
* The polar image covers ``phi = arctan(Q_z / Q_||)`` in [0, 90] degrees and
  ``|Q|`` in inverse Angstrom, both axes linear.

The Lorentz-polarization correction multiplies each pixel by

    C = (r / D)^3 / P,      P = pf * (1 - (s.e_h)^2) + (1 - pf) * (1 - (s.e_v)^2)

where ``r`` is the sample-pixel distance, ``D`` the sample-detector distance,
``s`` the unit scattering direction, ``e_h``/``e_v`` the horizontal/vertical
polarization directions of the incident beam and ``pf`` the horizontal
polarization fraction.  ``C`` is normalized to 1 at the beam center.
Refraction and absorption corrections are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

# photon energy (keV) to wavelength (Angstrom)
HC_KEV_ANGSTROM = 12.3984


@dataclass(frozen=True)
class ExperimentGeometry:
    """Static description of one measurement setup."""

    photon_energy_kev: float
    incidence_deg: float
    distance_mm: float
    pixel_mm: float
    beam_center_px: tuple[float, float]  # (px_x, px_z)
    detector_shape: tuple[int, int]  # (n_z rows, n_x cols)
    polarization: float = 1.0

    def __post_init__(self):
        if not self.photon_energy_kev > 0:
            raise ValueError("photon_energy_kev must be > 0")
        if not self.distance_mm > 0:
            raise ValueError("distance_mm must be > 0")
        if not self.pixel_mm > 0:
            raise ValueError("pixel_mm must be > 0")
        if not 0.0 <= self.incidence_deg < 90.0:
            raise ValueError("incidence_deg must be in [0, 90)")
        if not 0.0 <= self.polarization <= 1.0:
            raise ValueError("polarization must be in [0, 1]")
        nz, nx = self.detector_shape
        if nz < 2 or nx < 2:
            raise ValueError("detector_shape must be at least 2x2")
        bx, bz = self.beam_center_px
        # off-detector beam centers are allowed up to one detector extent away
        if not (-nx <= bx <= 2 * nx and -nz <= bz <= 2 * nz):
            raise ValueError("beam_center_px too far outside the detector")

    @property
    def wavelength(self) -> float:
        """Wavelength in Angstrom."""
        return HC_KEV_ANGSTROM / self.photon_energy_kev

    @property
    def k(self) -> float:
        """Wavenumber 2*pi/lambda in 1/Angstrom."""
        return 2.0 * np.pi / self.wavelength


@dataclass(frozen=True)
class ReciprocalImage:
    """Intensities regridded onto a regular (Q_||, Q_z) grid.

    ``mask`` is True where the grid cell received no measured intensity.
    """

    intensities: np.ndarray  # (n_z, n_par)
    q_par: np.ndarray  # (n_par,)
    q_z: np.ndarray  # (n_z,)
    mask: np.ndarray  # bool, True = unmeasured

    def __post_init__(self):
        if self.intensities.shape != (self.q_z.size, self.q_par.size):
            raise ValueError("intensity grid does not match axes")
        if self.mask.shape != self.intensities.shape:
            raise ValueError("mask shape mismatch")
        for ax in (self.q_par, self.q_z):
            steps = np.diff(ax)
            if ax.size < 2 or not np.all(steps > 0):
                raise ValueError("axes must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9):
                raise ValueError("axes must be uniformly spaced")


@dataclass(frozen=True)
class PolarImage:
    """Intensities on a regular (phi, |Q|) grid; rings appear as vertical lines."""

    intensities: np.ndarray  # (n_phi, n_q)
    phi_deg: np.ndarray  # (n_phi,)
    q: np.ndarray  # (n_q,)
    mask: np.ndarray  # bool, True = missing wedge / off-detector

    def __post_init__(self):
        if self.intensities.shape != (self.phi_deg.size, self.q.size):
            raise ValueError("intensity grid does not match axes")
        if self.mask.shape != self.intensities.shape:
            raise ValueError("mask shape mismatch")
        for ax in (self.phi_deg, self.q):
            if ax.size < 2 or not np.all(np.diff(ax) > 0):
                raise ValueError("axes must be strictly increasing")


def validate_detector_image(img: np.ndarray, geom: ExperimentGeometry) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(geom.detector_shape):
        raise ValueError(f"image shape {img.shape} != detector_shape {geom.detector_shape}")
    # NaN propagates into both extrema, infinities surface in one of them
    mn, mx = img.min(), img.max()
    if not (np.isfinite(mn) and np.isfinite(mx)) or mn < 0:
        raise ValueError("detector image must be finite and non-negative")
    return img


def _exit_angles(geom: ExperimentGeometry, px_x, px_z):
    """In-plane angle gamma and exit angle alpha_f (radians) for pixel offsets."""
    x_mm = (np.asarray(px_x, dtype=np.float64) - geom.beam_center_px[0]) * geom.pixel_mm
    z_mm = (np.asarray(px_z, dtype=np.float64) - geom.beam_center_px[1]) * geom.pixel_mm
    gamma = np.arctan2(x_mm, geom.distance_mm)
    delta = np.arctan2(z_mm, np.hypot(geom.distance_mm, x_mm))
    alpha_f = delta - np.radians(geom.incidence_deg)
    return gamma, alpha_f, x_mm, z_mm


def pixel_to_q(geom: ExperimentGeometry, pixel):
    """Map detector pixel(s) to scattering-vector components (Q_||, Q_z) in 1/Angstrom.

    ``pixel`` is ``(px_x, px_z)``; both entries may be arrays.  Q_|| carries the
    sign of the horizontal pixel offset.  Pixels outside the detector are
    rejected.
    """
    px_x = np.asarray(pixel[0], dtype=np.float64)
    px_z = np.asarray(pixel[1], dtype=np.float64)
    nz, nx = geom.detector_shape
    if np.any(px_x < 0) or np.any(px_x > nx - 1) or np.any(px_z < 0) or np.any(px_z > nz - 1):
        raise ValueError("pixel outside detector bounds")

    a_i = np.radians(geom.incidence_deg)
    gamma, alpha_f, x_mm, _ = _exit_angles(geom, px_x, px_z)
    k = geom.k
    qx = k * (np.cos(alpha_f) * np.cos(gamma) - np.cos(a_i))
    qy = k * np.cos(alpha_f) * np.sin(gamma)
    qz = k * (np.sin(alpha_f) + np.sin(a_i))
    q_par = np.where(x_mm < 0, -np.hypot(qx, qy), np.hypot(qx, qy))
    if q_par.ndim == 0:
        return float(q_par), float(qz)
    return q_par, qz


def polar_from_q(q_par, q_z):
    """Fold (Q_||, Q_z) to (|Q|, phi[deg]); the negative-Q_|| half maps onto the positive."""
    q_abs = np.hypot(q_par, q_z)
    phi = np.degrees(np.arctan2(q_z, np.abs(q_par)))
    return q_abs, phi


@lru_cache(maxsize=8)
def _lp_field(geom: ExperimentGeometry) -> np.ndarray:
    nz, nx = geom.detector_shape
    px_x, px_z = np.meshgrid(np.arange(nx), np.arange(nz))
    gamma, alpha_f, x_mm, z_mm = _exit_angles(geom, px_x, px_z)
    a_i = np.radians(geom.incidence_deg)

    # unit scattering direction
    sx = np.cos(alpha_f) * np.cos(gamma)
    sy = np.cos(alpha_f) * np.sin(gamma)
    sz = np.sin(alpha_f)
    # polarization directions of the incident beam
    ev = np.array([np.sin(a_i), 0.0, np.cos(a_i)])
    p_h = 1.0 - sy**2
    p_v = 1.0 - (sx * ev[0] + sz * ev[2]) ** 2
    pf = geom.polarization
    pol = pf * p_h + (1.0 - pf) * p_v

    dist = np.sqrt(geom.distance_mm**2 + x_mm**2 + z_mm**2)
    solid = (geom.distance_mm / dist) ** 3
    corr = 1.0 / (pol * solid)

    # normalize to 1 at the beam center position (evaluated analytically:
    # pol = solid = 1 there), so no extra scaling is required
    return corr


def correct_lp(img: np.ndarray, geom: ExperimentGeometry) -> np.ndarray:
    """Apply the Lorentz-polarization correction field (see module docstring)."""
    img = validate_detector_image(img, geom)
    return img * _lp_field(geom)


def lp_correction_field(geom: ExperimentGeometry) -> np.ndarray:
    """The multiplicative correction field itself; depends only on geometry."""
    return _lp_field(geom).copy()


@lru_cache(maxsize=8)
def _q_maps(geom: ExperimentGeometry):
    nz, nx = geom.detector_shape
    px_x, px_z = np.meshgrid(np.arange(nx), np.arange(nz))
    q_par, q_z = pixel_to_q(geom, (px_x, px_z))
    return np.abs(q_par), q_z


def accessible_q_range(geom: ExperimentGeometry) -> tuple[tuple[float, float], tuple[float, float]]:
    """((q_par_min, q_par_max), (q_z_min, q_z_max)) reachable by this detector, folded."""
    q_par, q_z = _q_maps(geom)
    return (float(q_par.min()), float(q_par.max())), (float(q_z.min()), float(q_z.max()))


def default_grid(geom: ExperimentGeometry, shape: tuple[int, int] | None = None):
    """Axis arrays (q_par, q_z) covering the accessible region.

    The default resolution puts roughly four detector pixels into each grid
    cell so that the forward deposit leaves no unmeasured holes.
    """
    (pmin, pmax), (zmin, zmax) = accessible_q_range(geom)
    if shape is None:
        nz, nx = geom.detector_shape
        shape = (max(2, nz // 2), max(2, nx // 2))
    q_par = np.linspace(min(0.0, pmin), pmax, shape[1])
    q_z = np.linspace(min(0.0, zmin), zmax, shape[0])
    return q_par, q_z


def to_reciprocal(
    img: np.ndarray,
    geom: ExperimentGeometry,
    grid: tuple[np.ndarray, np.ndarray] | None = None,
) -> ReciprocalImage:
    """Regrid a detector frame onto a regular (Q_||, Q_z) grid.

    Each pixel center is forward-mapped and its intensity deposited onto the
    four surrounding grid cells with bilinear weights, which conserves the
    total intensity.  Cells receiving no weight are masked.
    """
    img = validate_detector_image(img, geom)
    if grid is None:
        grid = default_grid(geom)
    q_par_ax, q_z_ax = np.asarray(grid[0], float), np.asarray(grid[1], float)
    q_par, q_z = _q_maps(geom)

    dp = q_par_ax[1] - q_par_ax[0]
    dz = q_z_ax[1] - q_z_ax[0]
    fx = (q_par.ravel() - q_par_ax[0]) / dp
    fz = (q_z.ravel() - q_z_ax[0]) / dz
    npar, nzc = q_par_ax.size, q_z_ax.size

    inside = (fx >= 0) & (fx <= npar - 1) & (fz >= 0) & (fz <= nzc - 1)
    if not np.any(inside):
        raise ValueError("grid does not overlap the accessible Q region")
    fx, fz, vals = fx[inside], fz[inside], img.ravel()[inside]

    ix = np.minimum(fx.astype(np.intp), npar - 2)
    iz = np.minimum(fz.astype(np.intp), nzc - 2)
    wx = fx - ix
    wz = fz - iz

    flat = np.zeros(nzc * npar)
    wsum = np.zeros(nzc * npar)
    for dzi, dxi, w in (
        (0, 0, (1 - wz) * (1 - wx)),
        (0, 1, (1 - wz) * wx),
        (1, 0, wz * (1 - wx)),
        (1, 1, wz * wx),
    ):
        idx = (iz + dzi) * npar + (ix + dxi)
        flat += np.bincount(idx, weights=w * vals, minlength=flat.size)
        wsum += np.bincount(idx, weights=w, minlength=flat.size)

    intensities = flat.reshape(nzc, npar)
    mask = (wsum.reshape(nzc, npar) <= 0.0)
    return ReciprocalImage(intensities=intensities, q_par=q_par_ax, q_z=q_z_ax, mask=mask)


def _bilinear_masked(values: np.ndarray, mask: np.ndarray, fy: np.ndarray, fx: np.ndarray):
    """Sample ``values`` at fractional indices; any masked or out-of-range corner masks the sample."""
    ny, nx = values.shape
    inside = (fy >= 0) & (fy <= ny - 1) & (fx >= 0) & (fx <= nx - 1)
    fy_c = np.clip(fy, 0, ny - 1)
    fx_c = np.clip(fx, 0, nx - 1)
    iy = np.minimum(fy_c.astype(np.intp), ny - 2)
    ix = np.minimum(fx_c.astype(np.intp), nx - 2)
    wy = fy_c - iy
    wx = fx_c - ix

    out = (
        values[iy, ix] * (1 - wy) * (1 - wx)
        + values[iy, ix + 1] * (1 - wy) * wx
        + values[iy + 1, ix] * wy * (1 - wx)
        + values[iy + 1, ix + 1] * wy * wx
    )
    bad = ~inside | mask[iy, ix] | mask[iy, ix + 1] | mask[iy + 1, ix] | mask[iy + 1, ix + 1]
    return np.where(bad, 0.0, out), bad


def to_polar(rimg: ReciprocalImage, shape: tuple[int, int] = (512, 1024)) -> PolarImage:
    """Resample a reciprocal image onto a regular (phi, |Q|) grid.

    phi spans [0, 90] degrees, |Q| spans [0, corner radius of the input grid].
    Bilinear sampling; a sample with any masked corner is masked.
    """
    n_phi, n_q = shape
    q_max = float(np.hypot(np.abs(rimg.q_par).max(), rimg.q_z.max()))
    phi_deg = np.linspace(0.0, 90.0, n_phi)
    q = np.linspace(0.0, q_max, n_q)

    phi_r = np.radians(phi_deg)[:, None]
    q_par_s = q[None, :] * np.cos(phi_r)
    q_z_s = q[None, :] * np.sin(phi_r)

    dp = rimg.q_par[1] - rimg.q_par[0]
    dz = rimg.q_z[1] - rimg.q_z[0]
    fx = (q_par_s - rimg.q_par[0]) / dp
    fy = (q_z_s - rimg.q_z[0]) / dz
    out, bad = _bilinear_masked(rimg.intensities, rimg.mask, fy, fx)
    return PolarImage(intensities=out, phi_deg=phi_deg, q=q, mask=bad)


class _ResamplePlan:
    """Precomputed detector-to-polar resampling for one (geometry, shape) pair.

    All coordinates, deposit weights and sampling weights depend only on the
    geometry, so both resampling stages are stored as sparse matrices; mapping
    a frame then costs two matrix-vector products instead of recomputing the
    full coordinate transform.
    """

    __slots__ = ("_lp", "_deposit", "_sample", "_bad", "_phi_deg", "_q")

    def __init__(self, geom: ExperimentGeometry, shape: tuple[int, int]):
        q_par_ax, q_z_ax = default_grid(geom)
        q_par, q_z = _q_maps(geom)
        npar, nzc = q_par_ax.size, q_z_ax.size
        n_cells = nzc * npar
        dp = q_par_ax[1] - q_par_ax[0]
        dz = q_z_ax[1] - q_z_ax[0]

        # stage 1: bilinear deposit of every pixel onto the reciprocal grid
        fx = (q_par.ravel() - q_par_ax[0]) / dp
        fz = (q_z.ravel() - q_z_ax[0]) / dz
        inside = (fx >= 0) & (fx <= npar - 1) & (fz >= 0) & (fz <= nzc - 1)
        fx, fz = fx[inside], fz[inside]
        cols = np.tile(np.flatnonzero(inside), 4)
        ix = np.minimum(fx.astype(np.intp), npar - 2)
        iz = np.minimum(fz.astype(np.intp), nzc - 2)
        wx = fx - ix
        wz = fz - iz
        base = iz * npar + ix
        rows = np.concatenate([base, base + 1, base + npar, base + npar + 1])
        wts = np.concatenate([(1 - wz) * (1 - wx), (1 - wz) * wx, wz * (1 - wx), wz * wx])
        self._deposit = sparse.csr_matrix((wts, (rows, cols)), shape=(n_cells, q_par.size))
        self._deposit.eliminate_zeros()
        wsum = self._deposit @ np.ones(q_par.size)
        recip_mask = (wsum <= 0.0).reshape(nzc, npar)

        # stage 2: bilinear sampling of the reciprocal grid on polar rays
        n_phi, n_q = shape
        q_max = float(np.hypot(np.abs(q_par_ax).max(), q_z_ax.max()))
        self._phi_deg = np.linspace(0.0, 90.0, n_phi)
        self._q = np.linspace(0.0, q_max, n_q)
        phi_r = np.radians(self._phi_deg)[:, None]
        fxs = (self._q[None, :] * np.cos(phi_r) - q_par_ax[0]) / dp
        fys = (self._q[None, :] * np.sin(phi_r) - q_z_ax[0]) / dz
        inside_s = (fys >= 0) & (fys <= nzc - 1) & (fxs >= 0) & (fxs <= npar - 1)
        fy_c = np.clip(fys, 0, nzc - 1)
        fx_c = np.clip(fxs, 0, npar - 1)
        iy = np.minimum(fy_c.astype(np.intp), nzc - 2)
        ixs = np.minimum(fx_c.astype(np.intp), npar - 2)
        wy = fy_c - iy
        wxs = fx_c - ixs
        self._bad = (
            ~inside_s
            | recip_mask[iy, ixs]
            | recip_mask[iy, ixs + 1]
            | recip_mask[iy + 1, ixs]
            | recip_mask[iy + 1, ixs + 1]
        )
        corner = (iy * npar + ixs).ravel()
        rows_s = np.tile(np.arange(n_phi * n_q), 4)
        cols_s = np.concatenate([corner, corner + 1, corner + npar, corner + npar + 1])
        wts_s = np.concatenate(
            [
                ((1 - wy) * (1 - wxs)).ravel(),
                ((1 - wy) * wxs).ravel(),
                (wy * (1 - wxs)).ravel(),
                (wy * wxs).ravel(),
            ]
        )
        # invalid samples keep no weights at all, so the product leaves
        # them at exactly zero and no per-frame masking pass is needed
        wts_s[np.tile(self._bad.ravel(), 4)] = 0.0
        self._sample = sparse.csr_matrix((wts_s, (rows_s, cols_s)), shape=(n_phi * n_q, n_cells))
        self._sample.eliminate_zeros()
        self._lp = _lp_field(geom).ravel()

    def apply(self, img: np.ndarray, lp: bool = True) -> PolarImage:
        vals = img.ravel()
        if lp:
            vals = vals * self._lp
        out = (self._sample @ (self._deposit @ vals)).reshape(self._bad.shape)
        return PolarImage(intensities=out, phi_deg=self._phi_deg, q=self._q, mask=self._bad.copy())


@lru_cache(maxsize=4)
def _resample_plan(geom: ExperimentGeometry, shape: tuple[int, int]) -> _ResamplePlan:
    return _ResamplePlan(geom, shape)


def polar_map(
    img: np.ndarray,
    geom: ExperimentGeometry,
    shape: tuple[int, int] = (512, 1024),
    grid: tuple[np.ndarray, np.ndarray] | None = None,
    lp: bool = True,
) -> PolarImage:
    """Full preprocessing chain: LP correction, reciprocal regrid, polar resample."""
    if grid is not None:
        if lp:
            img = correct_lp(img, geom)
        return to_polar(to_reciprocal(img, geom, grid=grid), shape=shape)
    img = validate_detector_image(img, geom)
    return _resample_plan(geom, tuple(shape)).apply(img, lp=lp)


def wedge_bounds(q, q_par_max: float, q_z_max: float):
    """Angular range (phi_lo, phi_hi) in degrees reachable at radius ``q``.

    Assumes the measured quadrant spans [0, q_par_max] x [0, q_z_max]; beyond
    the corner radius the range collapses (phi_lo > phi_hi).
    """
    q = np.asarray(q, dtype=np.float64)
    safe = np.maximum(q, 1e-300)
    with np.errstate(invalid="ignore"):
        phi_hi = np.where(q <= q_z_max, 90.0, np.degrees(np.arcsin(np.minimum(q_z_max / safe, 1.0))))
        phi_lo = np.where(q <= q_par_max, 0.0, np.degrees(np.arccos(np.minimum(q_par_max / safe, 1.0))))
    return phi_lo, phi_hi


def max_arc_extent(q, q_par_max: float, q_z_max: float):
    """Largest angular extent (degrees) a ring at radius ``q`` can show on the grid.

    Assumes the measured quadrant spans [0, q_par_max] x [0, q_z_max].
    Returns 0 beyond the grid-corner radius.
    """
    phi_lo, phi_hi = wedge_bounds(q, q_par_max, q_z_max)
    out = np.maximum(phi_hi - phi_lo, 0.0)
    if out.ndim == 0:
        return float(out)
    return out

"""Least-squares refinement of lattice constants from indexed peak positions.

Given observed peak radii ``q_obs`` with Miller indices, the routine refines
orthorhombic lattice constants ``(a, b, c)`` by minimizing the summed squared
radial residuals with analytic first and second derivatives.  The objective
itself is independent of the assumed measurement uncertainty ``sigma``, so
the refined constants do not move when ``sigma`` is rescaled; ``sigma``
enters only the reported chi-square and the parameter standard errors
(errors scale exactly linearly with it).

Covariance comes from the curvature at the optimum: with
``chi2(p) = SSD(p) / sigma^2``, the covariance estimate is twice the inverse
of the chi-square Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .crystal import PhaseCard
from .detect import Detection

_FOUR_PI_SQ = (2.0 * np.pi) ** 2


@dataclass
class RefineResult:
    """Refined lattice constants with uncertainty and diagnostics."""

    params: tuple[float, float, float]  # (a, b, c) in Angstrom
    errors: tuple[float, float, float]  # standard errors, same order
    chi2: float
    n_obs: int
    converged: bool
    singular_curvature: bool
    at_bound: bool

    @property
    def dof(self) -> int:
        return self.n_obs - 3

    @property
    def ok(self) -> bool:
        return self.converged and not self.singular_curvature and not self.at_bound


def _model_q(params: np.ndarray, hkl_sq: np.ndarray) -> np.ndarray:
    inv_sq = 1.0 / params**2
    return 2.0 * np.pi * np.sqrt(hkl_sq @ inv_sq)


def _ssd_grad(params: np.ndarray, hkl_sq: np.ndarray, q_obs: np.ndarray):
    q = _model_q(params, hkl_sq)
    res = q_obs - q
    # dq/dp_j = g_j / q with g_j = -(2 pi)^2 * m_j / p_j^3  (m_j = h^2, k^2 or l^2)
    g = -_FOUR_PI_SQ * hkl_sq / params[None, :] ** 3
    dq = g / q[:, None]
    grad = -2.0 * (res[:, None] * dq).sum(axis=0)
    return float((res**2).sum()), grad


def _ssd_hessian(params: np.ndarray, hkl_sq: np.ndarray, q_obs: np.ndarray) -> np.ndarray:
    q = _model_q(params, hkl_sq)
    res = q_obs - q
    g = -_FOUR_PI_SQ * hkl_sq / params[None, :] ** 3
    dq = g / q[:, None]
    # d2q/dpj dpk = delta_jk * (dg_j/dp_j)/q - g_j q_k / q^3
    dg_diag = 3.0 * _FOUR_PI_SQ * hkl_sq / params[None, :] ** 4
    hess = np.zeros((3, 3))
    for j in range(3):
        for k in range(3):
            d2q = -g[:, j] * g[:, k] / q**3
            if j == k:
                d2q = d2q + dg_diag[:, j] / q
            hess[j, k] = 2.0 * (dq[:, j] * dq[:, k] - res * d2q).sum()
    return hess


def refine_lattice(
    hkl,
    q_obs,
    start: tuple[float, float, float],
    sigma: float = 0.01,
    bound_frac: float = 0.2,
    gtol: float = 1e-8,
    maxiter: int = 500,
) -> RefineResult:
    """Refine (a, b, c) against observed reflection radii.

    Parameters
    ----------
    hkl : (N, 3) integer Miller indices of the observations.
    q_obs : (N,) observed radii in inverse Angstrom.
    start : initial lattice constants; bounds are ``start * (1 +- bound_frac)``.
    sigma : assumed radial measurement uncertainty (inverse Angstrom).

    Raises ``ValueError`` with fewer than four observations - three
    parameters leave no redundancy otherwise.
    """
    hkl = np.asarray(hkl, dtype=np.float64).reshape(-1, 3)
    q_obs = np.asarray(q_obs, dtype=np.float64).ravel()
    if hkl.shape[0] != q_obs.size:
        raise ValueError("hkl and q_obs lengths differ")
    if q_obs.size < 4:
        raise ValueError("refinement needs at least 4 indexed observations")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    hkl_sq = hkl**2

    p0 = np.asarray(start, dtype=np.float64)
    bounds = [(p * (1 - bound_frac), p * (1 + bound_frac)) for p in p0]
    opt = minimize(
        _ssd_grad,
        p0,
        args=(hkl_sq, q_obs),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-14},
    )

    params = opt.x
    at_bound = any(
        min(p - lo, hi - p) <= 1e-9 * max(abs(p), 1.0) for p, (lo, hi) in zip(params, bounds)
    )

    hess_chi2 = _ssd_hessian(params, hkl_sq, q_obs) / sigma**2
    singular = False
    try:
        if np.linalg.cond(hess_chi2) > 1e12:
            singular = True
            errors = (np.inf, np.inf, np.inf)
        else:
            cov = 2.0 * np.linalg.inv(hess_chi2)
            diag = np.clip(np.diag(cov), 0.0, None)
            errors = tuple(float(np.sqrt(v)) for v in diag)
    except np.linalg.LinAlgError:
        singular = True
        errors = (np.inf, np.inf, np.inf)

    ssd, _ = _ssd_grad(params, hkl_sq, q_obs)
    return RefineResult(
        params=tuple(float(p) for p in params),
        errors=errors,
        chi2=ssd / sigma**2,
        n_obs=int(q_obs.size),
        converged=bool(opt.success),
        singular_curvature=singular,
        at_bound=at_bound,
    )


def select_single_phase(assignments, card_name: str) -> list:
    """Assignments of one card whose detections no other card also claims.

    A detection matched by several candidate phases is ambiguous and would
    bias the refinement, so it is excluded.
    """
    claimed: dict[int, set[str]] = {}
    for a in assignments:
        claimed.setdefault(a.detection, set()).add(a.card)
    return [a for a in assignments if a.card == card_name and len(claimed[a.detection]) == 1]


def observations_from(assignments, detections: list[Detection]):
    """(hkl, q_obs) arrays for refinement; fitted centers are preferred."""
    hkl = np.array([a.hkl for a in assignments], dtype=np.intp).reshape(-1, 3)
    q_obs = np.array([detections[a.detection].q_refined for a in assignments])
    return hkl, q_obs


def refine_series(
    detections_by_frame: dict[int, list[Detection]],
    card: PhaseCard,
    competing: list[PhaseCard] | None = None,
    sigma: float = 0.01,
    hkl_range: int = 20,
) -> dict[int, RefineResult]:
    """Refine the card's lattice constants independently for every frame.

    Each frame's detections are indexed against ``card`` (and any
    ``competing`` cards, whose shared detections are then excluded); frames
    with fewer than four usable observations are skipped.
    """
    from .crystal import index_detections

    cards = [card] + [c for c in (competing or []) if c.name != card.name]
    out: dict[int, RefineResult] = {}
    for frame in sorted(detections_by_frame):
        dets = detections_by_frame[frame]
        if not dets:
            continue
        assignments = index_detections(cards, dets, hkl_range=hkl_range)
        mine = select_single_phase(assignments, card.name)
        if len(mine) < 4:
            continue
        hkl, q_obs = observations_from(mine, dets)
        start = (card.cell.a, card.cell.b, card.cell.c)
        out[frame] = refine_lattice(hkl, q_obs, start=start, sigma=sigma)
    return out

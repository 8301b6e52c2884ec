"""Synthetic polar diffraction patterns with exact ground-truth annotations.

Each pattern is built on a fixed-size polar canvas (rows = angle, columns =
radius, both in pixels) from elliptical Gaussian peaks - narrow radially,
anywhere from a compact spot to a full arc in angle - degraded by a
configurable set of nuisances, each applied with its own probability:
smooth angular intensity modulation, linear and coherent-noise backgrounds,
broad amorphous rings, shot noise, zeroed detector gaps, and dark areas.
The result is histogram-equalized so its value distribution resembles
contrast-enhanced measurement data.

Ground truth and reproducibility rules:

* Everything is drawn from one ``numpy.random.default_rng(seed)`` stream in
  a fixed order (peak count, per-peak parameters, stage coins, then stage
  parameters).  Changing the order changes every seeded pattern, so the
  order is append-only.  Stage coins are drawn whether or not the stage
  fires, so the same seed gives the same peaks under any probability table.
* After the per-peak draws, radial centers of angularly-overlapping peaks
  are pushed apart deterministically (no stream consumption) to a
  blend-free gap; sub-resolution center collisions would annotate one
  ridge with two boxes that no detector output can satisfy.
* A peak survives only if it is discernible: its maximum amplitude after
  angular modulation must reach the visibility floor (default 1%) of the
  strongest modulated peak.  Fainter draws are dropped entirely - neither
  rendered nor annotated - because contrast enhancement makes any rendered
  structure plainly visible on an otherwise empty canvas, so unannotated
  clutter would be indistinguishable from annotated peaks and every
  annotation set would be incomplete for its own image.
* Ground truth is fixed before backgrounds, noise, gaps, and dark areas are
  drawn, so ``render=False`` yields bit-identical boxes at a fraction of
  the cost.
* Gap and dark-area pixels are exactly zero before equalization, and
  equalization keeps the lowest occupied bin at zero.

Truth boxes are ``(q_lo, q_hi, phi_lo, phi_hi, q_center, w_sim)`` rows in
pixel units, with ``w_sim`` the radial Gaussian sigma.  The radial box
half-width is padded to ``1.1 * w_sim + 1.5`` pixels (before boundary
clipping) so each box encloses its peak's visible footprint plus a rim of
background; the angular half-extent is half the drawn extent.  The angular
Gaussian sigma is a quarter of the drawn extent and the rendered support is
cut at the box edge (two sigma, 95% of the profile mass), so a truth box
bounds its peak's angular footprint exactly - an annotation that claims
less than the visible arc would mislabel the image for any detector
benchmarked or trained against it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .enhance import clahe, equalize_global

BOX_PAD_SLOPE = 1.1
BOX_PAD_OFFSET = 1.5

PERLIN_CELL = 64  # lattice cell size (px) for modulation and background noise

# Minimum radial gap between angularly-overlapping peaks, in units of their
# combined radial sigma plus a constant: closer pairs blend into a single
# unresolvable ridge, which would put two contradictory annotations on one
# image feature.
SEP_WIDTH_FACTOR = 3.0
SEP_BASE = 1.0


@dataclass(frozen=True)
class SimulationConfig:
    """Distributions and stage probabilities of the pattern generator.

    The peak count is uniform on ``{count_lo .. count_hi}``; the count
    bounds are calibrated so the default configuration averages about 17.5
    ground-truth peaks per image.  Radial width is log-uniform, angular
    extent and radial position uniform, amplitude log-uniform over
    ``amplitude_decades`` decades.
    """

    image_size: tuple[int, int] = (512, 512)  # (rows = angle, cols = radius)
    count_lo: int = 7
    count_hi: int = 44
    q_center_lo: float = 16.0
    q_center_hi: float = 496.0
    width_lo: float = 0.8
    width_hi: float = 6.0
    extent_lo: float = 8.0
    extent_hi: float = 512.0
    amplitude_decades: float = 3.0
    p_modulation: float = 0.7
    p_linear_bg: float = 0.5
    p_perlin_bg: float = 0.5
    p_halos: float = 0.5
    p_poisson: float = 0.8
    p_gaps: float = 0.3
    p_dark: float = 0.3
    visibility_floor: float = 0.01
    equalize: str = "global"  # "global" or "clahe"

    def __post_init__(self):
        probs = (
            self.p_modulation, self.p_linear_bg, self.p_perlin_bg,
            self.p_halos, self.p_poisson, self.p_gaps, self.p_dark,
        )
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("stage probabilities must be in [0, 1]")
        if self.count_lo < 0 or self.count_hi < self.count_lo:
            raise ValueError("peak count bounds must satisfy 0 <= lo <= hi")
        if not 0 < self.width_lo <= self.width_hi:
            raise ValueError("radial width bounds must satisfy 0 < lo <= hi")
        if self.equalize not in ("global", "clahe"):
            raise ValueError("equalize must be 'global' or 'clahe'")

    def clean(self) -> "SimulationConfig":
        """Noise-free, artifact-free variant: bare peaks plus equalization."""
        return replace(
            self,
            p_modulation=0.0, p_linear_bg=0.0, p_perlin_bg=0.0,
            p_halos=0.0, p_poisson=0.0, p_gaps=0.0, p_dark=0.0,
        )


@dataclass
class SimulatedPattern:
    """One synthetic frame.

    ``image`` is the final equalized frame in [0, 1]; ``raw_image`` the
    pre-equalization intensities (profile fitting reads unequalized data);
    both are None when rendering was skipped.  ``boxes`` rows are
    ``(q_lo, q_hi, phi_lo, phi_hi, q_center, w_sim)`` in pixels and
    ``amplitudes`` holds the matching per-peak rendered maxima (after
    angular modulation), so callers can stratify truth by brightness.
    """

    image: np.ndarray | None
    raw_image: np.ndarray | None
    boxes: np.ndarray
    n_seeded: int
    seed: int
    amplitudes: np.ndarray | None = None


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def perlin(shape: tuple[int, int], cell_size: int, seed) -> np.ndarray:
    """Gradient-lattice coherent noise in [-1, 1], zero at lattice nodes.

    ``seed`` may be an integer or an existing ``numpy.random.Generator``
    (which is advanced by the lattice draw).
    """
    if cell_size < 2:
        raise ValueError("cell_size must be >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = shape
    gh, gw = h // cell_size + 2, w // cell_size + 2
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(gh, gw))
    gy, gx = np.sin(theta), np.cos(theta)

    ys = np.arange(h, dtype=np.float64) / cell_size
    xs = np.arange(w, dtype=np.float64) / cell_size
    yi = ys.astype(np.intp)
    xi = xs.astype(np.intp)
    yf = ys - yi
    xf = xs - xi

    uniform = h % cell_size == 0 and w % cell_size == 0

    def gather(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
        if uniform:  # whole cells only: block expansion beats fancy indexing
            ny, nx = h // cell_size, w // cell_size
            block = a[dy : dy + ny, dx : dx + nx]
            return np.repeat(np.repeat(block, cell_size, axis=0), cell_size, axis=1)
        return a[np.ix_(yi + dy, xi + dx)]

    def corner(dy: int, dx: int) -> np.ndarray:
        return gather(gy, dy, dx) * (yf - dy)[:, None] + gather(gx, dy, dx) * (xf - dx)[None, :]

    c00, c01, c10, c11 = corner(0, 0), corner(0, 1), corner(1, 0), corner(1, 1)
    uy = _fade(yf)[:, None]
    ux = _fade(xf)[None, :]
    top = c00 + ux * (c01 - c00)
    bot = c10 + ux * (c11 - c10)
    return np.sqrt(2.0) * (top + uy * (bot - top))


def _perlin01(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    return 0.5 * (perlin(shape, PERLIN_CELL, rng) + 1.0)


def _separate_radially(q_c, w_sim, phi_c, sig_phi, lo, hi):
    """Push angularly-overlapping peaks apart to a blend-free radial gap.

    Peaks are visited in draw order.  Each peak must keep a radial
    distance of at least ``SEP_WIDTH_FACTOR * (w_i + w_j) + SEP_BASE``
    from every *earlier* peak whose angular support it overlaps; the
    earlier peaks are already final, so their exclusion zones form a
    fixed union of intervals and the current peak moves to the nearest
    point outside it (staying within the allowed center range).  One
    sweep therefore converges exactly, deterministically, and without
    drawing from the random stream.  When the whole range is excluded -
    the canvas is too crowded to hold another distinguishable peak in
    that angular sector - the peak is marked for dropping instead;
    ``keep`` flags the survivors.
    """
    n = q_c.size
    keep = np.ones(n, dtype=bool)
    for j in range(1, n):
        forbidden = []
        for i in range(j):
            if not keep[i]:
                continue
            ang_overlap = min(
                phi_c[i] + 2.0 * sig_phi[i], phi_c[j] + 2.0 * sig_phi[j]
            ) - max(phi_c[i] - 2.0 * sig_phi[i], phi_c[j] - 2.0 * sig_phi[j])
            if ang_overlap <= 0.0:
                continue
            gap = SEP_WIDTH_FACTOR * (w_sim[i] + w_sim[j]) + SEP_BASE
            forbidden.append((q_c[i] - gap, q_c[i] + gap))
        if not forbidden:
            continue
        forbidden.sort()
        merged = [list(forbidden[0])]
        for a, b in forbidden[1:]:
            if a <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        inside = next((m for m in merged if m[0] < q_c[j] < m[1]), None)
        if inside is None:
            continue
        candidates = [
            edge
            for m in merged
            for edge in m
            if lo <= edge <= hi
            and not any(mm[0] < edge < mm[1] for mm in merged)
        ]
        if candidates:
            q_c[j] = min(candidates, key=lambda e: (abs(e - q_c[j]), e))
        else:
            keep[j] = False
    return q_c, keep


def _render_peak(shape, phi_c, q_c, sig_phi, sig_q, amp):
    """Gaussian footprint: +-4 sigma radially, cut at +-2 sigma in angle.

    The angular cut puts the support edge exactly on the truth box edge;
    rows whose centers fall outside two sigma contribute nothing.
    """
    h, w = shape
    r0 = max(0, int(np.floor(phi_c - 2 * sig_phi)))
    r1 = min(h, int(np.ceil(phi_c + 2 * sig_phi)) + 1)
    c0 = max(0, int(np.floor(q_c - 4 * sig_q)))
    c1 = min(w, int(np.ceil(q_c + 4 * sig_q)) + 1)
    if r1 <= r0 or c1 <= c0:
        return None
    rows = np.arange(r0, r1, dtype=np.float64)
    cols = np.arange(c0, c1, dtype=np.float64)
    prof_phi = np.exp(-((rows - phi_c) ** 2) / (2.0 * sig_phi**2))
    prof_phi[np.abs(rows - phi_c) > 2.0 * sig_phi] = 0.0
    g = amp * np.outer(
        prof_phi,
        np.exp(-((cols - q_c) ** 2) / (2.0 * sig_q**2)),
    )
    return (slice(r0, r1), slice(c0, c1)), g


def simulate_pattern(
    seed: int,
    config: SimulationConfig | None = None,
    render: bool = True,
) -> SimulatedPattern:
    """Generate one synthetic frame and its ground-truth boxes.

    With ``render=False`` only the truth boxes are computed; they are
    bit-identical to the rendered case.
    """
    cfg = config if config is not None else SimulationConfig()
    rng = np.random.default_rng(seed)
    h, w = cfg.image_size
    shape = (h, w)

    # --- fixed draw order: peak count and per-peak parameters ------------
    n = int(rng.integers(cfg.count_lo, cfg.count_hi + 1))
    q_c = rng.uniform(cfg.q_center_lo, cfg.q_center_hi, size=n)
    phi_c = rng.uniform(0.0, float(h), size=n)
    w_sim = 10.0 ** rng.uniform(np.log10(cfg.width_lo), np.log10(cfg.width_hi), size=n)
    extent = rng.uniform(cfg.extent_lo, cfg.extent_hi, size=n)
    amp = 10.0 ** rng.uniform(-cfg.amplitude_decades, 0.0, size=n)
    sig_phi = extent / 4.0
    q_c, keep = _separate_radially(
        q_c, w_sim, phi_c, sig_phi, float(cfg.q_center_lo), float(cfg.q_center_hi)
    )

    # --- fixed draw order: stage coins -----------------------------------
    coin = rng.uniform(size=7)
    use_modulation = coin[0] < cfg.p_modulation
    use_linear_bg = coin[1] < cfg.p_linear_bg
    use_perlin_bg = coin[2] < cfg.p_perlin_bg
    use_halos = coin[3] < cfg.p_halos
    use_poisson = coin[4] < cfg.p_poisson
    use_gaps = coin[5] < cfg.p_gaps
    use_dark = coin[6] < cfg.p_dark

    # --- angular modulation (the only nuisance that shapes ground truth) --
    mod = 0.1 + 0.9 * _perlin01(rng, shape) if use_modulation else None

    peak_vis = np.zeros(n)
    windows: list[tuple[tuple[slice, slice], np.ndarray] | None] = []
    for i in range(n):
        rendered = (
            _render_peak(shape, phi_c[i], q_c[i], sig_phi[i], w_sim[i], amp[i])
            if keep[i]
            else None
        )
        windows.append(rendered)
        if rendered is None:
            continue
        sl, g = rendered
        gm = g * mod[sl] if mod is not None else g
        peak_vis[i] = gm.max()

    if keep.any():
        visible = keep & (peak_vis >= cfg.visibility_floor * peak_vis[keep].max())
    else:
        visible = np.zeros(n, dtype=bool)

    peak_img = None
    if render:
        peak_img = np.zeros(shape)
        for i in np.flatnonzero(visible):
            if windows[i] is None:
                continue
            sl, g = windows[i]
            peak_img[sl] += g * mod[sl] if mod is not None else g
    half = BOX_PAD_SLOPE * w_sim + BOX_PAD_OFFSET
    boxes = np.column_stack(
        [
            np.clip(q_c - half, 0.0, float(w)),
            np.clip(q_c + half, 0.0, float(w)),
            np.clip(phi_c - 2.0 * sig_phi, 0.0, float(h)),
            np.clip(phi_c + 2.0 * sig_phi, 0.0, float(h)),
            q_c,
            w_sim,
        ]
    )[visible]

    if not render:
        return SimulatedPattern(
            image=None, raw_image=None, boxes=boxes, n_seeded=n, seed=seed,
            amplitudes=peak_vis[visible],
        )

    # --- nuisances (never touch the truth above) --------------------------
    img = peak_img
    yy = (np.arange(h, dtype=np.float64) / h)[:, None]
    xx = (np.arange(w, dtype=np.float64) / w)[None, :]
    if use_linear_bg:
        b0 = rng.uniform(0.0, 0.15)
        bq = rng.uniform(-0.1, 0.1)
        bp = rng.uniform(-0.05, 0.05)
        img += np.maximum(b0 + bq * xx + bp * yy, 0.0)
    if use_perlin_bg:
        amp_bg = rng.uniform(0.05, 0.2)
        img += amp_bg * _perlin01(rng, shape)
    if use_halos:
        n_h = int(rng.integers(1, 4))
        cols = np.arange(w, dtype=np.float64)
        for _ in range(n_h):
            q_h = rng.uniform(30.0, w - 30.0)
            sig_h = rng.uniform(20.0, 80.0)
            amp_h = rng.uniform(0.05, 0.3)
            img += amp_h * np.exp(-((cols - q_h) ** 2) / (2.0 * sig_h**2))[None, :]
    if use_poisson:
        counts = 10.0 ** rng.uniform(np.log10(50.0), np.log10(5000.0))
        mx = img.max()
        if mx > 0:
            img = rng.poisson(img / mx * counts).astype(np.float64) * (mx / counts)
    if use_gaps:
        n_g = int(rng.integers(1, 4))
        for _ in range(n_g):
            vertical = rng.uniform() < 0.5
            width = int(rng.integers(4, 17))
            if vertical:
                pos = int(rng.integers(0, max(w - width, 1)))
                img[:, pos : pos + width] = 0.0
            else:
                pos = int(rng.integers(0, max(h - width, 1)))
                img[pos : pos + width, :] = 0.0
    if use_dark:
        n_d = int(rng.integers(1, 4))
        for _ in range(n_d):
            dh = int(rng.integers(20, 121))
            dw = int(rng.integers(20, 121))
            r = int(rng.integers(0, max(h - dh, 1)))
            c = int(rng.integers(0, max(w - dw, 1)))
            img[r : r + dh, c : c + dw] = 0.0

    raw = img
    if cfg.equalize == "clahe":
        final = clahe(raw)
    else:
        final = equalize_global(raw)
    return SimulatedPattern(
        image=final, raw_image=raw, boxes=boxes, n_seeded=n, seed=seed,
        amplitudes=peak_vis[visible],
    )


def series_seed(base_seed: int, index: int) -> int:
    """Per-image seed for batch generation (stable, collision-free per run)."""
    return (int(base_seed) ^ index) & 0xFFFFFFFFFFFFFFFF


def simulate_series(
    base_seed: int,
    n_images: int,
    config: SimulationConfig | None = None,
    render: bool = True,
):
    """Yield ``(index, SimulatedPattern)`` for a reproducible batch."""
    for i in range(n_images):
        yield i, simulate_pattern(series_seed(base_seed, i), config=config, render=render)


def mean_truth_count(
    base_seed: int,
    n_images: int,
    config: SimulationConfig | None = None,
) -> float:
    """Average number of ground-truth peaks per image over a seeded batch."""
    total = 0
    for _, sim in simulate_series(base_seed, n_images, config=config, render=False):
        total += sim.boxes.shape[0]
    return total / n_images


def export_dataset(
    out_dir,
    n_images: int,
    base_seed: int = 0,
    config: SimulationConfig | None = None,
) -> None:
    """Write a dataset: images, per-image annotations, and a manifest.

    Layout: ``frame_00000.tif`` + ``frame_00000.txt`` per image, and
    ``manifest.txt`` holding the generator configuration, the base seed,
    and every per-image seed, so the set can be regenerated exactly.
    """
    from pathlib import Path

    from . import fileio

    cfg = config if config is not None else SimulationConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, sim in simulate_series(base_seed, n_images, config=cfg):
        fileio.write_tiff(out / f"frame_{i:05d}.tif", sim.image)
        fileio.write_annotations(out / f"frame_{i:05d}.txt", sim.boxes)
    with open(out / "manifest.txt", "w", encoding="utf-8") as f:
        f.write(config_text(cfg))
        f.write(f"base_seed = {base_seed}\nn_images = {n_images}\n")
        for i in range(n_images):
            f.write(f"seed_{i:05d} = {series_seed(base_seed, i)}\n")


_CONFIG_FIELDS = (
    "count_lo", "count_hi", "q_center_lo", "q_center_hi", "width_lo", "width_hi",
    "extent_lo", "extent_hi", "amplitude_decades", "p_modulation", "p_linear_bg",
    "p_perlin_bg", "p_halos", "p_poisson", "p_gaps", "p_dark", "visibility_floor",
)


def config_text(cfg: SimulationConfig) -> str:
    """Key-value serialization of a configuration."""
    lines = [f"image_size = {cfg.image_size[0]} {cfg.image_size[1]}"]
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, int):
            lines.append(f"{name} = {value}")
        else:
            lines.append(f"{name} = {'%.9g' % value}")
    lines.append(f"equalize = {cfg.equalize}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str, source: str = "<config>") -> SimulationConfig:
    """Parse a configuration written by :func:`config_text` (all keys optional)."""
    from . import fileio
    from .errors import ConfigError

    kv = fileio.parse_key_values(text, source=source)
    kwargs = {}
    try:
        if "image_size" in kv:
            parts = kv.pop("image_size").split()
            kwargs["image_size"] = (int(parts[0]), int(parts[1]))
        if "equalize" in kv:
            kwargs["equalize"] = kv.pop("equalize")
        for name in ("count_lo", "count_hi"):
            if name in kv:
                kwargs[name] = int(float(kv.pop(name)))
        for name in _CONFIG_FIELDS:
            if name in kv:
                kwargs[name] = float(kv.pop(name))
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if kv:
        raise ConfigError(f"{source}: unknown keys {sorted(kv)}")
    try:
        return SimulationConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None

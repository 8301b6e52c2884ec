"""File formats: images, configuration, phase cards, annotations, detections, tracks.

Text formats share two rules: ``#`` starts a comment (anywhere on a line),
and floating-point values are written with nine significant digits, which is
the format's precision - values written and read back match at that
precision.  Column-oriented records are whitespace-separated.

Image containers:

* ``.tif`` / ``.tiff`` - single-channel 32-bit float TIFF.
* ``.gxi`` - minimal raw container: magic ``GXI1``, then three little-endian
  uint32 words (width = columns, height = rows, sample code 0=float32
  1=float64 2=uint16 3=uint32), then row-major little-endian samples.

The detection exchange format is the contract between detector
implementations and downstream tracking: a ``#units`` line (``px`` or
``invA``), one ``#frame <id> <q0> <dq> <phi0> <dphi>`` line per frame
describing its axis grids, then one record per detection::

    frame_id  q_center  q_width  phi_center  phi_extent  score

with full widths (not half) and scores in [0, 1].
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np
from PIL import Image

from .crystal import PhaseCard, UnitCell
from .detect import Detection, PeakFit
from .errors import ConfigError, DataError
from .geometry import ExperimentGeometry, PolarImage
from .postprocess import Track

RAW_MAGIC = b"GXI1"
_RAW_DTYPES = {0: np.float32, 1: np.float64, 2: np.uint16, 3: np.uint32}
_RAW_CODES = {np.dtype(v).str: k for k, v in _RAW_DTYPES.items()}

DETECTION_UNITS = ("px", "invA")


def fmt(value: float) -> str:
    """Canonical text form of a float (nine significant digits)."""
    return "%.9g" % value


# --------------------------------------------------------------------------
# images


def write_tiff(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D image")
    Image.fromarray(arr, mode="F").save(str(path), format="TIFF")


def read_tiff(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image")
    return arr.astype(np.float64)


def write_raw(path, img: np.ndarray, dtype=np.float32) -> None:
    arr = np.asarray(img).astype(dtype)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D image")
    code = _RAW_CODES.get(np.dtype(dtype).newbyteorder("<").str)
    if code is None:
        raise ValueError(f"unsupported sample type {np.dtype(dtype)}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<III", w, h, code))
        f.write(arr.astype(np.dtype(dtype).newbyteorder("<"), copy=False).tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw image file (bad magic)")
    w, h, code = struct.unpack("<III", blob[4:16])
    dtype = _RAW_DTYPES.get(code)
    if dtype is None:
        raise DataError(f"{path}: unknown sample code {code}")
    expected = 16 + w * h * np.dtype(dtype).itemsize
    if len(blob) != expected:
        raise DataError(f"{path}: size {len(blob)} != expected {expected}")
    arr = np.frombuffer(blob, dtype=np.dtype(dtype).newbyteorder("<"), offset=16)
    return arr.reshape(h, w).astype(np.float64)


def write_image(path, img: np.ndarray) -> None:
    p = str(path).lower()
    if p.endswith((".tif", ".tiff")):
        write_tiff(path, img)
    elif p.endswith(".gxi"):
        write_raw(path, img)
    else:
        raise ConfigError(f"{path}: unsupported image extension (use .tif/.tiff/.gxi)")


def read_image(path) -> np.ndarray:
    p = str(path).lower()
    if p.endswith((".tif", ".tiff")):
        return read_tiff(path)
    if p.endswith(".gxi"):
        return read_raw(path)
    raise ConfigError(f"{path}: unsupported image extension (use .tif/.tiff/.gxi)")


# --------------------------------------------------------------------------
# key = value configuration


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; comments and blank lines are ignored."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _floats(value: str, n: int, source: str, key: str) -> list[float]:
    parts = value.replace(",", " ").split()
    if len(parts) != n:
        raise ConfigError(f"{source}: key {key!r} needs {n} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{source}: key {key!r}: {exc}") from None


def _float(kv: dict, key: str, source: str, default=None) -> float:
    if key not in kv:
        if default is not None:
            return default
        raise ConfigError(f"{source}: missing key {key!r}")
    return _floats(kv[key], 1, source, key)[0]


# --------------------------------------------------------------------------
# geometry files


def load_geometry(path) -> ExperimentGeometry:
    with open(path, encoding="utf-8") as f:
        kv = parse_key_values(f.read(), source=str(path))
    source = str(path)
    shape = _floats(kv.get("shape_px", ""), 2, source, "shape_px") if "shape_px" in kv else None
    if shape is None:
        raise ConfigError(f"{source}: missing key 'shape_px'")
    center = _floats(kv.get("beam_center_px", ""), 2, source, "beam_center_px") if "beam_center_px" in kv else None
    if center is None:
        raise ConfigError(f"{source}: missing key 'beam_center_px'")
    try:
        return ExperimentGeometry(
            photon_energy_kev=_float(kv, "energy_kev", source),
            incidence_deg=_float(kv, "alpha_i_deg", source),
            distance_mm=_float(kv, "distance_mm", source),
            pixel_mm=_float(kv, "pixel_mm", source),
            beam_center_px=(center[0], center[1]),
            detector_shape=(int(shape[0]), int(shape[1])),
            polarization=_float(kv, "polarization", source, default=1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def save_geometry(path, geom: ExperimentGeometry) -> None:
    lines = [
        "# measurement geometry",
        f"energy_kev = {fmt(geom.photon_energy_kev)}",
        f"alpha_i_deg = {fmt(geom.incidence_deg)}",
        f"distance_mm = {fmt(geom.distance_mm)}",
        f"pixel_mm = {fmt(geom.pixel_mm)}",
        f"beam_center_px = {fmt(geom.beam_center_px[0])} {fmt(geom.beam_center_px[1])}",
        f"shape_px = {geom.detector_shape[0]} {geom.detector_shape[1]}",
        f"polarization = {fmt(geom.polarization)}",
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# phase cards


_CELL_KEYS = ("name", "system", "a", "b", "c", "alpha", "beta", "gamma", "orientation")


def load_phase_card(path) -> PhaseCard:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    source = str(path)

    head_lines: list[str] = []
    refl_lines: list[tuple[int, str]] = []
    in_refl = False
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if not in_refl and line.rstrip(":") == "reflections" and line.endswith(":"):
            in_refl = True
            continue
        if in_refl:
            refl_lines.append((ln, line))
        else:
            head_lines.append(raw)

    kv = parse_key_values("\n".join(head_lines), source=source)
    name = kv.get("name")
    if not name:
        raise ConfigError(f"{source}: missing key 'name'")
    system = kv.get("system", "orthorhombic").lower()
    if system not in ("orthorhombic", "cubic", "tetragonal", "triclinic"):
        raise ConfigError(f"{source}: unsupported system {system!r}")
    a = _float(kv, "a", source)
    if system == "cubic":
        b = _float(kv, "b", source, default=a)
        c = _float(kv, "c", source, default=a)
    elif system == "tetragonal":
        b = _float(kv, "b", source, default=a)
        c = _float(kv, "c", source)
    else:
        b = _float(kv, "b", source)
        c = _float(kv, "c", source)
    cell_kwargs = {}
    for key in ("alpha", "beta", "gamma"):
        if key in kv:
            cell_kwargs[key] = _float(kv, key, source)

    orientation = None
    if "orientation" in kv and kv["orientation"].strip().lower() != "powder":
        uvw = _floats(kv["orientation"], 3, source, "orientation")
        orientation = (int(uvw[0]), int(uvw[1]), int(uvw[2]))

    metadata = tuple((k, v) for k, v in kv.items() if k not in _CELL_KEYS)

    reflections = None
    if in_refl:
        table = []
        for ln, line in refl_lines:
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{source}:{ln}: reflection rows need 'h k l intensity'")
            try:
                h, k, l = (int(p) for p in parts[:3])
                inten = float(parts[3])
            except ValueError as exc:
                raise DataError(f"{source}:{ln}: {exc}") from None
            table.append(((h, k, l), inten))
        reflections = tuple(table)

    try:
        return PhaseCard(
            name=name,
            cell=UnitCell(a=a, b=b, c=c, **cell_kwargs),
            orientation=orientation,
            reflections=reflections,
            metadata=metadata,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def save_phase_card(path, card: PhaseCard) -> None:
    cell = card.cell
    lines = [f"name = {card.name}", f"a = {fmt(cell.a)}", f"b = {fmt(cell.b)}", f"c = {fmt(cell.c)}"]
    if (cell.alpha, cell.beta, cell.gamma) != (90.0, 90.0, 90.0):
        lines += [f"alpha = {fmt(cell.alpha)}", f"beta = {fmt(cell.beta)}", f"gamma = {fmt(cell.gamma)}"]
    if card.orientation is not None:
        lines.append("orientation = %d %d %d" % card.orientation)
    else:
        lines.append("orientation = powder")
    for key, value in card.metadata:
        lines.append(f"{key} = {value}")
    if card.reflections is not None:
        lines.append("reflections:")
        for (h, k, l), inten in card.reflections:
            lines.append(f"{h} {k} {l} {fmt(inten)}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# ground-truth annotations


ANNOTATION_HEADER = "# q_lo q_hi phi_lo phi_hi q_center w_sim"


def write_annotations(path, boxes: np.ndarray) -> None:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    with open(path, "w", encoding="utf-8") as f:
        f.write(ANNOTATION_HEADER + "\n")
        for row in boxes:
            f.write(" ".join(fmt(v) for v in row) + "\n")


def read_annotations(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            line = _strip(raw)
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"{path}:{ln}: annotation rows need 6 values")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: {exc}") from None
    if not rows:
        return np.zeros((0, 6))
    return np.array(rows)


# --------------------------------------------------------------------------
# polar frames on disk

FrameAxes = tuple[float, float, float, float]  # q0, dq, phi0, dphi


def axes_of(pimg: PolarImage) -> FrameAxes:
    """Origin and step of a polar image's (uniform) axes."""
    return (
        float(pimg.q[0]),
        float(pimg.q[1] - pimg.q[0]),
        float(pimg.phi_deg[0]),
        float(pimg.phi_deg[1] - pimg.phi_deg[0]),
    )


def save_axes(path, axes: FrameAxes) -> None:
    q0, dq, phi0, dphi = axes
    with open(path, "w", encoding="utf-8") as f:
        f.write("# polar grid: value = origin + index * step\n")
        f.write(f"q0 = {fmt(q0)}\nd_q = {fmt(dq)}\nphi0 = {fmt(phi0)}\nd_phi = {fmt(dphi)}\n")


def load_axes(path) -> FrameAxes:
    with open(path, encoding="utf-8") as f:
        kv = parse_key_values(f.read(), source=str(path))
    source = str(path)
    return (
        _float(kv, "q0", source),
        _float(kv, "d_q", source),
        _float(kv, "phi0", source),
        _float(kv, "d_phi", source),
    )


def write_polar_frame(path, pimg: PolarImage) -> None:
    """Store a polar frame as float32 TIFF with NaN marking masked pixels."""
    data = np.where(pimg.mask, np.nan, pimg.intensities).astype(np.float32)
    Image.fromarray(data, mode="F").save(str(path), format="TIFF")


def read_polar_frame(path, axes: FrameAxes) -> PolarImage:
    arr = read_tiff(path)
    mask = ~np.isfinite(arr)
    q0, dq, phi0, dphi = axes
    n_phi, n_q = arr.shape
    return PolarImage(
        intensities=np.where(mask, 0.0, arr),
        phi_deg=phi0 + dphi * np.arange(n_phi),
        q=q0 + dq * np.arange(n_q),
        mask=mask,
    )


# --------------------------------------------------------------------------
# detection exchange format


def write_detections(
    path,
    detections: Iterable[Detection],
    units: str,
    frame_axes: dict[int, FrameAxes],
) -> None:
    if units not in DETECTION_UNITS:
        raise ValueError(f"units must be one of {DETECTION_UNITS}")
    detections = list(detections)
    for d in detections:
        if d.frame not in frame_axes:
            raise ValueError(f"detection frame {d.frame} has no frame axes")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#units {units}\n")
        for fid in sorted(frame_axes):
            q0, dq, phi0, dphi = frame_axes[fid]
            f.write(f"#frame {fid} {fmt(q0)} {fmt(dq)} {fmt(phi0)} {fmt(dphi)}\n")
        for d in detections:
            f.write(
                f"{d.frame} {fmt(d.q_center)} {fmt(d.q_width)} "
                f"{fmt(d.phi_center)} {fmt(d.phi_extent)} {fmt(d.score)}\n"
            )


def read_detections(path) -> tuple[str, dict[int, FrameAxes], list[Detection]]:
    units = None
    frames: dict[int, FrameAxes] = {}
    detections: list[Detection] = []
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.startswith("#units"):
                parts = line.split()
                if len(parts) != 2 or parts[1] not in DETECTION_UNITS:
                    raise DataError(f"{path}:{ln}: bad units line {raw!r}")
                if units is not None:
                    raise DataError(f"{path}:{ln}: duplicate units line")
                units = parts[1]
                continue
            if line.startswith("#frame"):
                parts = line.split()
                if len(parts) != 6:
                    raise DataError(f"{path}:{ln}: frame lines need '#frame id q0 dq phi0 dphi'")
                try:
                    fid = int(parts[1])
                    axes = tuple(float(p) for p in parts[2:])
                except ValueError as exc:
                    raise DataError(f"{path}:{ln}: {exc}") from None
                if fid in frames:
                    raise DataError(f"{path}:{ln}: duplicate frame {fid}")
                frames[fid] = axes  # type: ignore[assignment]
                continue
            line = _strip(raw)
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"{path}:{ln}: detection rows need 6 values")
            try:
                fid = int(parts[0])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: {exc}") from None
            if fid not in frames:
                raise DataError(f"{path}:{ln}: detection references unknown frame {fid}")
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{ln}: non-finite value")
            if vals[1] < 0 or vals[3] < 0:
                raise DataError(f"{path}:{ln}: widths must be non-negative")
            if not 0.0 <= vals[4] <= 1.0:
                raise DataError(f"{path}:{ln}: score {vals[4]} outside [0, 1]")
            detections.append(
                Detection(
                    q_center=vals[0],
                    q_width=vals[1],
                    phi_center=vals[2],
                    phi_extent=vals[3],
                    score=vals[4],
                    frame=fid,
                )
            )
    if units is None:
        raise DataError(f"{path}: missing '#units' line")
    return units, frames, detections


# --------------------------------------------------------------------------
# track files


def write_tracks(path, tracks: Iterable[Track], units: str) -> None:
    if units not in DETECTION_UNITS:
        raise ValueError(f"units must be one of {DETECTION_UNITS}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#units {units}\n")
        f.write("# track frame q_center q_width phi_center phi_extent score"
                " [fit_center fit_sigma fit_height fit_slope fit_offset]\n")
        for t in tracks:
            for d in t.detections:
                base = (
                    f"{t.track_id} {d.frame} {fmt(d.q_center)} {fmt(d.q_width)} "
                    f"{fmt(d.phi_center)} {fmt(d.phi_extent)} {fmt(d.score)}"
                )
                if d.fit is not None and d.fit.ok:
                    base += (
                        f" {fmt(d.fit.center)} {fmt(d.fit.sigma)} {fmt(d.fit.height)}"
                        f" {fmt(d.fit.slope)} {fmt(d.fit.offset)}"
                    )
                f.write(base + "\n")


def read_tracks(path) -> tuple[str, list[Track]]:
    units = None
    by_id: dict[int, list[Detection]] = {}
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.startswith("#units"):
                parts = line.split()
                if len(parts) != 2 or parts[1] not in DETECTION_UNITS:
                    raise DataError(f"{path}:{ln}: bad units line {raw!r}")
                units = parts[1]
                continue
            line = _strip(raw)
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (7, 12):
                raise DataError(f"{path}:{ln}: track rows need 7 or 12 values")
            try:
                tid = int(parts[0])
                fid = int(parts[1])
                vals = [float(p) for p in parts[2:]]
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: {exc}") from None
            fit = None
            if len(vals) == 10:
                fit = PeakFit(center=vals[5], sigma=vals[6], height=vals[7], slope=vals[8], offset=vals[9])
            by_id.setdefault(tid, []).append(
                Detection(
                    q_center=vals[0],
                    q_width=vals[1],
                    phi_center=vals[2],
                    phi_extent=vals[3],
                    score=vals[4],
                    frame=fid,
                    fit=fit,
                )
            )
    if units is None:
        raise DataError(f"{path}: missing '#units' line")
    tracks = []
    for tid in sorted(by_id):
        dets = sorted(by_id[tid], key=lambda d: d.frame)
        tracks.append(Track(track_id=tid, detections=dets))
    return units, tracks

"""Command-line interface.

Subcommands cover the full chain: ``simulate`` (synthetic training data),
``preprocess`` (detector frames to polar images, plain and contrast-enhanced),
``detect`` (classical peak finding), ``ingest`` (validate a detection exchange
file from any detector implementation), ``track`` (NMS, score filter, frame
linking, duration filter), ``fitpeaks`` (radial profile fits on unenhanced
frames), ``identify`` / ``index`` (phase candidates against detections),
``refine`` (per-frame lattice constants), ``benchmark`` (detector quality
against ground truth), and ``report`` (track summary and plot data).

Exit codes: 0 success, 2 configuration error (also used by argparse),
3 malformed data file.
"""

from __future__ import annotations

import argparse
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio, simulate
from .errors import ConfigError, DataError
from .pipeline import (
    benchmark_series,
    detect_and_clean,
    preprocess_frame,
    track_series,
)
from .postprocess import filter_score, fit_detections, nms
from .refine import refine_series

_DIGITS = re.compile(r"\d+")

RAW_SUFFIX = ".raw.tif"  # unenhanced polar twin written next to each enhanced frame


def _frame_id(path: Path, fallback: int) -> int:
    matches = _DIGITS.findall(path.name)
    return int(matches[-1]) if matches else fallback


def _image_files(directory: Path) -> list[Path]:
    files = [
        p
        for p in directory.iterdir()
        if p.suffix.lower() in (".tif", ".tiff", ".gxi") and not p.name.endswith(RAW_SUFFIX)
    ]
    return sorted(files)


def _load_frames(directory: Path, prefer_raw: bool = False):
    """Polar frames of a directory keyed by frame id, with their units.

    With ``prefer_raw`` the unenhanced twin (``<stem>.raw.tif``) replaces the
    enhanced frame whenever it exists; profile fitting must see unenhanced
    intensities.
    """
    directory = Path(directory)
    axes_file = directory / "axes.txt"
    if axes_file.exists():
        units = "invA"
        axes = fileio.load_axes(axes_file)
    else:
        units = "px"
        axes = (0.0, 1.0, 0.0, 1.0)
    frames = {}
    for i, path in enumerate(_image_files(directory)):
        if prefer_raw:
            twin = path.with_name(path.stem + RAW_SUFFIX)
            if twin.exists():
                path = twin
        frames[_frame_id(path, i)] = fileio.read_polar_frame(path, axes)
    if not frames:
        raise DataError(f"{directory}: no image files found")
    return units, frames


def _dets_by_frame(detections):
    out: dict[int, list] = {}
    for d in detections:
        out.setdefault(d.frame, []).append(d)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    if args.config:
        cfg = simulate.config_from_text(
            Path(args.config).read_text(encoding="utf-8"), source=args.config
        )
    else:
        cfg = simulate.SimulationConfig()
    if args.clean:
        cfg = cfg.clean()
    simulate.export_dataset(args.out, args.n, base_seed=args.seed, config=cfg)
    mean = simulate.mean_truth_count(args.seed, args.n, config=cfg) if args.n else 0.0
    print(f"wrote {args.n} frames to {args.out} ({mean:.2f} truth peaks/frame)")
    return 0


def cmd_preprocess(args) -> int:
    geom = fileio.load_geometry(args.geometry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = tuple(args.shape)
    clip = None if args.clahe_clip <= 0 else args.clahe_clip
    sources = sorted(Path(p) for p in args.inputs)

    def one(src: Path):
        img = fileio.read_image(src)
        raw, enhanced = preprocess_frame(
            img,
            geom,
            shape=shape,
            lp=not args.no_lp,
            tiles=tuple(args.clahe_tiles),
            clip_limit=clip,
            nbins=args.clahe_bins,
        )
        fileio.write_polar_frame(out / (src.stem + ".tif"), enhanced)
        fileio.write_polar_frame(out / (src.stem + RAW_SUFFIX), raw)
        return raw

    t0 = time.perf_counter()
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(one, sources))
    else:
        results = [one(src) for src in sources]
    fileio.save_axes(out / "axes.txt", fileio.axes_of(results[0]))
    dt = time.perf_counter() - t0
    print(f"preprocessed {len(sources)} frames to {out} ({len(sources) / dt:.1f} frames/s)")
    return 0


def cmd_detect(args) -> int:
    units, frames = _load_frames(Path(args.input))
    frame_ids = sorted(frames)

    def one(fid: int):
        return detect_and_clean(
            frames[fid],
            frame=fid,
            nms_iou=args.nms_iou,
            min_score=args.min_score,
            band_rows=args.band_rows,
            bg_window=args.bg_window,
            k_sigma=args.k_sigma,
            rel_floor=args.rel_floor,
        )

    t0 = time.perf_counter()
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            per_frame = list(pool.map(one, frame_ids))
    else:
        per_frame = [one(fid) for fid in frame_ids]
    dt = time.perf_counter() - t0

    all_dets = [d for dets in per_frame for d in dets]
    frame_axes = {fid: fileio.axes_of(frames[fid]) for fid in frame_ids}
    fileio.write_detections(args.out, all_dets, units=units, frame_axes=frame_axes)
    print(
        f"{len(all_dets)} detections in {len(frames)} frames -> {args.out}"
        f" ({len(frames) / dt:.1f} frames/s)"
    )
    return 0


def cmd_ingest(args) -> int:
    units, frames, dets = fileio.read_detections(args.input)
    print(f"{args.input}: valid ({units} units, {len(frames)} frames, {len(dets)} detections)")
    return 0


def cmd_track(args) -> int:
    units, frame_axes, dets = fileio.read_detections(args.input)
    by_frame = _dets_by_frame(dets)
    cleaned = []
    for fid in sorted(by_frame):
        frame_dets = by_frame[fid]
        if not args.skip_nms:
            frame_dets = nms(frame_dets, iou_threshold=args.nms_iou)
        cleaned.extend(filter_score(frame_dets, min_score=args.min_score))
    tracks = track_series(cleaned, link_iou=args.link_iou, min_frames=args.min_frames)
    fileio.write_tracks(args.out, tracks, units=units)
    n_linked = sum(t.duration for t in tracks)
    print(f"{len(tracks)} tracks ({n_linked} detections) -> {args.out}")
    return 0


def cmd_fitpeaks(args) -> int:
    units, tracks = fileio.read_tracks(args.tracks)
    frame_units, frames = _load_frames(Path(args.frames), prefer_raw=True)
    if units != frame_units:
        raise ConfigError(f"track units {units!r} != frame units {frame_units!r}")
    n_ok = 0
    for t in tracks:
        t.detections = fit_detections(frames, t.detections)
        n_ok += sum(1 for d in t.detections if d.fit is not None and d.fit.ok)
    fileio.write_tracks(args.out, tracks, units=units)
    total = sum(t.duration for t in tracks)
    print(f"fitted {n_ok}/{total} detections -> {args.out}")
    return 0


def _load_cards(paths):
    """Phase cards from files; a directory contributes its card files sorted."""
    cards = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(
                child for child in p.iterdir() if child.suffix.lower() in (".card", ".txt")
            )
            if not found:
                raise ConfigError(f"{p}: no phase-card files (*.card, *.txt)")
            cards.extend(fileio.load_phase_card(child) for child in found)
        else:
            cards.append(fileio.load_phase_card(p))
    return cards


def _pooled_detections(path):
    name = str(path)
    if name.endswith("tracks.txt") or name.endswith(".tracks"):
        units, tracks = fileio.read_tracks(path)
        return units, [d for t in tracks for d in t.detections]
    try:
        units, _, dets = fileio.read_detections(path)
        return units, dets
    except DataError:
        units, tracks = fileio.read_tracks(path)
        return units, [d for t in tracks for d in t.detections]


def cmd_identify(args) -> int:
    from .crystal import cluster_angular, identify, prolong_to_wedge

    units, dets = _pooled_detections(args.detections)
    if units != "invA":
        raise ConfigError("phase identification needs physical units (invA)")
    if not dets:
        raise DataError(f"{args.detections}: no detections")
    cards = _load_cards(args.cards)
    if args.q_range is not None:
        q_range = tuple(args.q_range)
    else:
        q_range = (0.0, max(d.q_center + d.q_width for d in dets))
    labels = None
    if args.wedge is not None:
        q_par_max, q_z_max = args.wedge
        dets = prolong_to_wedge(dets, q_par_max, q_z_max, row_deg=args.row_deg)
        labels = cluster_angular(dets, q_par_max, q_z_max)
    matches = identify(cards, dets, q_range=q_range, arc_labels=labels)
    for m in matches:
        print(f"{m.score:8.4f}  {m.card.name}  ({len(m.covered)} covered, {len(m.missed)} missed)")
    return 0


def cmd_index(args) -> int:
    from .crystal import index_detections

    units, dets = _pooled_detections(args.detections)
    if units != "invA":
        raise ConfigError("indexing needs physical units (invA)")
    cards = _load_cards(args.cards)
    assignments = index_detections(cards, dets)
    lines = []
    for a in assignments:
        d = dets[a.detection]
        lines.append(
            f"{a.detection} {a.card} {a.hkl[0]} {a.hkl[1]} {a.hkl[2]} "
            f"{fileio.fmt(a.q)} {fileio.fmt(d.q_refined)} {fileio.fmt(a.distance)}"
        )
    text = "# detection card h k l q_predicted q_observed residual\n" + "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"{len(assignments)} assignments -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_refine(args) -> int:
    units, tracks = fileio.read_tracks(args.tracks)
    if units != "invA":
        raise ConfigError("refinement needs physical units (invA)")
    card = fileio.load_phase_card(args.card)
    competing = _load_cards(args.competing or [])
    by_frame = _dets_by_frame([d for t in tracks for d in t.detections])
    results = refine_series(by_frame, card, competing=competing, sigma=args.sigma)
    if not results:
        raise DataError("no frame had enough indexed peaks to refine")
    lines = ["# frame a err_a b err_b c err_c chi2 n_obs ok"]
    for frame in sorted(results):
        r = results[frame]
        a, b, c = r.params
        ea, eb, ec = r.errors
        lines.append(
            f"{frame} {fileio.fmt(a)} {fileio.fmt(ea)} {fileio.fmt(b)} {fileio.fmt(eb)} "
            f"{fileio.fmt(c)} {fileio.fmt(ec)} "
            f"{fileio.fmt(r.chi2)} {r.n_obs} {int(r.ok)}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    med = np.median([results[f].params for f in results], axis=0)
    print(f"refined {len(results)} frames; median a={med[0]:.4f} b={med[1]:.4f} c={med[2]:.4f}")
    return 0


def cmd_benchmark(args) -> int:
    _, _, dets = fileio.read_detections(args.detections)
    truth_dir = Path(args.truth)
    truth = {}
    if truth_dir.is_dir():
        candidates = [p for p in sorted(truth_dir.glob("*.txt"))
                      if p.name not in ("axes.txt", "manifest.txt")]
        for i, path in enumerate(candidates):
            truth[_frame_id(path, i)] = fileio.read_annotations(path)
    else:
        truth[0] = fileio.read_annotations(truth_dir)
    result = benchmark_series(_dets_by_frame(dets), truth)
    print(f"frames               {result.n_frames}")
    print(f"truth boxes          {result.n_truth}")
    print(f"detections           {result.n_detections}")
    print(f"recall               {result.recall:.4f}")
    print(f"false discovery      {result.false_discovery_rate:.4f}")
    print(f"false per frame      {result.false_per_frame:.4f}")
    print(f"duplicates           {result.duplicate_rate:.4f}")
    print(f"center error p50     {result.error_percentile(50):.4f}")
    print(f"center error p95     {result.error_percentile(95):.4f}")
    if args.out:
        lines = ["# frame missed false"]
        for fid in sorted(result.missed_by_frame):
            lines.append(f"{fid} {result.missed_by_frame[fid]} {result.false_by_frame.get(fid, 0)}")
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"per-frame histogram data -> {args.out}")
    return 0


def cmd_report(args) -> int:
    units, tracks = fileio.read_tracks(args.tracks)
    lines = [f"tracked peaks ({units} units)", ""]
    lines.append("track  frames        n   q_mean      q_spread    score")
    for t in tracks:
        qs = np.array([d.q_refined for d in t.detections])
        scores = np.array([d.score for d in t.detections])
        lines.append(
            f"{t.track_id:5d}  {min(t.frames):4d}..{max(t.frames):4d}  {t.duration:3d}"
            f"   {qs.mean():9.5g}  {qs.std():9.3g}  {scores.mean():.3f}"
        )
    lines.append("")
    lines.append("radial position vs time (one row per observation)")
    lines.append("# track frame q")
    for t in tracks:
        for d in t.detections:
            lines.append(f"{t.track_id} {d.frame} {fileio.fmt(d.q_refined)}")
    if args.refinement:
        lines.append("")
        lines.append("refined lattice constants per frame")
        lines.extend(Path(args.refinement).read_text(encoding="utf-8").rstrip("\n").splitlines())
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gixtrack", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic polar frames with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10, help="number of frames (0: manifest only)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", default=None, help="generator configuration file")
    s.add_argument("--clean", action="store_true",
                   help="disable all nuisance stages (noise-free, artifact-free)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="detector frames to polar images (plain + enhanced)")
    s.add_argument("--geometry", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--shape", type=int, nargs=2, default=[512, 1024], metavar=("PHI", "Q"))
    s.add_argument("--clahe-tiles", type=int, nargs=2, default=[8, 8], metavar=("R", "C"))
    s.add_argument("--clahe-clip", type=float, default=4.0,
                   help="CLAHE clip limit; <=0 disables clipping")
    s.add_argument("--clahe-bins", type=int, default=256)
    s.add_argument("--no-lp", action="store_true", help="skip the Lorentz-polarization correction")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("detect", help="classical peak detection on polar frames")
    s.add_argument("--in", dest="input", required=True, help="directory of polar frames")
    s.add_argument("--out", required=True)
    s.add_argument("--nms-iou", type=float, default=0.1)
    s.add_argument("--min-score", type=float, default=0.5)
    s.add_argument("--band-rows", type=int, default=16)
    s.add_argument("--bg-window", type=int, default=31)
    s.add_argument("--k-sigma", type=float, default=4.0)
    s.add_argument("--rel-floor", type=float, default=0.005)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("ingest", help="validate a detection exchange file")
    s.add_argument("--in", dest="input", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("track", help="clean detections and link them across frames")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nms-iou", type=float, default=0.1)
    s.add_argument("--skip-nms", action="store_true")
    s.add_argument("--min-score", type=float, default=0.8)
    s.add_argument("--link-iou", type=float, default=0.3)
    s.add_argument("--min-frames", type=int, default=3)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("fitpeaks", help="fit radial profiles on unenhanced polar frames")
    s.add_argument("--tracks", required=True)
    s.add_argument("--frames", required=True, help="directory of polar frames")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fitpeaks)

    s = sub.add_parser("identify", help="rank candidate phases by pattern coverage")
    s.add_argument("--detections", required=True, help="detection or track file")
    s.add_argument("--cards", nargs="+", required=True, help="card files and/or directories")
    s.add_argument("--q-range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    s.add_argument("--wedge", type=float, nargs=2, default=None, metavar=("QPAR", "QZ"),
                   help="accessible in-plane / out-of-plane maxima; enables arc/spot"
                        " separation and wedge prolongation")
    s.add_argument("--row-deg", type=float, default=90.0 / 512,
                   help="angular grid step used by wedge prolongation")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("index", help="assign Miller indices to detections")
    s.add_argument("--detections", required=True)
    s.add_argument("--cards", nargs="+", required=True, help="card files and/or directories")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("refine", help="refine lattice constants per frame")
    s.add_argument("--tracks", required=True)
    s.add_argument("--card", required=True)
    s.add_argument("--competing", nargs="*", default=[], help="card files and/or directories")
    s.add_argument("--sigma", type=float, default=0.01)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("benchmark", help="score a detection file against ground truth")
    s.add_argument("--detections", required=True)
    s.add_argument("--truth", required=True, help="annotation file or directory")
    s.add_argument("--out", default=None, help="write per-frame missed/false table")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("report", help="track summary plus radial-position-vs-time plot data")
    s.add_argument("--tracks", required=True)
    s.add_argument("--refinement", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Grazing-incidence diffraction analysis: from detector frames to tracked,
indexed reflections and refined lattice constants.

The package is organized by pipeline stage:

* :mod:`gixtrack.geometry` - detector kinematics, intensity corrections,
  reciprocal-space and polar regridding.
* :mod:`gixtrack.enhance` - mask-aware CLAHE and histogram equalization.
* :mod:`gixtrack.simulate` - reproducible synthetic polar frames with
  ground-truth boxes.
* :mod:`gixtrack.detect` - classical band-profile peak detection.
* :mod:`gixtrack.postprocess` - NMS, score filtering, frame linking,
  profile fitting.
* :mod:`gixtrack.crystal` - phase cards, pattern prediction, coverage
  scoring, Miller indexing.
* :mod:`gixtrack.refine` - lattice-constant refinement with uncertainties.
* :mod:`gixtrack.pipeline` - stage composition and detector benchmarking.
* :mod:`gixtrack.fileio` - image containers, configuration files, the
  detection exchange format, track files.
* :mod:`gixtrack.cli` - the ``gixtrack`` command.
"""

from .detect import Detection, PeakFit, detect_peaks
from .enhance import clahe, equalize_global, normalize_unit
from .errors import ConfigError, DataError
from .geometry import (
    ExperimentGeometry,
    PolarImage,
    ReciprocalImage,
    correct_lp,
    max_arc_extent,
    pixel_to_q,
    polar_map,
    to_polar,
    to_reciprocal,
    wedge_bounds,
)
from .crystal import (
    Assignment,
    PhaseCard,
    PhaseMatch,
    Reflection,
    UnitCell,
    cluster_angular,
    identify,
    index_detections,
    match_score,
    phi_of_hkl,
    prolong_to_wedge,
    q_of_hkl,
    reflection_list,
)
from .pipeline import (
    BenchmarkResult,
    benchmark_frame,
    benchmark_series,
    detect_and_clean,
    pixel_polar,
    preprocess_frame,
    track_series,
)
from .postprocess import (
    Track,
    filter_duration,
    filter_score,
    fit_detections,
    fit_radial_profile,
    iou,
    link_frames,
    nms,
)
from .refine import RefineResult, refine_lattice, refine_series
from .simulate import (
    SimulatedPattern,
    SimulationConfig,
    export_dataset,
    mean_truth_count,
    perlin,
    series_seed,
    simulate_pattern,
    simulate_series,
)

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "BenchmarkResult",
    "ConfigError",
    "DataError",
    "Detection",
    "ExperimentGeometry",
    "PeakFit",
    "PhaseCard",
    "PhaseMatch",
    "PolarImage",
    "ReciprocalImage",
    "Reflection",
    "RefineResult",
    "SimulatedPattern",
    "SimulationConfig",
    "Track",
    "UnitCell",
    "benchmark_frame",
    "benchmark_series",
    "clahe",
    "cluster_angular",
    "correct_lp",
    "detect_and_clean",
    "detect_peaks",
    "equalize_global",
    "export_dataset",
    "filter_duration",
    "filter_score",
    "fit_detections",
    "fit_radial_profile",
    "identify",
    "index_detections",
    "iou",
    "link_frames",
    "match_score",
    "max_arc_extent",
    "mean_truth_count",
    "nms",
    "normalize_unit",
    "perlin",
    "phi_of_hkl",
    "pixel_polar",
    "pixel_to_q",
    "polar_map",
    "preprocess_frame",
    "prolong_to_wedge",
    "q_of_hkl",
    "refine_lattice",
    "refine_series",
    "reflection_list",
    "series_seed",
    "simulate_pattern",
    "simulate_series",
    "to_polar",
    "to_reciprocal",
    "track_series",
    "wedge_bounds",
]

"""Fractal-dimension location statistics and post-hoc detector calibration."""

from .annotations import (
    AnnotationError,
    ClassFrequency,
    Dataset,
    ObjectInstance,
    SpatialHistogram,
    compute_class_frequencies,
    load_annotations,
    spatial_histogram,
    write_annotations,
)
from .calibration import (
    CalibrationWeights,
    LogitRecord,
    ScoredRecord,
    apply_method,
    baseline_calibrate,
    class_calibrate,
    fracal,
    fracal_binary,
    fracal_opposite,
    grid_calibrate,
    space_calibrate,
)
from .evalharness import (
    Detection,
    EvalReport,
    average_precision,
    evaluate,
    iou,
    nms,
    run_pipeline,
)
from .fractal import (
    BoxCountSeries,
    FractalEstimate,
    InsufficientDataError,
    build_box_count_series,
    estimate_all,
    fit_dimension,
    pearson_correlation,
)
from .synthetic import (
    PointProcessSpec,
    ScenarioSpec,
    SimulatedBatch,
    generate_points,
    simulate_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "BoxCountSeries",
    "CalibrationWeights",
    "ClassFrequency",
    "Dataset",
    "Detection",
    "EvalReport",
    "FractalEstimate",
    "InsufficientDataError",
    "LogitRecord",
    "ObjectInstance",
    "PointProcessSpec",
    "ScenarioSpec",
    "ScoredRecord",
    "SimulatedBatch",
    "SpatialHistogram",
    "apply_method",
    "average_precision",
    "baseline_calibrate",
    "build_box_count_series",
    "class_calibrate",
    "compute_class_frequencies",
    "estimate_all",
    "evaluate",
    "fit_dimension",
    "fracal",
    "fracal_binary",
    "fracal_opposite",
    "generate_points",
    "grid_calibrate",
    "iou",
    "load_annotations",
    "nms",
    "pearson_correlation",
    "run_pipeline",
    "simulate_scenario",
    "space_calibrate",
    "spatial_histogram",
    "write_annotations",
]

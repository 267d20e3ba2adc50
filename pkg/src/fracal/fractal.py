"""Per-class fractal dimension of object locations via box counting.

The dimension of a point set is estimated by counting occupied cells nu(G)
on grids of increasing resolution G and fitting a line to (ln G, ln nu).
The number of grids used for a class with n instances is capped by the
quadratic rule t = floor(sqrt(n)), and classes too small to fit (n < 4)
receive the neutral fallback dimension 1.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .annotations import Dataset, cell_indices, collect_centers

logger = logging.getLogger(__name__)

VARIANTS = ("box", "info", "smooth_info")

# below this instance count the dimension cannot be fitted (t < 2)
FALLBACK_MIN_COUNT = 4
FALLBACK_PHI = 1.0

PHI_MIN, PHI_MAX = 0.0, 2.0


class InsufficientDataError(ValueError):
    """Fewer box-count pairs than a line fit needs."""


@dataclass(frozen=True)
class BoxCountSeries:
    class_id: int
    pairs: tuple[tuple[int, int], ...]  # (G, nu), G ascending from 1


@dataclass(frozen=True)
class FractalEstimate:
    class_id: int
    phi: float
    variant: str
    t: int
    pair_count: int
    fallback: bool


def occupied_cell_count(points: np.ndarray, grid_size: int) -> int:
    """Number of distinct G x G cells containing at least one point."""
    idx = cell_indices(points, grid_size)
    flat = idx[:, 1] * grid_size + idx[:, 0]
    return int(np.unique(flat).size)


def build_box_count_series(points: np.ndarray, t: int, class_id: int = -1) -> BoxCountSeries:
    """Occupied-cell counts nu(G) for every grid G in 1..t.

    Grids are not nested, so nu need not be monotone in G.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        raise ValueError("cannot build a box-count series from an empty point set")
    if t < 1:
        raise ValueError(f"threshold t must be >= 1, got {t}")
    pairs = tuple((g, occupied_cell_count(points, g)) for g in range(1, t + 1))
    return BoxCountSeries(class_id=class_id, pairs=pairs)


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    # least squares with a free intercept; only the slope is used
    xm = x - x.mean()
    return float(np.dot(xm, y - y.mean()) / np.dot(xm, xm))


def fit_dimension(series: BoxCountSeries, variant: str = "box", shift: bool = True) -> FractalEstimate:
    """Fit the dimension as the log-log slope of a box-count series.

    Variants differ in the y-coordinate:
      box:         ln nu
      info:        ln(nu / G^2); the raw slope sits 2 below the box slope
      smooth_info: 1 + ln((G^2 + nu) / G^2), a smoothed occupancy that
                   tolerates the many empty cells of sparse classes
    For info and smooth_info the raw slope is shifted by +2 (unless
    ``shift`` is off) so all variants land in the same [0, 2] range.
    The returned slope is clamped to [0, 2].
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if len(series.pairs) < 2:
        raise InsufficientDataError(
            f"need >= 2 box-count pairs to fit, got {len(series.pairs)}"
        )
    g = np.array([p[0] for p in series.pairs], dtype=np.float64)
    nu = np.array([p[1] for p in series.pairs], dtype=np.float64)
    x = np.log(g)
    if variant == "box":
        y = np.log(nu)
    elif variant == "info":
        y = np.log(nu / g**2)
    else:
        y = 1.0 + np.log((g**2 + nu) / g**2)
    slope = _ols_slope(x, y)
    if variant != "box" and shift:
        slope += 2.0
    phi = min(max(slope, PHI_MIN), PHI_MAX)
    return FractalEstimate(
        class_id=series.class_id,
        phi=phi,
        variant=variant,
        t=int(g[-1]),
        pair_count=len(series.pairs),
        fallback=False,
    )


def _fallback_estimate(class_id: int, variant: str) -> FractalEstimate:
    return FractalEstimate(
        class_id=class_id,
        phi=FALLBACK_PHI,
        variant=variant,
        t=1,
        pair_count=0,
        fallback=True,
    )


def estimate_class(
    points: np.ndarray,
    class_id: int,
    variant: str = "box",
    t_cap: int | None = None,
    shift: bool = True,
) -> FractalEstimate:
    """Quadratic-rule estimate for one class: t = floor(sqrt(n)), fallback below n = 4."""
    n = len(points)
    if n < FALLBACK_MIN_COUNT:
        return _fallback_estimate(class_id, variant)
    t = math.isqrt(n)
    if t_cap is not None:
        if t_cap < 2:
            raise ValueError(f"t_cap must be >= 2, got {t_cap}")
        t = min(t, t_cap)
    series = build_box_count_series(points, t, class_id=class_id)
    return fit_dimension(series, variant=variant, shift=shift)


def _estimate_one(args) -> FractalEstimate:
    points, class_id, variant, t_cap, shift = args
    return estimate_class(points, class_id, variant=variant, t_cap=t_cap, shift=shift)


def estimate_all(
    ds: Dataset,
    variant: str = "box",
    t_cap: int | None = None,
    shift: bool = True,
    workers: int = 1,
) -> dict[int, FractalEstimate]:
    """Fractal dimension per category of the dataset.

    Classes are independent, so with ``workers`` > 1 they are estimated in
    a process pool. Zero-instance categories get the fallback dimension.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    by_class: dict[int, list[tuple[float, float]]] = {c: [] for c in ds.categories}
    for inst in ds.instances:
        by_class.setdefault(inst.class_id, []).append(inst.center)

    jobs = [
        (np.asarray(pts, dtype=np.float64).reshape(-1, 2), class_id, variant, t_cap, shift)
        for class_id, pts in sorted(by_class.items())
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_estimate_one, jobs, chunksize=8))
    else:
        results = [_estimate_one(job) for job in jobs]
    return {est.class_id: est for est in results}


def pearson_correlation(xs, ys) -> float:
    """Sample Pearson correlation coefficient of two equal-length sequences."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d sequences of equal length")
    if x.size < 2:
        raise ValueError("correlation needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = np.dot(xc, xc)
    vy = np.dot(yc, yc)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("correlation undefined: an input has zero variance")
    r = float(np.dot(xc, yc) / math.sqrt(vx * vy))
    return min(max(r, -1.0), 1.0)


def save_series_csv(series_list, path) -> None:
    """(G, nu) pairs per class as CSV rows, for plotting the fit curves."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "grid_size", "occupied_cells"])
        for series in series_list:
            for g, nu in series.pairs:
                writer.writerow([series.class_id, g, nu])

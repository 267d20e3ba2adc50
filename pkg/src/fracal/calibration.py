"""Post-hoc adjustments of detection logits from frozen train-set statistics.

All operations read a single immutable CalibrationWeights table holding the
per-class instance counts n_y and fractal dimensions phi(y), plus the two
hyperparameters: the logarithm base beta of the class adjustment and the
exponent lambda of the space weighting.

Softmax-mode logit vectors carry C foreground entries followed by one
background entry (background is always LAST); sigmoid-mode vectors carry the
C foreground entries only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import Dataset, cell_indices, compute_class_frequencies
from .fractal import estimate_all, PHI_MAX, PHI_MIN

logger = logging.getLogger(__name__)

BACKGROUND_CONVENTION = "last"

# floor guarding division by a degenerate phi = 0 (fitted single-cell classes)
PHI_FLOOR = 1e-3
# floor inside the log of the grid prior for empty cells
GRID_PRIOR_EPS = 1e-12

SOFTMAX, SIGMOID = "softmax", "sigmoid"

METHODS = (
    "none",
    "class-only",
    "grid",
    "fracal",
    "fracal-binary",
    "opposite",
    "la",
    "iif",
    "pcsa",
    "norcal",
)


@dataclass(frozen=True, slots=True)
class LogitRecord:
    """Raw classification scores of one candidate detection."""

    image_id: int
    box: tuple[float, float, float, float]  # normalized (cx, cy, w, h)
    logits: np.ndarray


@dataclass(frozen=True, slots=True)
class ScoredRecord:
    image_id: int
    box: tuple[float, float, float, float]
    scores: np.ndarray


class CalibrationWeights:
    """Frozen per-class table (n_y, phi) plus hyperparameters.

    ``class_ids`` fixes the index order of logit vectors. ``grid_counts``
    optionally maps a grid size G to a (C, G, G) array of per-class per-cell
    occurrence counts for the grid-dependent adjustment.
    """

    def __init__(
        self,
        class_ids,
        counts,
        phi,
        beta: float = 10.0,
        lam: float = 2.0,
        mode: str = SOFTMAX,
        grid_counts: dict[int, np.ndarray] | None = None,
        class_meta: dict[int, dict] | None = None,
    ):
        if beta <= 1.0:
            raise ValueError(f"log base beta must be > 1, got {beta}")
        if lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {lam}")
        self.class_ids = tuple(int(c) for c in class_ids)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.phi = np.asarray(phi, dtype=np.float64)
        if not (len(self.class_ids) == self.counts.size == self.phi.size):
            raise ValueError("class_ids, counts and phi must have equal length")
        if np.any(self.counts < 0):
            raise ValueError("instance counts must be non-negative")
        if np.any(self.phi < PHI_MIN) or np.any(self.phi > PHI_MAX):
            raise ValueError("phi values must lie in [0, 2]")
        self.beta = float(beta)
        self.lam = float(lam)
        self.mode = mode
        self.grid_counts = dict(grid_counts or {})
        self.class_meta = class_meta or {}

        total = int(self.counts.sum())
        if total <= 0:
            raise ValueError("weights need at least one training instance overall")
        self._total = total
        n_zero = int(np.sum(self.counts == 0))
        if n_zero:
            logger.info("unit-count surrogate used for %d zero-instance classes", n_zero)
        # log prior with the n := 1 surrogate for empty classes
        self._log_prior = np.log(np.maximum(self.counts, 1) / total)
        phi_floored = np.maximum(self.phi, PHI_FLOOR)
        if np.any(self.phi < PHI_FLOOR):
            logger.info(
                "phi floor %g applied to %d classes", PHI_FLOOR, int(np.sum(self.phi < PHI_FLOOR))
            )
        self._phi_floored = phi_floored

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def p_s(self) -> np.ndarray:
        return self.counts / self._total

    def space_weights(self) -> np.ndarray:
        """phi^lambda with the dimensions rescaled so the largest sits at 2.

        Anchoring to the most space-filling class makes the renormalized
        calibrations invariant to a uniform rescaling of all dimension
        estimates; only relative non-uniformity matters.
        """
        scaled = self._phi_floored * (PHI_MAX / self._phi_floored.max())
        return scaled**self.lam

    def with_hyperparams(self, beta: float | None = None, lam: float | None = None) -> "CalibrationWeights":
        """A copy with beta and/or lambda replaced."""
        return CalibrationWeights(
            self.class_ids,
            self.counts,
            self.phi,
            beta=self.beta if beta is None else beta,
            lam=self.lam if lam is None else lam,
            mode=self.mode,
            grid_counts=self.grid_counts,
            class_meta=self.class_meta,
        )

    @classmethod
    def from_dataset(
        cls,
        ds: Dataset,
        variant: str = "box",
        beta: float = 10.0,
        lam: float = 2.0,
        t_cap: int | None = None,
        grid_sizes=(),
        workers: int = 1,
        mode: str = SOFTMAX,
    ) -> "CalibrationWeights":
        """Compute frequencies, fractal dimensions and optional grid priors from a Dataset."""
        from .annotations import spatial_histogram

        freqs = compute_class_frequencies(ds)
        estimates = estimate_all(ds, variant=variant, t_cap=t_cap, workers=workers)
        class_ids = sorted(freqs)
        counts = [freqs[c].instance_count for c in class_ids]
        phi = [estimates[c].phi for c in class_ids]
        meta = {
            c: {
                "name": ds.categories.get(c, ""),
                "image_count": freqs[c].image_count,
                "group": freqs[c].group,
                "variant": estimates[c].variant,
                "fallback": estimates[c].fallback,
            }
            for c in class_ids
        }
        grid_counts = {}
        for g in grid_sizes:
            grid_counts[int(g)] = np.stack(
                [spatial_histogram(ds, class_filter=c, grid_size=int(g)).counts for c in class_ids]
            )
        return cls(
            class_ids,
            counts,
            phi,
            beta=beta,
            lam=lam,
            mode=mode,
            grid_counts=grid_counts,
            class_meta=meta,
        )

    def save(self, path: str | Path) -> None:
        classes = {}
        for k, class_id in enumerate(self.class_ids):
            meta = self.class_meta.get(class_id, {})
            classes[str(class_id)] = {
                "name": meta.get("name", ""),
                "n": int(self.counts[k]),
                "image_count": int(meta.get("image_count", 0)),
                "group": meta.get("group", ""),
                "phi": float(self.phi[k]),
                "variant": meta.get("variant", "box"),
                "fallback": bool(meta.get("fallback", False)),
            }
        doc = {
            "header": {
                "beta": self.beta,
                "lambda": self.lam,
                "mode": self.mode,
                "background_convention": BACKGROUND_CONVENTION,
            },
            "classes": classes,
        }
        if self.grid_counts:
            doc["grids"] = {
                str(g): {str(c): arr[k].tolist() for k, c in enumerate(self.class_ids)}
                for g, arr in sorted(self.grid_counts.items())
            }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationWeights":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict) or "classes" not in doc:
            raise ValueError(f"{path}: not a weights file (missing 'classes')")
        header = doc.get("header", {})
        classes = doc["classes"]
        class_ids = sorted(int(c) for c in classes)
        counts = [classes[str(c)]["n"] for c in class_ids]
        phi = [classes[str(c)]["phi"] for c in class_ids]
        meta = {
            c: {
                "name": classes[str(c)].get("name", ""),
                "image_count": classes[str(c)].get("image_count", 0),
                "group": classes[str(c)].get("group", ""),
                "variant": classes[str(c)].get("variant", "box"),
                "fallback": classes[str(c)].get("fallback", False),
            }
            for c in class_ids
        }
        grid_counts = {}
        for g_str, by_class in doc.get("grids", {}).items():
            g = int(g_str)
            grid_counts[g] = np.stack(
                [np.asarray(by_class[str(c)], dtype=np.int64) for c in class_ids]
            )
        return cls(
            class_ids,
            counts,
            phi,
            beta=header.get("beta", 10.0),
            lam=header.get("lambda", 2.0),
            mode=header.get("mode", SOFTMAX),
            grid_counts=grid_counts,
            class_meta=meta,
        )


def mode_of(logits, num_classes: int) -> str:
    n = len(logits)
    if n == num_classes + 1:
        return SOFTMAX
    if n == num_classes:
        return SIGMOID
    raise ValueError(
        f"logit vector of length {n} matches neither sigmoid ({num_classes}) "
        f"nor softmax ({num_classes + 1}) mode"
    )


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_beta(x: np.ndarray | float, beta: float):
    return np.log(x) / np.log(beta)


def class_calibrate(record: LogitRecord, weights: CalibrationWeights) -> np.ndarray:
    """Shift each foreground logit by -log_beta(n_y / sum n) + log_beta(1 / C).

    Rarer classes receive the larger boost; the background logit, when
    present, is untouched.
    """
    z = np.asarray(record.logits, dtype=np.float64)
    mode = mode_of(z, weights.num_classes)
    c = weights.num_classes
    ln_beta = np.log(weights.beta)
    adjusted = z.copy()
    adjusted[:c] += (-weights._log_prior + np.log(1.0 / c)) / ln_beta
    return adjusted if mode == SOFTMAX else adjusted[:c]


def grid_calibrate(record: LogitRecord, weights: CalibrationWeights, grid_size: int) -> np.ndarray:
    """Class adjustment resolved per grid cell, using the joint prior p(y, cell).

    The target prior is uniform over classes and cells, 1 / (C * G^2). Cells
    never seen in training fall back to a tiny floor inside the log, which
    boosts whatever lands there; that sparsity cost is inherent to large G.
    """
    if grid_size not in weights.grid_counts:
        raise ValueError(
            f"weights carry no grid priors at G={grid_size}; "
            f"available: {sorted(weights.grid_counts) or 'none'}"
        )
    z = np.asarray(record.logits, dtype=np.float64)
    mode = mode_of(z, weights.num_classes)
    c = weights.num_classes
    counts = weights.grid_counts[grid_size]
    total = counts.sum()
    if total <= 0:
        raise ValueError("grid priors are empty")
    cx, cy = record.box[0], record.box[1]
    ij = cell_indices(np.array([[cx, cy]]), grid_size)[0]
    cell_n = counts[:, ij[1], ij[0]].astype(np.float64)
    p_cell = np.where(cell_n > 0, cell_n / total, GRID_PRIOR_EPS)
    ln_beta = np.log(weights.beta)
    adjusted = z.copy()
    adjusted[:c] += (-np.log(p_cell) + np.log(1.0 / (c * grid_size**2))) / ln_beta
    return adjusted if mode == SOFTMAX else adjusted[:c]


def space_calibrate(probs: np.ndarray, weights: CalibrationWeights) -> np.ndarray:
    """Divide each foreground probability by phi(y)^lambda; background untouched.

    Uniformly spread classes (phi near 2) are damped, concentrated ones kept.
    """
    p = np.asarray(probs, dtype=np.float64)
    c = weights.num_classes
    if len(p) != c + 1:
        raise ValueError(f"expected {c + 1} probabilities (background last), got {len(p)}")
    out = p.copy()
    if weights.lam != 0.0:
        out[:c] = p[:c] / weights._phi_floored**weights.lam
    return out


def _space_reweight(p: np.ndarray, weights: CalibrationWeights, invert: bool) -> np.ndarray:
    c = weights.num_classes
    w = weights.space_weights()
    out = p.copy()
    if weights.lam != 0.0:
        out[:c] = p[:c] * w if invert else p[:c] / w
    return out / out.sum()


def fracal(record: LogitRecord, weights: CalibrationWeights) -> np.ndarray:
    """Class calibration, softmax, space down-weighting, then renormalization.

    Returns a probability vector over the C foreground classes plus
    background (last).
    """
    z = class_calibrate(record, weights)
    if mode_of(record.logits, weights.num_classes) != SOFTMAX:
        raise ValueError("fracal requires softmax mode (background logit last)")
    return _space_reweight(softmax(z), weights, invert=False)


def fracal_opposite(record: LogitRecord, weights: CalibrationWeights) -> np.ndarray:
    """Inverted space weighting: multiplies by phi^lambda instead of dividing."""
    z = class_calibrate(record, weights)
    if mode_of(record.logits, weights.num_classes) != SOFTMAX:
        raise ValueError("fracal-opposite requires softmax mode")
    return _space_reweight(softmax(z), weights, invert=True)


def fracal_binary(record: LogitRecord, weights: CalibrationWeights) -> np.ndarray:
    """Sigmoid-mode variant: all adjustments in logit space, gated by the raw score.

    Per class i the output is
        sigmoid(C(z_i) - log_beta(phi_i^lam / sum_j phi_j^lam) + log_beta(1/C)) * sigmoid(z_i)
    where the trailing factor filters low-scoring (background) proposals.
    """
    z = np.asarray(record.logits, dtype=np.float64)
    if mode_of(z, weights.num_classes) != SIGMOID:
        raise ValueError("fracal-binary requires sigmoid mode (no background logit)")
    c = weights.num_classes
    adjusted = class_calibrate(record, weights)
    phi_w = weights._phi_floored**weights.lam
    phi_ratio = phi_w / phi_w.sum()
    ln_beta = np.log(weights.beta)
    adjusted += (-np.log(phi_ratio) + np.log(1.0 / c)) / ln_beta
    return sigmoid(adjusted) * sigmoid(z)


def baseline_calibrate(
    record: LogitRecord,
    weights: CalibrationWeights,
    kind: str,
    tau: float = 1.0,
    gamma: float = 1.0,
) -> np.ndarray:
    """Frequency-only adjustments from prior work, softmax mode.

    la:     z' = z - tau * ln p_s(y)
    iif:    z' = -z * ln p_s(y)
    pcsa:   z' = z - ln p_s(y) + ln(1/C)
    norcal: p' = (p_y / n_y^gamma) / (p_bg + sum_j p_j / n_j^gamma)
    The logit-space kinds leave the background logit untouched and return
    the softmax of the adjusted vector; norcal reweights softmax outputs
    directly, renormalizing the background by the same denominator.
    """
    z = np.asarray(record.logits, dtype=np.float64)
    if mode_of(z, weights.num_classes) != SOFTMAX:
        raise ValueError(f"baseline {kind!r} requires softmax mode")
    c = weights.num_classes
    log_prior = weights._log_prior
    if kind == "la":
        if tau < 0:
            raise ValueError(f"tau must be >= 0, got {tau}")
        adjusted = z.copy()
        adjusted[:c] -= tau * log_prior
        return softmax(adjusted)
    if kind == "iif":
        adjusted = z.copy()
        adjusted[:c] = -z[:c] * log_prior
        return softmax(adjusted)
    if kind == "pcsa":
        adjusted = z.copy()
        adjusted[:c] += -log_prior + np.log(1.0 / c)
        return softmax(adjusted)
    if kind == "norcal":
        if gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        p = softmax(z)
        weighted = p[:c] / np.maximum(weights.counts, 1) ** gamma
        denom = p[c] + weighted.sum()
        out = np.empty_like(p)
        out[:c] = weighted / denom
        out[c] = p[c] / denom
        return out
    raise ValueError(f"unknown baseline kind {kind!r}")


def apply_method(
    record: LogitRecord,
    weights: CalibrationWeights,
    method: str,
    grid_size: int | None = None,
    tau: float = 1.0,
    gamma: float = 1.0,
) -> ScoredRecord:
    """Dispatch one record through the chosen calibration and activation."""
    method = method.replace("_", "-")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    mode = mode_of(record.logits, weights.num_classes)
    z = np.asarray(record.logits, dtype=np.float64)

    if method == "none":
        scores = softmax(z) if mode == SOFTMAX else sigmoid(z)
    elif method == "class-only":
        adjusted = class_calibrate(record, weights)
        scores = softmax(adjusted) if mode == SOFTMAX else sigmoid(adjusted)
    elif method == "grid":
        if grid_size is None:
            raise ValueError("method 'grid' needs a grid size")
        adjusted = grid_calibrate(record, weights, grid_size)
        scores = softmax(adjusted) if mode == SOFTMAX else sigmoid(adjusted)
    elif method == "fracal":
        scores = fracal(record, weights)
    elif method == "opposite":
        scores = fracal_opposite(record, weights)
    elif method == "fracal-binary":
        scores = fracal_binary(record, weights)
    else:
        scores = baseline_calibrate(record, weights, method, tau=tau, gamma=gamma)
    return ScoredRecord(image_id=record.image_id, box=record.box, scores=scores)


# --- logits / scores files (JSON Lines with a one-line header) ---------------


def write_logit_records(path, records, mode: str, num_classes: int, extra_header=None) -> None:
    header = {"mode": mode, "num_classes": num_classes}
    if extra_header:
        header.update(extra_header)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "box": [float(v) for v in rec.box],
                        "logits": [float(v) for v in rec.logits],
                    }
                )
                + "\n"
            )


def read_logit_records(path) -> tuple[dict, list[LogitRecord]]:
    header, rows = _read_jsonl(path)
    records = []
    for i, row in enumerate(rows):
        try:
            records.append(
                LogitRecord(
                    image_id=int(row["image_id"]),
                    box=tuple(float(v) for v in row["box"]),
                    logits=np.asarray(row["logits"], dtype=np.float64),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad logit record on line {i + 2}") from exc
    _validate_lengths(header, records, "logits", path)
    return header, records


def write_score_records(path, records, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "box": [float(v) for v in rec.box],
                        "scores": [float(v) for v in rec.scores],
                    }
                )
                + "\n"
            )


def read_score_records(path) -> tuple[dict, list[ScoredRecord]]:
    header, rows = _read_jsonl(path)
    records = []
    for i, row in enumerate(rows):
        try:
            records.append(
                ScoredRecord(
                    image_id=int(row["image_id"]),
                    box=tuple(float(v) for v in row["box"]),
                    scores=np.asarray(row["scores"], dtype=np.float64),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad score record on line {i + 2}") from exc
    _validate_lengths(header, records, "scores", path)
    return header, records


def _read_jsonl(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise ValueError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if "mode" not in header or "num_classes" not in header:
        raise ValueError(f"{path}: header must declare mode and num_classes")
    return header, rows


def _validate_lengths(header, records, what, path) -> None:
    c = int(header["num_classes"])
    expected = c + 1 if header["mode"] == SOFTMAX else c
    for rec in records:
        vec = getattr(rec, what)
        if len(vec) != expected:
            raise ValueError(
                f"{path}: record for image {rec.image_id} has {len(vec)} {what}, "
                f"expected {expected} for {header['mode']} mode"
            )

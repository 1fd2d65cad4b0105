"""Reliability binning, ECE/MCE, temperature scaling and the vi_std confidence map.

Bin m (1-based) covers ((m-1)/M, m/M]; a confidence of exactly 0 lands in
bin 1. Empty bins count 0 and add nothing to ECE.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import log_softmax

from .errors import CalibrationError, DomainError, FitError
from .inference import PredictionRecord, records_from_probs
from .nn import softmax
from .tensor_io import write_csv

logger = logging.getLogger("qpi-explain")

LOG_T_BOUNDS = (np.log(0.05), np.log(20.0))
TEMPERATURE_TOL = 1e-4
MAP_A_GRID = np.round(np.arange(0.5, 2.0 + 1e-9, 0.05), 10)
MAP_B_GRID = np.round(np.arange(-0.3, 0.3 + 1e-9, 0.02), 10)
RELIABILITY_COLUMNS = ["bin", "lo", "q1", "med", "q3", "hi", "count"]


@dataclass
class ReliabilityBins:
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "counts": [int(c) for c in self.counts],
            "accuracy": [float(a) for a in self.accuracy],
            "confidence": [float(c) for c in self.confidence],
        }


def bin_index(confidence: np.ndarray, n_bins: int) -> np.ndarray:
    """0-based bin of each confidence: searchsorted on the right edges, left side."""
    edges = np.linspace(0.0, 1.0, n_bins + 1)[1:]
    return np.minimum(np.searchsorted(edges, confidence, side="left"), n_bins - 1)


def bin_arrays(confidence: Sequence[float], correct: Sequence[bool], n_bins: int = 10) -> ReliabilityBins:
    conf = np.asarray(confidence, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.size and (conf.min() < 0.0 or conf.max() > 1.0 or not np.all(np.isfinite(conf))):
        raise DomainError("confidences must lie in [0, 1]")
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=hit, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    safe = np.maximum(counts, 1)
    return ReliabilityBins(counts=counts, accuracy=acc_sum / safe, confidence=conf_sum / safe)


def bin_predictions(records: Sequence[PredictionRecord], n_bins: int = 10) -> ReliabilityBins:
    return bin_arrays([r.confidence for r in records], [r.correct for r in records], n_bins)


def ece(bins: ReliabilityBins) -> float:
    n = bins.n
    if n == 0:
        raise CalibrationError("ECE is undefined for an empty prediction set")
    return float(np.sum(bins.counts / n * np.abs(bins.accuracy - bins.confidence)))


def mce(bins: ReliabilityBins) -> float:
    if bins.n == 0:
        raise CalibrationError("MCE is undefined for an empty prediction set")
    filled = bins.counts > 0
    return float(np.max(np.abs(bins.accuracy - bins.confidence)[filled]))


# ============================================================================
# TEMPERATURE SCALING
# ============================================================================

def temperature_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def fit_temperature(logits: np.ndarray, labels: Sequence[int]) -> float:
    """T minimising validation NLL, searched on log T in [ln 0.05, ln 20].

    Minimised with scipy's bounded Brent method: golden-section steps with
    parabolic interpolation.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise FitError("temperature fit needs at least two classes in the validation labels")

    def objective(log_t: float) -> float:
        value = nll(z, y, float(np.exp(log_t)))
        return value if np.isfinite(value) else np.inf

    result = minimize_scalar(objective, bounds=LOG_T_BOUNDS, method="bounded",
                             options={"xatol": TEMPERATURE_TOL})
    if not np.isfinite(result.fun):
        raise FitError("validation NLL is not finite anywhere in the temperature range")
    t = float(np.exp(result.x))
    logger.debug(f"fit_temperature: T={t:.4f} nll={result.fun:.5f}")
    return t


def apply_temperature(logits: np.ndarray, temperature: float, ids: Optional[Sequence[int]] = None,
                      labels: Optional[Sequence[int]] = None) -> List[PredictionRecord]:
    return records_from_probs(temperature_softmax(logits, temperature), ids, labels, "softmax_max", logits=logits)


# ============================================================================
# VI_STD CONFIDENCE MAP
# ============================================================================

@dataclass
class ConfidenceMap:
    """conf' = clamp(a * conf + b, 0, 1)."""

    a: float = 1.0
    b: float = 0.0
    ece_before: float = 0.0
    ece_after: float = 0.0

    def apply(self, confidence: np.ndarray) -> np.ndarray:
        return np.clip(self.a * np.asarray(confidence, dtype=np.float64) + self.b, 0.0, 1.0)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def fit_confidence_map(confidence: Sequence[float], correct: Sequence[bool], n_bins: int = 10) -> ConfidenceMap:
    """ECE-minimising affine map on a coarse grid; ties go to the point nearest (1, 0)."""
    conf = np.asarray(confidence, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool)
    base = ece(bin_arrays(conf, hit, n_bins))
    best: Tuple[float, float, float, float] = (np.inf, np.inf, 1.0, 0.0)
    for a in MAP_A_GRID:
        for b in MAP_B_GRID:
            score = ece(bin_arrays(np.clip(a * conf + b, 0.0, 1.0), hit, n_bins))
            key = (round(score, 12), (a - 1.0) ** 2 + b ** 2, float(a), float(b))
            if key < best:
                best = key
    return ConfidenceMap(a=best[2], b=best[3], ece_before=base, ece_after=best[0])


def calibrate_vi_std(summary, labels: Optional[Sequence[int]] = None, n_bins: int = 10) -> ConfidenceMap:
    """Fit the vi_std map on validation summaries."""
    records = summary.records("vi_std")
    if labels is not None:
        for r, y in zip(records, labels):
            r.label = int(y)
    return fit_confidence_map([r.confidence for r in records], [r.correct for r in records], n_bins)


# ============================================================================
# REPORTS
# ============================================================================

@dataclass
class CalibrationReport:
    bins: ReliabilityBins
    ece: float
    mce: float
    temperature: float
    source: str
    run_id: str = ""
    ece_before: Optional[float] = None
    mce_before: Optional[float] = None
    bins_before: Optional[ReliabilityBins] = None
    confidence_map: Optional[ConfidenceMap] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "source": self.source,
            "temperature": self.temperature,
            "ece": self.ece,
            "mce": self.mce,
            "ece_before": self.ece_before,
            "mce_before": self.mce_before,
            "n": self.bins.n,
            "bins": self.bins.to_dict(),
            "bins_before": None if self.bins_before is None else self.bins_before.to_dict(),
            "confidence_map": None if self.confidence_map is None else self.confidence_map.to_dict(),
        }


def temperature_report(val_logits: np.ndarray, val_labels: Sequence[int], test_logits: np.ndarray,
                       test_labels: Sequence[int], n_bins: int = 10, run_id: str = "") -> CalibrationReport:
    """Fit T on validation logits; report test ECE/MCE before and after scaling."""
    t = fit_temperature(val_logits, val_labels)
    before = bin_predictions(apply_temperature(test_logits, 1.0, labels=test_labels), n_bins)
    after = bin_predictions(apply_temperature(test_logits, t, labels=test_labels), n_bins)
    return CalibrationReport(bins=after, ece=ece(after), mce=mce(after), temperature=t, source="softmax_max",
                             run_id=run_id, ece_before=ece(before), mce_before=mce(before), bins_before=before)


def vi_std_report(val_summary, test_summary, n_bins: int = 10, run_id: str = "") -> CalibrationReport:
    """Fit the vi_std map on validation summaries; report test ECE/MCE before and after."""
    cmap = calibrate_vi_std(val_summary, n_bins=n_bins)
    records = test_summary.records("vi_std")
    conf = np.array([r.confidence for r in records])
    hit = np.array([r.correct for r in records])
    before = bin_arrays(conf, hit, n_bins)
    after = bin_arrays(cmap.apply(conf), hit, n_bins)
    return CalibrationReport(bins=after, ece=ece(after), mce=mce(after), temperature=1.0, source="vi_std",
                             run_id=run_id, ece_before=ece(before), mce_before=mce(before), bins_before=before,
                             confidence_map=cmap)


def reliability_export(runs: Sequence[ReliabilityBins]) -> List[List[Any]]:
    """Per bin: whiskers (1.5 IQR), quartiles and median of per-run accuracy."""
    if not runs:
        raise CalibrationError("reliability export needs at least one run")
    n_bins = runs[0].n_bins
    rows = []
    for m in range(n_bins):
        values = np.array([r.accuracy[m] for r in runs if r.counts[m] > 0])
        count = int(sum(r.counts[m] for r in runs))
        if values.size == 0:
            rows.append([m + 1, np.nan, np.nan, np.nan, np.nan, np.nan, 0])
            continue
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        iqr = q3 - q1
        inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
        rows.append([m + 1, float(inside.min()), float(q1), float(med), float(q3), float(inside.max()), count])
    return rows


def write_reliability(path: Union[str, Path], rows: List[List[Any]]) -> None:
    write_csv(path, RELIABILITY_COLUMNS, rows)

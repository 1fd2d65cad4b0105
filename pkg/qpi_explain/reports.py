"""Classification metrics and the summary tables written by ``repro``.

Precision and recall are macro-averaged over the classes present in either
the truth or the predictions; F1 is the harmonic mean of those two averages.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from .errors import DataError
from .inference import PredictionRecord

logger = logging.getLogger("qpi-explain")

AVERAGING = "macro"
TABLE1_COLUMNS = ["model", "dropout", "mode", "precision", "precision_std", "recall", "recall_std",
                  "f1", "f1_std", "accuracy", "accuracy_std", "runs"]
TABLE2_COLUMNS = ["model", "source", "ece_before", "ece_before_std", "ece", "ece_std",
                  "mce_before", "mce_before_std", "mce", "mce_std", "runs"]


@dataclass
class MetricsEntry:
    precision: float
    recall: float
    f1: float
    accuracy: float
    excluded: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def metrics_from_labels(y_true: Sequence[int], y_pred: Sequence[int], n_classes: Optional[int] = None,
                        average: str = AVERAGING, positive: int = 1) -> MetricsEntry:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise DataError("metrics need equally long, non-empty label arrays")
    accuracy = float(np.mean(y_true == y_pred))
    if average == "binary":
        p, r, _, _ = precision_recall_fscore_support(y_true, y_pred, average="binary", pos_label=positive,
                                                     zero_division=0)
        return MetricsEntry(float(p), float(r), harmonic(float(p), float(r)), accuracy)
    k = n_classes or int(max(y_true.max(), y_pred.max())) + 1
    present = sorted(set(y_true.tolist()) | set(y_pred.tolist()))
    excluded = [c for c in range(k) if c not in present]
    if excluded:
        logger.warning(f"classes {excluded} absent from truth and predictions; excluded from the macro mean")
    p, r, _, _ = precision_recall_fscore_support(y_true, y_pred, labels=present, average=None, zero_division=0)
    mp, mr = float(np.mean(p)), float(np.mean(r))
    return MetricsEntry(mp, mr, harmonic(mp, mr), accuracy, excluded)


def metrics(records: Sequence[PredictionRecord], n_classes: Optional[int] = None,
            average: str = AVERAGING) -> MetricsEntry:
    if any(r.label is None for r in records):
        raise DataError("metrics need true labels on every record")
    return metrics_from_labels([r.label for r in records], [r.predicted for r in records], n_classes, average)


@dataclass
class MetricsReport:
    """Per-run metrics for one (model, mode) with mean and std across runs."""

    model: str
    mode: str
    dropout: float = 0.0
    runs: List[MetricsEntry] = field(default_factory=list)

    def add(self, entry: MetricsEntry) -> None:
        self.runs.append(entry)

    def _stat(self, name: str):
        values = np.array([getattr(e, name) for e in self.runs])
        return float(values.mean()), float(values.std())

    def summary(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for name in ("precision", "recall", "f1", "accuracy"):
            out[name], out[f"{name}_std"] = self._stat(name)
        return out

    def row(self) -> List[Any]:
        s = self.summary()
        return [self.model, self.dropout, self.mode, s["precision"], s["precision_std"], s["recall"],
                s["recall_std"], s["f1"], s["f1_std"], s["accuracy"], s["accuracy_std"], len(self.runs)]

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model, "mode": self.mode, "dropout": self.dropout, "averaging": AVERAGING,
                "runs": [e.to_dict() for e in self.runs], "summary": self.summary()}


@dataclass
class CalibrationSummary:
    """ECE/MCE before and after calibration across runs for one (model, source)."""

    model: str
    source: str
    ece_before: List[float] = field(default_factory=list)
    ece: List[float] = field(default_factory=list)
    mce_before: List[float] = field(default_factory=list)
    mce: List[float] = field(default_factory=list)

    def add(self, report) -> None:
        self.ece_before.append(report.ece_before)
        self.ece.append(report.ece)
        self.mce_before.append(report.mce_before)
        self.mce.append(report.mce)

    def row(self) -> List[Any]:
        out: List[Any] = [self.model, self.source]
        for values in (self.ece_before, self.ece, self.mce_before, self.mce):
            out += [float(np.mean(values)), float(np.std(values))]
        return out + [len(self.ece)]

"""Frequentist and variational (MC-dropout) prediction.

Confidence sources:
  softmax_max  max of the eval-mode softmax
  vi_mean      max of the per-class mean over passes
  vi_median    max of the per-class median over passes
  vi_std       1 - 2 * std of the winning class (population std), clamped to [0, 1]

Argmax ties go to the lowest class index.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import parallel_map
from .errors import ConfigError, DataError, MissingArtifactError
from .nn import Network, softmax
from .tensor_io import read_csv, write_csv

logger = logging.getLogger("qpi-explain")

SOURCES = ("softmax_max", "vi_mean", "vi_median", "vi_std")


@dataclass
class PredictionRecord:
    sample_id: int
    probs: np.ndarray
    predicted: int
    confidence: float
    source: str = "softmax_max"
    label: Optional[int] = None
    logits: Optional[np.ndarray] = None

    @property
    def correct(self) -> bool:
        return self.label is not None and self.predicted == self.label

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["probs"] = [float(p) for p in self.probs]
        d["logits"] = None if self.logits is None else [float(z) for z in self.logits]
        return d


def _ids(n: int, ids: Optional[Sequence[int]]) -> np.ndarray:
    return np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)


def _label(labels: Optional[Sequence[int]], i: int) -> Optional[int]:
    return None if labels is None else int(labels[i])


def records_from_probs(probs: np.ndarray, ids: Optional[Sequence[int]] = None, labels: Optional[Sequence[int]] = None,
                       source: str = "softmax_max", logits: Optional[np.ndarray] = None,
                       confidence: Optional[np.ndarray] = None, predicted: Optional[np.ndarray] = None) -> List[PredictionRecord]:
    probs = np.asarray(probs, dtype=np.float64)
    ids = _ids(len(probs), ids)
    pred = probs.argmax(axis=1) if predicted is None else np.asarray(predicted)
    conf = probs[np.arange(len(probs)), pred] if confidence is None else np.asarray(confidence)
    conf = np.clip(conf, 0.0, 1.0)
    return [
        PredictionRecord(
            sample_id=int(ids[i]),
            probs=probs[i],
            predicted=int(pred[i]),
            confidence=float(conf[i]),
            source=source,
            label=_label(labels, i),
            logits=None if logits is None else logits[i],
        )
        for i in range(len(probs))
    ]


def eval_logits(model: Network, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    chunks = [model.forward(batch[s:s + batch_size], mode="eval") for s in range(0, len(batch), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0,) + model.output_shape)


def predict_frequentist(model: Network, batch: np.ndarray, ids: Optional[Sequence[int]] = None,
                        labels: Optional[Sequence[int]] = None, batch_size: int = 256) -> List[PredictionRecord]:
    logits = eval_logits(model, np.asarray(batch, dtype=np.float64), batch_size)
    return records_from_probs(softmax(logits), ids, labels, "softmax_max", logits=logits)


# ============================================================================
# VARIATIONAL
# ============================================================================

@dataclass
class VariationalSummary:
    mean: np.ndarray  # [N, K]
    median: np.ndarray
    std: np.ndarray
    passes: int
    sample_ids: np.ndarray
    labels: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None  # mean logits over passes
    metric: str = "mean"

    def records(self, source: str = "vi_mean", metric: Optional[str] = None) -> List[PredictionRecord]:
        """Materialise records for one confidence source."""
        metric = metric or self.metric
        if source == "vi_mean":
            return records_from_probs(self.mean, self.sample_ids, self.labels, source, self.logits)
        if source == "vi_median":
            return records_from_probs(self.median, self.sample_ids, self.labels, source, self.logits)
        if source == "vi_std":
            probs = self.mean if metric == "mean" else self.median
            pred = probs.argmax(axis=1)
            sigma = self.std[np.arange(len(pred)), pred]
            return records_from_probs(probs, self.sample_ids, self.labels, source, self.logits,
                                      confidence=std_confidence(sigma), predicted=pred)
        raise ConfigError(f"unknown variational source '{source}'", hint="Use vi_mean, vi_median or vi_std.")

    def std_of_prediction(self, metric: Optional[str] = None) -> np.ndarray:
        probs = self.mean if (metric or self.metric) == "mean" else self.median
        return self.std[np.arange(len(probs)), probs.argmax(axis=1)]


def std_confidence(sigma: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - 2.0 * np.asarray(sigma, dtype=np.float64), 0.0, 1.0)


def summarize(pass_probs: np.ndarray, ids: Optional[Sequence[int]] = None, labels: Optional[Sequence[int]] = None,
              logits: Optional[np.ndarray] = None, metric: str = "mean") -> VariationalSummary:
    """Reduce [passes, N, K] probabilities to per-class mean/median/population std."""
    p = np.asarray(pass_probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] < 2:
        raise ConfigError(f"need [passes >= 2, N, K] probabilities, got {p.shape}")
    same = np.all(p == p[0:1], axis=0)
    mean = np.where(same, p[0], p.mean(axis=0))
    median = np.where(same, p[0], np.median(p, axis=0))
    std = np.where(same, 0.0, p.std(axis=0))
    return VariationalSummary(
        mean=mean,
        median=median,
        std=std,
        passes=p.shape[0],
        sample_ids=_ids(p.shape[1], ids),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
        logits=logits,
        metric=metric,
    )


def predict_variational(model: Network, batch: np.ndarray, passes: int = 100, seed: int = 0,
                        ids: Optional[Sequence[int]] = None, labels: Optional[Sequence[int]] = None,
                        metric: str = "mean", batch_size: int = 256):
    """MC-dropout forwards; returns (summary, records of the chosen metric).

    Pass ``p`` for sample ``i`` uses dropout masks seeded by (seed, id_i, p), so
    the result does not depend on batching or worker count.
    """
    if passes < 2:
        raise ConfigError(f"passes must be >= 2, got {passes}", hint="Set 'passes' in the run config.")
    if metric not in ("mean", "median"):
        raise ConfigError(f"unknown vi metric '{metric}'", hint="Use 'mean' or 'median'.")
    if not model.has_dropout:
        logger.warning(f"{model.name}: no active dropout layer; variational passes are identical")
    x = np.asarray(batch, dtype=np.float64)
    sample_ids = _ids(len(x), ids)

    def one_pass(p: int) -> np.ndarray:
        out = []
        for s in range(0, len(x), batch_size):
            out.append(model.forward(x[s:s + batch_size], mode="mc_dropout", rng_seed=seed,
                                     sample_ids=sample_ids[s:s + batch_size], pass_index=p))
        return np.concatenate(out) if out else np.zeros((0,) + model.output_shape)

    logits = np.stack(parallel_map(one_pass, list(range(passes))))
    summary = summarize(softmax(logits), sample_ids, labels, logits.mean(axis=0), metric)
    return summary, summary.records("vi_" + metric)


# ============================================================================
# CSV
# ============================================================================

def write_records(path: Union[str, Path], records: Sequence[PredictionRecord]) -> None:
    k = len(records[0].probs) if records else 0
    header = ["id", "label", "pred", "conf", "source"] + [f"p{j}" for j in range(k)]
    rows = [
        [r.sample_id, "" if r.label is None else r.label, r.predicted, r.confidence, r.source] + list(r.probs)
        for r in records
    ]
    write_csv(path, header, rows)


def read_records(path: Union[str, Path], producer: str = "evaluate") -> List[PredictionRecord]:
    if not Path(path).exists():
        raise MissingArtifactError(str(path), producer)
    rows = read_csv(path)
    out = []
    for row in rows:
        probs = np.array([float(row[c]) for c in sorted((c for c in row if c.startswith("p") and c[1:].isdigit()),
                                                         key=lambda c: int(c[1:]))])
        try:
            out.append(PredictionRecord(
                sample_id=int(row["id"]),
                probs=probs,
                predicted=int(row["pred"]),
                confidence=float(row["conf"]),
                source=row["source"],
                label=int(row["label"]) if row["label"] != "" else None,
            ))
        except (KeyError, ValueError) as e:
            raise DataError(f"malformed prediction row in {path}: {e}") from e
    return out

"""Meta-explanations: class x confidence-bin averages, t-SNE embedding, k-means.

Confidence bins are equal-width over [1/K, 1] (a softmax maximum never falls
below 1/K), with the same right-closed convention as reliability bins.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from sklearn.cluster import kmeans_plusplus

from .errors import ConfigError, DataError, MissingArtifactError
from .explain import ExplanationMap
from .inference import PredictionRecord
from .tensor_io import load_tensor, read_json, save_tensor, write_csv, write_json

logger = logging.getLogger("qpi-explain")

MACHINE_EPS = np.finfo(np.float64).eps


@dataclass
class MetaExplanationGrid:
    """Running sums and counts per (class, bin); means derived on demand."""

    sums: np.ndarray  # [K, B, H, W]
    counts: np.ndarray  # [K, B]
    method: str = "lime"

    @classmethod
    def empty(cls, n_classes: int, n_bins: int, shape=(50, 50), method: str = "lime") -> "MetaExplanationGrid":
        return cls(np.zeros((n_classes, n_bins) + tuple(shape)), np.zeros((n_classes, n_bins), dtype=np.int64), method)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def n_bins(self) -> int:
        return self.counts.shape[1]

    @property
    def empty_cells(self) -> np.ndarray:
        return self.counts == 0

    @property
    def means(self) -> np.ndarray:
        """Cell means; empty cells are all-zero (see ``empty_cells``)."""
        c = np.maximum(self.counts, 1)[..., None, None]
        return np.where(self.empty_cells[..., None, None], 0.0, self.sums / c)

    def bin_edges(self) -> np.ndarray:
        return np.linspace(1.0 / self.n_classes, 1.0, self.n_bins + 1)

    def merge(self, other: "MetaExplanationGrid") -> "MetaExplanationGrid":
        if self.sums.shape != other.sums.shape:
            raise DataError(f"cannot merge grids of shape {self.sums.shape} and {other.sums.shape}")
        return MetaExplanationGrid(self.sums + other.sums, self.counts + other.counts, self.method)

    def value_range(self) -> Dict[str, float]:
        filled = ~self.empty_cells
        if not filled.any():
            return {"min": 0.0, "max": 0.0}
        m = self.means[filled]
        return {"min": float(m.min()), "max": float(m.max())}


def confidence_bin(confidence: np.ndarray, n_classes: int, n_bins: int = 6) -> np.ndarray:
    edges = np.linspace(1.0 / n_classes, 1.0, n_bins + 1)[1:]
    return np.minimum(np.searchsorted(edges, confidence, side="left"), n_bins - 1)


def aggregate_by_confidence(explanations: Sequence[ExplanationMap], records: Sequence[PredictionRecord],
                            bins: int = 6, n_classes: Optional[int] = None) -> MetaExplanationGrid:
    """Average maps per (class, confidence bin); class is the true label, else the prediction."""
    by_id = {r.sample_id: r for r in records}
    if len(by_id) != len(records):
        raise DataError("duplicate sample ids in prediction records")
    missing = [e.sample_id for e in explanations if e.sample_id not in by_id]
    if missing or len(explanations) != len(records):
        raise DataError(
            f"explanations and records are not aligned ({len(explanations)} maps, {len(records)} records, "
            f"{len(missing)} unmatched ids)",
            hint="Explain exactly the samples that were predicted.",
        )
    if not explanations:
        raise DataError("nothing to aggregate")
    k = n_classes or len(records[0].probs)
    grid = MetaExplanationGrid.empty(k, bins, explanations[0].values.shape, explanations[0].method)
    conf = np.array([by_id[e.sample_id].confidence for e in explanations])
    b = confidence_bin(conf, k, bins)
    for e, bi in zip(explanations, b):
        r = by_id[e.sample_id]
        cls = r.label if r.label is not None else r.predicted
        grid.sums[cls, bi] += e.values
        grid.counts[cls, bi] += 1
    return grid


def save_grid(directory: Union[str, Path], grid: MetaExplanationGrid, class_names: Optional[Sequence[str]] = None) -> None:
    """One tensor file per non-empty cell plus index.json (counts, edges, min/max)."""
    directory = Path(directory)
    means = grid.means
    cells = []
    for k in range(grid.n_classes):
        for b in range(grid.n_bins):
            entry = {"class": k, "bin": b, "count": int(grid.counts[k, b]), "file": None}
            if grid.counts[k, b]:
                name = f"class{k}_bin{b}.qpit"
                save_tensor(directory / name, means[k, b])
                entry["file"] = name
            cells.append(entry)
    write_json(directory / "index.json", {
        "method": grid.method,
        "classes": list(class_names) if class_names else list(range(grid.n_classes)),
        "bin_edges": grid.bin_edges(),
        "cells": cells,
    })
    write_json(directory / "range.json", grid.value_range())


def load_grid(directory: Union[str, Path]) -> MetaExplanationGrid:
    directory = Path(directory)
    if not (directory / "index.json").exists():
        raise MissingArtifactError(str(directory / "index.json"), "aggregate")
    index = read_json(directory / "index.json")
    n_bins = len(index["bin_edges"]) - 1
    n_classes = len(index["classes"])
    shape = None
    cells = {}
    for c in index["cells"]:
        if c["file"]:
            cells[(c["class"], c["bin"])] = (load_tensor(directory / c["file"]), c["count"])
            shape = cells[(c["class"], c["bin"])][0].shape
    grid = MetaExplanationGrid.empty(n_classes, n_bins, shape or (50, 50), index["method"])
    for (k, b), (mean, count) in cells.items():
        grid.sums[k, b] = mean * count
        grid.counts[k, b] = count
    return grid


# ============================================================================
# T-SNE
# ============================================================================

@dataclass
class Embedding2D:
    coords: np.ndarray  # [n, 2]
    perplexity: float
    kl: float
    kl_trace: Dict[str, float] = field(default_factory=dict)


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d: np.ndarray, beta: float):
    p = np.exp(-(d - d.min()) * beta)
    s = max(p.sum(), MACHINE_EPS)
    h = np.log(s) + beta * np.sum((d - d.min()) * p) / s
    return h, p / s


def conditional_probabilities(x: np.ndarray, perplexity: float, tol: float = 1e-5, max_tries: int = 50) -> np.ndarray:
    """Row-stochastic p_{j|i} with per-row Gaussian bandwidth matched to ``perplexity``."""
    d = _squared_distances(np.asarray(x, dtype=np.float64))
    n = len(d)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        beta, lo, hi = 1.0, -np.inf, np.inf
        h, row = _row_entropy(di, beta)
        for _ in range(max_tries):
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
            h, row = _row_entropy(di, beta)
        p[i, np.arange(n) != i] = row
    return p


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetric joint affinities summing to 1 (each row sums to 1/n on average)."""
    p = conditional_probabilities(x, perplexity)
    return (p + p.T) / (2.0 * len(p))


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-12))))


def _student_q(y: np.ndarray):
    num = 1.0 / (1.0 + _squared_distances(y))
    np.fill_diagonal(num, 0.0)
    return num, num / max(num.sum(), MACHINE_EPS)


def tsne(points: np.ndarray, perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, exaggeration: float = 12.0, exaggeration_iters: int = 250) -> Embedding2D:
    """Exact t-SNE to 2-D with momentum 0.5 -> 0.8 and per-coordinate gains."""
    x = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    n = len(x)
    if n < 2:
        raise DataError(f"t-SNE needs at least 2 points, got {n}")
    if n < 3 * perplexity:
        lowered = max((n - 1) / 3.0, 1.0)
        logger.warning(f"t-SNE: {n} points is too few for perplexity {perplexity}; using {lowered:.2f}")
        perplexity = lowered
    p = joint_probabilities(x, perplexity)
    p = np.maximum(p, 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    trace: Dict[str, float] = {}
    for it in range(iters):
        pe = p * exaggeration if it < exaggeration_iters else p
        num, q = _student_q(y)
        w = (pe - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        momentum = 0.5 if it < exaggeration_iters else 0.8
        same = (grad > 0) == (velocity > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
        if it + 1 == exaggeration_iters:
            trace["after_exaggeration"] = _kl(p, _student_q(y)[1])
    kl = _kl(p, _student_q(y)[1])
    trace["final"] = kl
    return Embedding2D(coords=y, perplexity=float(perplexity), kl=kl, kl_trace=trace)


# ============================================================================
# K-MEANS
# ============================================================================

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    trace: List[float] = field(default_factory=list)
    iterations: int = 0


def _assign(x: np.ndarray, centers: np.ndarray):
    d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(x)), labels]


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start; empty clusters move to the farthest point."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k <= 0:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(x):
        raise ConfigError(f"k={k} exceeds the number of points ({len(x)})")
    centers, _ = kmeans_plusplus(x, n_clusters=k, random_state=seed)
    trace: List[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, dist = _assign(x, centers)
        trace.append(float(dist.sum()))
        new = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                far = int(dist.argmax())
                new[c] = x[far]
                dist[far] = 0.0
        shift = float(np.max(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift < tol:
            break
    labels, dist = _assign(x, centers)
    inertia = float(dist.sum())
    trace.append(inertia)
    return KMeansResult(labels=labels, centers=centers, inertia=inertia, trace=trace, iterations=it)


@dataclass
class ClusterComposition:
    cluster: int
    size: int
    percentages: List[float]
    dominant: int
    dominant_share: float

    def row(self) -> List[Any]:
        return [self.cluster, self.size, *self.percentages, self.dominant, self.dominant_share]


def cluster_composition(labels: Sequence[int], classes: Sequence[int], n_classes: Optional[int] = None) -> List[ClusterComposition]:
    """Class percentages per cluster with the dominant class flagged."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    if labels.shape != classes.shape:
        raise DataError(f"{len(labels)} cluster labels but {len(classes)} class labels")
    k = n_classes or int(classes.max()) + 1
    out = []
    for c in np.unique(labels):
        members = classes[labels == c]
        counts = np.bincount(members, minlength=k)
        pct = (100.0 * counts / len(members)).tolist()
        dom = int(np.argmax(counts))
        out.append(ClusterComposition(int(c), len(members), pct, dom, pct[dom]))
    return out


def write_embedding(path: Union[str, Path], ids: Sequence[int], embedding: Embedding2D,
                    clusters: Sequence[int], classes: Sequence[int]) -> None:
    rows = [[int(i), float(x), float(y), int(c), int(t)]
            for i, (x, y), c, t in zip(ids, embedding.coords, clusters, classes)]
    write_csv(path, ["id", "x", "y", "cluster", "class"], rows)


def write_composition(path: Union[str, Path], table: Sequence[ClusterComposition], class_names: Sequence[str]) -> None:
    header = ["cluster", "size"] + [f"pct_{n}" for n in class_names] + ["dominant", "dominant_share"]
    write_csv(path, header, [c.row() for c in table])

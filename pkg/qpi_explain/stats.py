"""Group comparisons of confidences and mislabel screening.

Kruskal-Wallis uses average ranks with the usual tie correction and a
chi-square tail with (groups - 1) degrees of freedom. Post hoc pairs are
two-group Kruskal-Wallis tests judged at alpha / C(g, 2).
"""

import itertools
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata, tiecorrect

from .errors import DataError
from .inference import PredictionRecord
from .tensor_io import write_csv

logger = logging.getLogger("qpi-explain")

POSTHOC_COLUMNS = ["group_a", "group_b", "H", "p", "adjusted_alpha", "significant"]
SUMMARY_COLUMNS = ["group", "n", "mean", "std", "se"]

Groups = Union[Mapping[str, Sequence[float]], Sequence[Sequence[float]]]


@dataclass
class KruskalResult:
    H: float
    p: float
    df: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PosthocRow:
    group_a: str
    group_b: str
    H: float
    p: float
    adjusted_alpha: float
    significant: bool

    def row(self) -> List[Any]:
        return [self.group_a, self.group_b, self.H, self.p, self.adjusted_alpha, self.significant]


@dataclass
class PosthocResult:
    omnibus: KruskalResult
    rows: List[PosthocRow] = field(default_factory=list)
    gated: bool = False


def _named(groups: Groups) -> Dict[str, np.ndarray]:
    items = groups.items() if isinstance(groups, Mapping) else ((str(i), g) for i, g in enumerate(groups))
    return {str(k): np.asarray(v, dtype=np.float64).ravel() for k, v in items}


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution (regularised upper incomplete gamma)."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def kruskal_wallis(groups: Groups) -> KruskalResult:
    named = _named(groups)
    if len(named) < 2:
        raise DataError(f"Kruskal-Wallis needs at least 2 groups, got {len(named)}")
    empty = [k for k, v in named.items() if v.size == 0]
    if empty:
        raise DataError(f"empty group(s): {', '.join(empty)}")
    values = np.concatenate(list(named.values()))
    n = values.size
    df = len(named) - 1
    correction = tiecorrect(rankdata(values))
    if correction == 0:
        return KruskalResult(H=0.0, p=1.0, df=df)
    ranks = rankdata(values)
    h, start = 0.0, 0
    for v in named.values():
        r = ranks[start:start + v.size]
        h += r.sum() ** 2 / v.size
        start += v.size
    h = (12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)) / correction
    h = max(h, 0.0)
    return KruskalResult(H=float(h), p=chi2_sf(h, df), df=df)


def bonferroni_posthoc(groups: Groups, alpha: float = 0.05, gate: bool = True) -> PosthocResult:
    """All pairwise rank tests at alpha / C(g, 2).

    With ``gate`` set, no pair is marked significant unless the omnibus test rejects.
    """
    named = _named(groups)
    omnibus = kruskal_wallis(named)
    pairs = list(itertools.combinations(named, 2))
    adjusted = alpha / len(pairs)
    gated = gate and omnibus.p >= alpha
    if gated:
        logger.info(f"omnibus p={omnibus.p:.4g} >= {alpha}; post hoc pairs reported as not significant")
    rows = []
    for a, b in pairs:
        r = kruskal_wallis({a: named[a], b: named[b]})
        rows.append(PosthocRow(a, b, r.H, r.p, adjusted, (not gated) and r.p < adjusted))
    return PosthocResult(omnibus, rows, gated)


def confidence_summary(groups: Groups) -> List[List[Any]]:
    """Per group: n, mean, sample std and standard error of the mean."""
    rows = []
    for name, v in _named(groups).items():
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        rows.append([name, int(v.size), float(v.mean()) if v.size else float("nan"), std,
                     std / np.sqrt(v.size) if v.size else float("nan")])
    return rows


def find_mislabeled(records: Sequence[PredictionRecord], threshold: float = 0.95) -> List[PredictionRecord]:
    """Confidently wrong records, highest confidence first (ties by sample id)."""
    if any(r.label is None for r in records):
        raise DataError("mislabel screening needs true labels on every record")
    suspects = [r for r in records if r.predicted != r.label and r.confidence >= threshold]
    return sorted(suspects, key=lambda r: (-r.confidence, r.sample_id))


def write_posthoc(path: Union[str, Path], result: PosthocResult) -> None:
    write_csv(path, POSTHOC_COLUMNS, [r.row() for r in result.rows])


def write_summary(path: Union[str, Path], rows: List[List[Any]]) -> None:
    write_csv(path, SUMMARY_COLUMNS, rows)

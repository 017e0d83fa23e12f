"""
Threshold-free evaluation metrics.

Anomalous is the positive class and a higher score means more anomalous.
"""

import logging
import math
from typing import List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from rich.table import Table
from scipy.stats import rankdata
from sklearn import metrics

from anodet.errors import EvaluationError

logger = logging.getLogger(__name__)

# Published consistency-BiGAN means on the full MVTec-AD benchmark, shown next to
# aggregate reports for comparison.
PUBLISHED_REFERENCE = {
    ('texture', 'balanced_accuracy'): 0.84,
    ('overall', 'balanced_accuracy'): 0.76,
    ('texture', 'auroc'): 0.85,
}

NON_FINITE = {'Infinity': math.inf, '-Infinity': -math.inf, 'NaN': math.nan}


class BalancedAccuracy(NamedTuple):
    balanced_accuracy: float
    threshold: float
    tpr: float
    tnr: float


class EvalResult(BaseModel):
    """
    Per-category evaluation summary.

    ``best_threshold`` is -inf when flagging every sample wins. Non-finite
    values are written as the JSON strings "Infinity", "-Infinity" and "NaN"
    so result files stay strict JSON.
    """

    model_config = ConfigDict(ser_json_inf_nan='strings')

    category: str
    kind: Optional[str] = None
    auroc: float
    balanced_accuracy: float
    best_threshold: float
    tpr: float
    tnr: float
    n_positive: int
    n_negative: int

    @field_validator('best_threshold', mode='before')
    @classmethod
    def _read_non_finite(cls, value):
        if isinstance(value, str) and value in NON_FINITE:
            return NON_FINITE[value]
        return value


def _validate(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if labels.dtype.kind in 'UO':
        labels = labels == 'anomalous'
    labels = labels.astype(bool)
    if scores.shape != labels.shape:
        raise EvaluationError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores contain non-finite values")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise EvaluationError("need at least one anomalous and one normal sample")
    return scores, labels


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between consecutive distinct sorted scores, +inf."""
    distinct = np.unique(scores)
    midpoints = (distinct[:-1] + distinct[1:]) / 2
    return np.concatenate([[-np.inf], midpoints, [np.inf]])


def max_balanced_accuracy(scores, labels) -> BalancedAccuracy:
    """
    Maximum of (TPR + TNR) / 2 over every threshold (score > t is anomalous).
    Ties between thresholds resolve to the lowest one.
    """
    scores, labels = _validate(scores, labels)
    thresholds = candidate_thresholds(scores)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, thresholds, side='right')
    tn = np.searchsorted(neg, thresholds, side='right')
    tpr = tp / pos.size
    tnr = tn / neg.size
    balanced = (tpr + tnr) / 2
    best = int(np.argmax(balanced))
    return BalancedAccuracy(float(balanced[best]), float(thresholds[best]), float(tpr[best]), float(tnr[best]))


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted 1/2 (Mann-Whitney U)."""
    scores, labels = _validate(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) from the strictest threshold down, starting at (0, 0)."""
    scores, labels = _validate(scores, labels)
    fpr, tpr, thresholds = metrics.roc_curve(labels.astype(int), scores, drop_intermediate=False)
    return fpr, tpr, thresholds


def auroc_trapezoid(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(metrics.auc(fpr, tpr))


def evaluate_scores(category: str, scores, labels, kind: Optional[str] = None) -> EvalResult:
    scores_arr, labels_arr = _validate(scores, labels)
    best = max_balanced_accuracy(scores_arr, labels_arr)
    result = EvalResult(
        category=category,
        kind=kind,
        auroc=auroc(scores_arr, labels_arr),
        balanced_accuracy=best.balanced_accuracy,
        best_threshold=best.threshold,
        tpr=best.tpr,
        tnr=best.tnr,
        n_positive=int(labels_arr.sum()),
        n_negative=int((~labels_arr).sum()),
    )
    logger.info(f"{category}: auROC {result.auroc:.4f}, balanced accuracy {result.balanced_accuracy:.4f}")
    return result


class AggregateRow(BaseModel):
    group: str
    n_categories: int
    auroc: float
    balanced_accuracy: float


class AggregateReport(BaseModel):
    results: List[EvalResult]
    rows: List[AggregateRow]

    def row(self, group: str) -> AggregateRow:
        return next(r for r in self.rows if r.group == group)


def _mean_row(group: str, members: List[EvalResult], fallback: List[EvalResult]) -> AggregateRow:
    """Means over ``members``; a group with no members reports the mean of ``fallback``."""
    source = members or fallback
    return AggregateRow(
        group=group,
        n_categories=len(members),
        auroc=float(np.mean([r.auroc for r in source])),
        balanced_accuracy=float(np.mean([r.balanced_accuracy for r in source])),
    )


def aggregate(results: Sequence[EvalResult], kinds: Optional[Mapping[str, str]] = None) -> AggregateReport:
    """Arithmetic means over texture categories, object categories and all categories."""
    if not results:
        raise EvaluationError("nothing to aggregate")
    kinds = dict(kinds or {})

    def kind_of(result: EvalResult) -> Optional[str]:
        return kinds.get(result.category, result.kind)

    results = list(results)
    rows = [
        _mean_row('texture', [r for r in results if kind_of(r) == 'texture'], results),
        _mean_row('object', [r for r in results if kind_of(r) == 'object'], results),
        _mean_row('overall', results, results),
    ]
    return AggregateReport(results=results, rows=rows)


def _fmt(value: Optional[float]) -> str:
    return '-' if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.3f}"


def render_report(report: AggregateReport, show_reference: bool = False) -> Table:
    """Category rows followed by the per-kind and overall means."""
    table = Table(title="Anomaly detection results")
    table.add_column("Category")
    table.add_column("Kind")
    table.add_column("auROC", justify="right")
    table.add_column("Balanced acc.", justify="right")
    table.add_column("Threshold", justify="right")
    table.add_column("P / N", justify="right")
    for r in report.results:
        table.add_row(r.category, r.kind or '-', _fmt(r.auroc), _fmt(r.balanced_accuracy),
                      f"{r.best_threshold:.4g}", f"{r.n_positive} / {r.n_negative}")
    table.add_section()
    for row in report.rows:
        table.add_row(f"mean ({row.group})", '', _fmt(row.auroc), _fmt(row.balanced_accuracy),
                      '', str(row.n_categories))
    if show_reference:
        table.add_section()
        for (group, metric), value in PUBLISHED_REFERENCE.items():
            auroc_ref = value if metric == 'auroc' else None
            bacc_ref = value if metric == 'balanced_accuracy' else None
            table.add_row(f"reference ({group})", '', _fmt(auroc_ref), _fmt(bacc_ref), '', '')
    return table

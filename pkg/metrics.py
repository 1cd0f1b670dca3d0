"""
Classification metrics: rank-based AUC, thresholded confusion counts and the
rates derived from them.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from data import RoiDataset, iter_batches
from errors import ContractError, StorageError, UndefinedMetricError
from logger import logger
from models import MetricsReport

RATE_KEYS = ("auc", "accuracy", "sensitivity", "specificity", "precision", "f1")


def _binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """
    Mann-Whitney AUC with mid-ranks for tied scores

    Raises UndefinedMetricError unless both classes are present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (n_pos={n_pos}, n_neg={n_neg})")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> pd.DataFrame:
    """(threshold, fpr, tpr) at every distinct score, highest threshold first"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores, sorted_labels = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_labels.size - 1]
    tps = np.cumsum(sorted_labels)[last_of_run]
    fps = (last_of_run + 1) - tps
    return pd.DataFrame({
        "threshold": np.r_[np.inf, sorted_scores[last_of_run]],
        "fpr": np.r_[0.0, fps / n_neg],
        "tpr": np.r_[0.0, tps / n_pos],
    })


def confusion(scores, labels, threshold: float = 0.5) -> Tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with score >= threshold predicted positive"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    predicted = scores >= threshold
    actual = labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    return tp, fp, tn, fn


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def derived_metrics(tp: int, fp: int, tn: int, fn: int) -> Dict[str, Optional[float]]:
    """Rates from confusion counts; a zero denominator yields None, never 0"""
    return {
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "precision": _ratio(tp, tp + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "accuracy": _ratio(tp + tn, tp + fp + tn + fn),
    }


def build_report(
    scores,
    labels,
    threshold: float = 0.5,
    variant: Optional[str] = None,
    partition: Optional[str] = None,
) -> MetricsReport:
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    values = derived_metrics(tp, fp, tn, fn)
    try:
        values["auc"] = roc_auc(scores, labels)
    except UndefinedMetricError as exc:
        logger.warning(f"AUC undefined: {exc}")
        values["auc"] = None
    undefined = [key for key in RATE_KEYS if values[key] is None]
    return MetricsReport(
        **values,
        threshold=threshold,
        tp=tp, fp=fp, tn=tn, fn=fn,
        n_pos=tp + fn, n_neg=tn + fp,
        undefined=undefined,
        variant=variant,
        partition=partition,
    )


@dataclass
class Evaluation:
    report: MetricsReport
    scores: np.ndarray
    labels: np.ndarray


def predict_scores(
    predict: Callable[[np.ndarray], np.ndarray],
    dataset: RoiDataset,
    indices: Sequence[int],
    batch_size: int = 16,
    workers: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilities and labels for `indices`, in order, without augmentation"""
    scores, labels = [], []
    for images, batch_labels, _ in iter_batches(dataset, indices, batch_size, epoch=0, workers=workers):
        scores.append(np.asarray(predict(images), dtype=np.float64))
        labels.append(batch_labels)
    if not scores:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(
    predict: Callable[[np.ndarray], np.ndarray],
    dataset: RoiDataset,
    indices: Sequence[int],
    threshold: float = 0.5,
    batch_size: int = 16,
    variant: Optional[str] = None,
    partition: Optional[str] = None,
    workers: int = 1,
) -> Evaluation:
    """
    Score a partition and summarise it

    Args:
        predict: maps a normalized image batch [B, 3, S, S] to probabilities [B]
        dataset: unaugmented dataset holding the partition
        indices: record positions to evaluate

    Returns:
        Evaluation with the report plus the raw scores and labels
    """
    if dataset.augment:
        raise ContractError("evaluation requires an unaugmented dataset")
    if len(indices) == 0:
        raise ContractError("nothing to evaluate: partition is empty")
    scores, labels = predict_scores(predict, dataset, indices, batch_size, workers)
    report = build_report(scores, labels, threshold, variant=variant, partition=partition)
    logger.info(
        f"Evaluated {labels.size} samples ({partition or 'partition'}): "
        f"AUC={_fmt(report.auc)} acc={_fmt(report.accuracy)}"
    )
    return Evaluation(report=report, scores=scores, labels=labels)


def _fmt(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def report_text(report: MetricsReport) -> str:
    lines = []
    for key, value in report.model_dump().items():
        if isinstance(value, float) or (value is None and key in RATE_KEYS):
            value = _fmt(value)
        elif isinstance(value, list):
            value = ",".join(value)
        elif value is None:
            value = ""
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir, stem: str = "metrics", evaluation: Optional[Evaluation] = None) -> Path:
    """`<stem>.txt` (4 decimals), `<stem>.json` (full precision) and, with scores, `<stem>_roc.csv`"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.txt").write_text(report_text(report), encoding="utf-8", newline="\n")
        (out_dir / f"{stem}.json").write_text(
            json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
            encoding="utf-8", newline="\n",
        )
        if evaluation is not None and report.auc is not None:
            roc_curve(evaluation.scores, evaluation.labels).to_csv(
                out_dir / f"{stem}_roc.csv", index=False, lineterminator="\n")
    except OSError as exc:
        raise StorageError(f"cannot write report to {out_dir}: {exc}") from exc
    logger.info(f"Report written to {out_dir / stem}.txt")
    return out_dir / f"{stem}.json"

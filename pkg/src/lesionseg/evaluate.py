"""Jaccard scoring by pixel-pair counting, aggregate stats, reports, sheets."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, InvalidMaskError, ShapeError

SEPARATOR_GRAY = 128


@dataclass
class ConfusionCounts:
    """Pixel counts for the four (prediction, ground truth) combinations."""

    n11: int  # pred 1, gt 1
    n10: int  # pred 1, gt 0
    n01: int  # pred 0, gt 1
    n00: int  # pred 0, gt 0


@dataclass
class EvalReport:
    """Per-image Jaccard values plus aggregate statistics at a threshold."""

    per_image: list[tuple[str, float]]
    mean: float
    median: float
    std: float
    threshold: float
    success_count: int
    success_rate: float


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise InvalidMaskError(f"{name} mask contains values outside {{0, 1}}")
    return arr.astype(np.uint8, copy=False)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Count the four pixel tuples between a prediction and its ground truth."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = _check_binary(pred, "prediction")
    g = _check_binary(gt, "ground truth")
    code = p * 2 + g  # 3->n11, 2->n10, 1->n01, 0->n00
    counts = np.bincount(code.ravel(), minlength=4)
    return ConfusionCounts(n11=int(counts[3]), n10=int(counts[2]),
                           n01=int(counts[1]), n00=int(counts[0]))


def jaccard(c: ConfusionCounts) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    union = c.n11 + c.n10 + c.n01
    if union == 0:
        return 1.0
    return c.n11 / union


def aggregate(values: list[float], threshold: float = 0.650,
              ids: list[str] | None = None) -> EvalReport:
    """Mean / median / population std / success rate of Jaccard values."""
    if len(values) == 0:
        raise EmptyInputError("cannot aggregate zero Jaccard values")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if ids is None:
        ids = [str(i) for i in range(len(values))]
    if len(ids) != len(values):
        raise ShapeError(f"{len(ids)} ids for {len(values)} values")
    vals = np.asarray(values, dtype=np.float64)
    n = vals.size
    mean = float(vals.sum() / n)
    ordered = np.sort(vals)
    if n % 2 == 1:
        median = float(ordered[n // 2])
    else:
        median = float((ordered[n // 2 - 1] + ordered[n // 2]) / 2.0)
    std = float(np.sqrt(((vals - mean) ** 2).sum() / n))  # population estimator
    success = int((vals >= threshold).sum())
    return EvalReport(per_image=list(zip(ids, (float(v) for v in vals))),
                      mean=mean, median=median, std=std, threshold=threshold,
                      success_count=success, success_rate=success / n)


def write_report(report: EvalReport, path, format: str = "csv") -> None:
    """Serialize a report; CSV has per-image rows then four summary rows."""
    if format == "csv":
        lines = ["id,jaccard"]
        lines += [f"{ident},{val:.6f}" for ident, val in report.per_image]
        lines.append(f"mean,{report.mean:.6f}")
        lines.append(f"median,{report.median:.6f}")
        lines.append(f"std,{report.std:.6f}")
        lines.append(f"success_rate,{report.success_rate:.6f}")
        text = "\n".join(lines) + "\n"
    elif format == "json":
        text = json.dumps({
            "per_image": [{"id": ident, "jaccard": val}
                          for ident, val in report.per_image],
            "mean": report.mean,
            "median": report.median,
            "std": report.std,
            "threshold": report.threshold,
            "success_count": report.success_count,
            "success_rate": report.success_rate,
        }, indent=2) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)


def contact_sheet(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Side-by-side white-on-black masks with a 2-pixel gray separator."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = _check_binary(pred, "prediction")
    g = _check_binary(gt, "ground truth")
    h, w = p.shape
    sheet = np.empty((h, 2 * w + 2), dtype=np.uint8)
    sheet[:, :w] = p * 255
    sheet[:, w:w + 2] = SEPARATOR_GRAY
    sheet[:, w + 2:] = g * 255
    return np.repeat(sheet[:, :, None], 3, axis=2)

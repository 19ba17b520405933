"""Pixel-wise confusion matrices and per-class precision / recall / F1."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .raster_core import FOREST, NON_FOREST, UNLABELED, ClassMap

CLASS_NAMES = {NON_FOREST: "non-forest", FOREST: "forest"}
REPORT_DECIMALS = 3


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts indexed ``[truth, prediction]`` over (non-forest, forest)."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (2, 2) or (c < 0).any():
            raise ValueError(f"confusion counts must be a non-negative 2x2 array, got {c}")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def outcomes(self, positive_class: int) -> tuple[int, int, int, int]:
        """(tp, fp, fn, tn) with ``positive_class`` as the positive label."""
        p, q = positive_class, 1 - positive_class
        c = self.counts
        return int(c[p, p]), int(c[q, p]), int(c[p, q]), int(c[q, q])


class PRF(NamedTuple):
    precision: float | None
    recall: float | None
    f1: float | None


def confusion(pred: ClassMap | np.ndarray, truth: ClassMap | np.ndarray) -> ConfusionMatrix:
    """Exact counts; pixels whose truth is unlabeled (255) are skipped."""
    p = pred.values if isinstance(pred, ClassMap) else np.asarray(pred)
    t = truth.values if isinstance(truth, ClassMap) else np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    keep = t != UNLABELED
    p, t = p[keep].astype(np.int64), t[keep].astype(np.int64)
    if ((p != 0) & (p != 1)).any():
        raise ValueError("prediction must be dense 0/1 wherever truth is labeled")
    counts = np.bincount(2 * t + p, minlength=4).reshape(2, 2)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def prf_from_counts(tp: int, fp: int, fn: int) -> PRF:
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None:
        return PRF(precision, recall, None)
    return PRF(precision, recall, _ratio(2 * precision * recall, precision + recall))


def f1_score(precision: float, recall: float) -> float | None:
    return _ratio(2 * precision * recall, precision + recall)


def prf(cm: ConfusionMatrix, positive_class: int = FOREST) -> PRF:
    """Precision, recall and F1 for one class; ``None`` marks an undefined 0/0."""
    tp, fp, fn, _ = cm.outcomes(positive_class)
    return prf_from_counts(tp, fp, fn)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _rounded(x: float | None) -> float | None:
    return None if x is None else round(x, REPORT_DECIMALS)


def evaluation_records(
    predictions: Mapping[str, ClassMap], truth: ClassMap, seed: int, cfg_hash: str
) -> list[dict]:
    """One record per (method, class), methods in the mapping's order."""
    records = []
    for method, pred in predictions.items():
        cm = confusion(pred, truth)
        for cls in (NON_FOREST, FOREST):
            tp, fp, fn, tn = cm.outcomes(cls)
            m = prf_from_counts(tp, fp, fn)
            records.append(
                {
                    "method": method,
                    "class": CLASS_NAMES[cls],
                    "precision": _rounded(m.precision),
                    "recall": _rounded(m.recall),
                    "f1": _rounded(m.f1),
                    "tp": tp,
                    "fp": fp,
                    "fn": fn,
                    "tn": tn,
                    "seed": seed,
                    "config_hash": cfg_hash,
                }
            )
    return records


def dumps_report(records: list[dict]) -> str:
    return json.dumps(records, indent=2, sort_keys=True) + "\n"


def report(
    predictions: Mapping[str, ClassMap],
    truth: ClassMap,
    path: str | os.PathLike,
    seed: int,
    cfg_hash: str,
) -> list[dict]:
    """Write evaluation.json and return its records."""
    if not predictions:
        raise ValueError("report needs at least one prediction")
    records = evaluation_records(predictions, truth, seed, cfg_hash)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_report(records))
    return records


def format_table(records: list[dict]) -> str:
    """Plain-text method x class table with three-decimal metrics."""

    def cell(v):
        return "   n/a" if v is None else f"{v:6.3f}"

    lines = [f"{'method':<14}{'class':<12}{'prec':>7}{'recall':>7}{'f1':>7}"]
    for r in records:
        lines.append(
            f"{r['method']:<14}{r['class']:<12}{cell(r['precision']):>7}{cell(r['recall']):>7}{cell(r['f1']):>7}"
        )
    return "\n".join(lines)

"""Binary classification metrics and the CSV row format."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import InputError

CSV_HEADER = "config,task,accuracy,precision,recall,f1,support"
NOT_CAPABLE = "✗"


@dataclass
class MetricsRow:
    config: str
    task: str
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    support: int

    @property
    def capable(self) -> bool:
        return self.accuracy is not None

    @classmethod
    def not_capable(cls, config: str, task: str, support: int) -> "MetricsRow":
        return cls(config, task, None, None, None, None, support)

    def csv_line(self) -> str:
        if not self.capable:
            vals = [NOT_CAPABLE] * 4
        else:
            vals = [f"{v:.6f}" for v in (self.accuracy, self.precision, self.recall, self.f1)]
        return ",".join([self.config, self.task, *vals, str(self.support)])


def classification_metrics(preds: Sequence[int], labels: Sequence[int], positive_class: int = 1,
                           config: str = "", task: str = "") -> MetricsRow:
    """Accuracy, precision, recall and F1 for one positive class.

    A zero denominator gives 0 for precision, recall and F1.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InputError(f"preds and labels must be equal-length vectors: "
                         f"{preds.shape} vs {labels.shape}")
    if len(preds) == 0:
        raise InputError("cannot score an empty prediction list")
    pp = preds == positive_class
    lp = labels == positive_class
    tp = int(np.sum(pp & lp))
    fp = int(np.sum(pp & ~lp))
    fn = int(np.sum(~pp & lp))
    n = len(preds)
    acc = float(np.sum(preds == labels)) / n
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return MetricsRow(config, task, acc, prec, rec, f1, n)


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in rows:
        buf.write(r.csv_line() + "\n")
    return buf.getvalue()


def parse_csv(text: str) -> List[MetricsRow]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise InputError("not a metrics CSV (header mismatch)")
    rows = []
    for line in lines[1:]:
        cfg, task, *vals, support = line.split(",")
        nums = [None if v == NOT_CAPABLE else float(v) for v in vals]
        rows.append(MetricsRow(cfg, task, *nums, int(support)))
    return rows

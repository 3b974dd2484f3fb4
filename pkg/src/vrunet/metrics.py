"""Confusion counts and the classification / segmentation metrics built on them.

Zero-denominator rule: a ratio whose denominator is 0 evaluates to 0, except
that Dice, precision and recall are 1 when prediction and truth are both empty
(tp = fp = fn = 0), since predicting "no lesion" for a lesion-free case is
correct.

Sensitivity and specificity use the standard definitions
``tp / (tp + fn)`` and ``tn / (tn + fp)``. Pass ``literal_formulas=True`` to
:func:`classification_metrics` to get ``tp / (tp + fp)`` and
``tn / (tn + fn)`` instead, for comparison with tables that used those.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(pred, truth) -> ConfusionCounts:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    p, t = pred.astype(bool), truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def _both_empty(c: ConfusionCounts) -> bool:
    return c.tp == 0 and c.fp == 0 and c.fn == 0


def precision(c: ConfusionCounts) -> float:
    return 1.0 if _both_empty(c) else _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    return 1.0 if _both_empty(c) else _ratio(c.tp, c.tp + c.fn)


def dice(c: ConfusionCounts) -> float:
    return 1.0 if _both_empty(c) else _ratio(2 * c.tp, c.fp + 2 * c.tp + c.fn)


def classification_metrics(c: ConfusionCounts, literal_formulas: bool = False) -> dict[str, float]:
    p, r = precision(c), recall(c)
    if literal_formulas:
        sens, spec = _ratio(c.tp, c.tp + c.fp), _ratio(c.tn, c.tn + c.fn)
    else:
        sens, spec = r, _ratio(c.tn, c.tn + c.fp)
    return {
        "precision": p,
        "recall": r,
        "f1": _ratio(2 * p * r, p + r),
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "sensitivity": sens,
        "specificity": spec,
    }


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def evaluate_volume(pred_mask, truth_mask, case_id: str = "") -> CaseMetrics:
    pred_mask, truth_mask = np.asarray(pred_mask), np.asarray(truth_mask)
    if pred_mask.shape != truth_mask.shape:
        raise ValueError(f"case {case_id!r}: prediction dims {pred_mask.shape} != truth dims {truth_mask.shape}")
    c = confusion(pred_mask, truth_mask)
    return CaseMetrics(case_id, dice(c), precision(c), recall(c), c.tp, c.fp, c.fn)


@dataclass
class Summary:
    n: int
    mean: dict[str, float]
    std: dict[str, float]


def summarize(records: Sequence[CaseMetrics], ddof: int = 0) -> Summary:
    """Mean and standard deviation (population by default) of Dice, precision and recall."""
    keys = ("dice", "precision", "recall")
    if not records:
        return Summary(0, {k: float("nan") for k in keys}, {k: float("nan") for k in keys})
    arr = {k: np.array([getattr(r, k) for r in records], dtype=np.float64) for k in keys}
    return Summary(len(records), {k: float(v.mean()) for k, v in arr.items()},
                   {k: float(v.std(ddof=ddof)) for k, v in arr.items()})


def format_table(sections: dict[str, Sequence[CaseMetrics]], ddof: int = 0) -> str:
    """Text table with one row per section: Dice / precision / recall as mean ± std."""
    w = max([7] + [len(name) for name in sections])
    head = f"{'section':<{w}} {'n':>4}  {'Dice':>15}  {'Precision':>15}  {'Recall':>15}"
    lines = [head, "-" * len(head)]
    for name, recs in sections.items():
        s = summarize(recs, ddof)
        cells = [f"{s.mean[k]:.3f} ± {s.std[k]:.3f}" for k in ("dice", "precision", "recall")]
        lines.append(f"{name:<{w}} {s.n:>4}  {cells[0]:>15}  {cells[1]:>15}  {cells[2]:>15}")
    return "\n".join(lines)


def write_report(sections: dict[str, Sequence[CaseMetrics]], path, ddof: int = 0) -> None:
    """Machine-readable record file.

    Schema: ``{"sections": {name: {"n", "mean": {dice, precision, recall},
    "std": {...}, "cases": [CaseMetrics fields...]}}}``
    """
    out = {}
    for name, recs in sections.items():
        s = summarize(recs, ddof)
        out[name] = {"n": s.n, "mean": s.mean, "std": s.std, "cases": [asdict(r) for r in recs]}
    Path(path).write_text(json.dumps({"sections": out}, indent=2))


def slice_labels_confusion(pred_labels: Iterable[bool], true_labels: Iterable[bool]) -> ConfusionCounts:
    return confusion(np.fromiter(pred_labels, bool), np.fromiter(true_labels, bool))

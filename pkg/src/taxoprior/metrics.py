"""Confusion-matrix accumulation and IoU / mIoU reporting."""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .taxonomy import VOID_ID, Taxonomy
from .tensorio import LabelMap

SCHEMA = 1


class ConfusionMatrix:
    """Integer counts, rows = ground truth, columns = prediction.

    Column ``C`` collects pixels predicted void; such pixels can never be
    true positives. Ground-truth void pixels are only counted in ``ignored``.
    """

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
        self.ignored = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def copy(self) -> ConfusionMatrix:
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts.copy()
        out.ignored = self.ignored
        return out

    def update(self, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
        if pred.shape != gt.shape:
            raise ValueError(f"prediction is {pred.shape} but ground truth is {gt.shape}")
        c = self.num_classes
        g = gt.ids.ravel().astype(np.int64)
        p = pred.ids.ravel().astype(np.int64)
        for name, arr in (("ground truth", g), ("prediction", p)):
            bad = (arr >= c) & (arr != VOID_ID)
            if bad.any():
                idx = int(np.flatnonzero(bad)[0])
                r, col = divmod(idx, gt.width)
                raise ValueError(f"{name} id {arr[idx]} at ({r}, {col}) exceeds {c} classes")
        valid = g != VOID_ID
        self.ignored += int(g.size - valid.sum())
        g, p = g[valid], p[valid]
        p = np.where(p == VOID_ID, c, p)
        self.counts += np.bincount(g * (c + 1) + p, minlength=c * (c + 1)).reshape(c, c + 1)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices with different class counts")
        out = self.copy()
        out.counts += other.counts
        out.ignored += other.ignored
        return out

    def __eq__(self, other: object) -> bool:
        return (isinstance(other, ConfusionMatrix) and self.ignored == other.ignored
                and np.array_equal(self.counts, other.counts))

    def iou(self, cls: int) -> float | None:
        if not 0 <= cls < self.num_classes:
            raise KeyError(f"unknown class id {cls}")
        tp = int(self.counts[cls, cls])
        fp = int(self.counts[:, cls].sum()) - tp
        fn = int(self.counts[cls].sum()) - tp
        denom = tp + fp + fn
        return None if denom == 0 else tp / denom


def accumulate(cm: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Return a new matrix with one more image pair counted."""
    return cm.copy().update(pred, gt)


def iou(cm: ConfusionMatrix, cls: int) -> float | None:
    return cm.iou(cls)


@dataclass
class EvalReport:
    per_class_iou: list[tuple[int, float | None]]
    miou: float
    pixel_accuracy: float
    classes_included: int
    class_names: list[str] = field(default_factory=list)
    ignored_pixels: int = 0
    evaluated_pixels: int = 0

    @classmethod
    def from_matrix(cls, cm: ConfusionMatrix, taxonomy: Taxonomy | None = None) -> EvalReport:
        per_class = [(c, cm.iou(c)) for c in range(cm.num_classes)]
        present = [v for _, v in per_class if v is not None]
        evaluated = int(cm.counts.sum())
        return cls(
            per_class_iou=per_class,
            miou=sum(present) / len(present) if present else 0.0,
            pixel_accuracy=int(np.trace(cm.counts[:, : cm.num_classes])) / evaluated if evaluated else 0.0,
            classes_included=len(present),
            class_names=taxonomy.names if taxonomy is not None else [str(c) for c in range(cm.num_classes)],
            ignored_pixels=cm.ignored,
            evaluated_pixels=evaluated,
        )

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "classes_included": self.classes_included,
            "evaluated_pixels": self.evaluated_pixels,
            "ignored_pixels": self.ignored_pixels,
            "per_class_iou": [
                {"id": c, "name": self.class_names[c], "iou": v} for c, v in self.per_class_iou
            ],
        }


def evaluate(preds: Iterable[LabelMap], gts: Iterable[LabelMap], taxonomy: Taxonomy) -> EvalReport:
    cm = ConfusionMatrix(len(taxonomy))
    preds, gts = iter(preds), iter(gts)
    n = 0
    while True:
        p = next(preds, None)
        g = next(gts, None)
        if p is None and g is None:
            break
        if p is None or g is None:
            raise ValueError(f"stream length mismatch after {n} pairs")
        cm.update(p, g)
        n += 1
    return EvalReport.from_matrix(cm, taxonomy)


def _pct1(value: float) -> Decimal:
    return (Decimal(repr(value)) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def comparison(post: float, init: float | None = None) -> dict:
    """Init / post / diff in percent at one decimal; diff is always post - init."""
    out: dict = {"post": _pct1(post)}
    if init is not None:
        out["init"] = _pct1(init)
        out["diff"] = out["post"] - out["init"]
    return out


def format_percent(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


def format_report(report: EvalReport, model: str = "-", iteration: str = "-",
                  init: float | None = None) -> str:
    """Per-class IoU followed by a model / iteration / init / post (diff) row."""
    width = max([len("mIoU"), *(len(n) for n in report.class_names)])
    lines = [f"{'class':<{width}}  {'IoU':>6}"]
    for cid, value in report.per_class_iou:
        lines.append(f"{report.class_names[cid]:<{width}}  {format_percent(value):>6}")
    lines.append(f"{'mIoU':<{width}}  {format_percent(report.miou):>6}  ({report.classes_included} classes)")
    lines.append(f"{'acc':<{width}}  {format_percent(report.pixel_accuracy):>6}")
    lines.append("")
    summary = comparison(report.miou, init)
    post_cell = str(summary["post"])
    init_cell = "-"
    if init is not None:
        init_cell = str(summary["init"])
        post_cell += f" ({summary['diff']:+})"
    header = ("Model", "It.", "Init.", "Post (diff)")
    row = (model, str(iteration), init_cell, post_cell)
    widths = [max(len(a), len(b)) for a, b in zip(header, row)]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
    lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"

"""Scoring harness: confusion counts against ground truth, binary metrics,
macro averages, and deterministic CSV/table reports.

Existence targets score a component's presence across all images. State
targets are binary too: the positive class is one designated label of one
component (for example "lowered" for a sun visor), and an image counts as
predicted-positive only when the component exists with exactly that state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import (
    ComponentOntology,
    ImageResult,
    ValidationError,
    iter_jsonl,
)


@dataclass(frozen=True)
class TruthEntry:
    """Ground truth for one image: presence per component, true label per
    state task."""

    image_id: str
    present: Mapping[str, bool] = field(default_factory=dict)
    states: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "present", dict(self.present))
        object.__setattr__(self, "states", dict(self.states))


GroundTruth = dict[str, TruthEntry]


def load_ground_truth(path: str | Path) -> GroundTruth:
    """Load JSON Lines ground truth keyed by image id."""
    truth: GroundTruth = {}
    for lineno, entry in iter_jsonl(path):
        if not isinstance(entry, dict) or "image_id" not in entry:
            raise ValidationError(f"{path}: line {lineno}: truth entry needs image_id")
        image_id = entry["image_id"]
        if image_id in truth:
            raise ValidationError(f"{path}: line {lineno}: duplicate truth for {image_id!r}")
        truth[image_id] = TruthEntry(
            image_id=image_id,
            present={k: bool(v) for k, v in entry.get("present", {}).items()},
            states=dict(entry.get("states", {})),
        )
    return truth


def validate_ground_truth(truth: GroundTruth, ontology: ComponentOntology) -> None:
    """Reject truth entries referencing components outside the ontology."""
    for entry in truth.values():
        for cid in list(entry.present) + list(entry.states):
            if cid not in ontology:
                raise ValidationError(
                    f"{entry.image_id}: ground truth references unknown component {cid!r}"
                )


@dataclass(frozen=True)
class StateTask:
    """A binary state judgment: positive iff the component exists in the
    designated state."""

    component: str
    positive_label: str

    @property
    def name(self) -> str:
        return f"{self.component}={self.positive_label}"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    precision: float
    recall: float
    f1: float


def _prediction(result: ImageResult, target: str | StateTask) -> bool:
    if isinstance(target, StateTask):
        record = result.record_for(target.component)
        return record is not None and record.exists == 1 and record.state == target.positive_label
    record = result.record_for(target)
    return record is not None and record.exists == 1


def _truth_positive(entry: TruthEntry, target: str | StateTask) -> bool:
    if isinstance(target, StateTask):
        return entry.states.get(target.component) == target.positive_label
    return bool(entry.present.get(target, False))


def confusion_counts(
    results: Iterable[ImageResult],
    truth: GroundTruth,
    target: str | StateTask,
    lenient: bool = False,
) -> ConfusionMatrix:
    """Tally one confusion cell per scored image for a target.

    Images missing from the ground truth abort with their ids, unless
    ``lenient`` is set, in which case they are excluded (the exclusion count
    is the difference between the input size and ``matrix.total``).
    """
    tp = fp = fn = tn = 0
    missing: list[str] = []
    for result in results:
        entry = truth.get(result.image_id)
        if entry is None:
            missing.append(result.image_id)
            continue
        predicted = _prediction(result, target)
        actual = _truth_positive(entry, target)
        if predicted and actual:
            tp += 1
        elif predicted and not actual:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    if missing and not lenient:
        raise ValidationError(f"images missing from ground truth: {missing}")
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


def binary_metrics(matrix: ConfusionMatrix) -> MetricsRow:
    """Accuracy, precision, recall, and F1 from one confusion matrix.

    Zero-count denominators score 0 rather than raising, so degenerate
    targets stay reportable.
    """
    if matrix.total == 0:
        raise ValidationError("cannot compute metrics for an empty confusion matrix")
    accuracy = (matrix.tp + matrix.tn) / matrix.total
    precision = matrix.tp / (matrix.tp + matrix.fp) if matrix.tp + matrix.fp else 0.0
    recall = matrix.tp / (matrix.tp + matrix.fn) if matrix.tp + matrix.fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall) if precision + recall else 0.0
    )
    return MetricsRow(accuracy=accuracy, precision=precision, recall=recall, f1=f1)


def macro_average(rows: Sequence[MetricsRow]) -> MetricsRow:
    """Unweighted mean of each metric across rows.

    Sums via fsum, so the result is independent of row order.
    """
    if not rows:
        raise ValidationError("cannot macro-average an empty list")
    n = len(rows)
    return MetricsRow(
        accuracy=math.fsum(row.accuracy for row in rows) / n,
        precision=math.fsum(row.precision for row in rows) / n,
        recall=math.fsum(row.recall for row in rows) / n,
        f1=math.fsum(row.f1 for row in rows) / n,
    )


REPORT_COLUMNS = ("accuracy", "precision", "recall", "f1")
_FOOTNOTE = "note: zero-count denominators score 0"


def report(rows: Sequence[tuple[str, MetricsRow]], fmt: str = "table") -> str:
    """Render named metric rows plus a macro 'Overall' row, 4 decimals.

    ``fmt`` is "csv" (machine-friendly, round-trips cleanly) or "table"
    (aligned text with a footnote about the zero-division convention).
    """
    if fmt not in ("csv", "table"):
        raise ValidationError(f"unknown report format {fmt!r}")
    if not rows:
        raise ValidationError("cannot report zero rows")
    overall = macro_average([row for _, row in rows])
    all_rows = list(rows) + [("Overall", overall)]
    formatted = [
        (name, *(f"{getattr(row, col):.4f}" for col in REPORT_COLUMNS))
        for name, row in all_rows
    ]
    if fmt == "csv":
        lines = ["target," + ",".join(REPORT_COLUMNS)]
        lines += [",".join(cells) for cells in formatted]
        return "\n".join(lines) + "\n"
    header = ("target", *REPORT_COLUMNS)
    widths = [
        max(len(header[col]), *(len(cells[col]) for cells in formatted))
        for col in range(len(header))
    ]

    def fmt_line(cells: Sequence[str]) -> str:
        name = cells[0].ljust(widths[0])
        numbers = (cells[i].rjust(widths[i]) for i in range(1, len(cells)))
        return "  ".join([name, *numbers])

    lines = [fmt_line(header)]
    lines.append("  ".join("-" * w for w in widths))
    lines += [fmt_line(cells) for cells in formatted]
    lines.append(_FOOTNOTE)
    return "\n".join(lines) + "\n"

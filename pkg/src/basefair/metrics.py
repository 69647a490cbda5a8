"""Exact equalized-odds distance metrics.

All rates are kept as integer ``(correct, total)`` pairs and only divided
when read, so aggregation never accumulates rounding error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np

from basefair.errors import EmptyInputError, MissingGroupError

log = logging.getLogger(__name__)

# (protected, target)
GroupKey = Tuple[int, int]

MISSING_MODES = ("error", "skip")


@dataclass(frozen=True)
class OutputBatch:
    """Model outputs with their target classes and protected demographics."""

    outputs: np.ndarray
    targets: np.ndarray
    protected: np.ndarray

    def __post_init__(self):
        outputs = np.asarray(self.outputs, dtype=float)
        targets = np.asarray(self.targets, dtype=np.int64)
        protected = np.asarray(self.protected, dtype=np.int64)
        if outputs.ndim != 2:
            raise ValueError(f"outputs must be 2-D (samples x classes), got shape {outputs.shape}")
        if not (len(outputs) == len(targets) == len(protected)):
            raise ValueError(
                f"length mismatch: {len(outputs)} outputs, {len(targets)} targets, "
                f"{len(protected)} protected labels"
            )
        if outputs.shape[1] < 2:
            raise ValueError("output vectors need at least 2 classes")
        if len(targets) and (targets.min() < 0 or targets.max() >= outputs.shape[1]):
            raise ValueError("target index out of range for output width")
        if len(protected) and protected.min() < 0:
            raise ValueError("protected indices must be non-negative")
        object.__setattr__(self, "outputs", outputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "protected", protected)

    def __len__(self):
        return len(self.targets)

    @property
    def num_classes(self) -> int:
        return self.outputs.shape[1]

    def with_outputs(self, outputs) -> "OutputBatch":
        return OutputBatch(outputs, self.targets, self.protected)


def accuracy_indicator(output: Sequence[float], target_index: int) -> int:
    """1 if ``output[target_index]`` is strictly larger than every other entry.

    Ties count as incorrect.
    """
    output = np.asarray(output, dtype=float)
    if output.ndim != 1 or output.size < 2:
        raise ValueError("output must be a vector with at least 2 elements")
    if not 0 <= target_index < output.size:
        raise ValueError(f"target index {target_index} out of range for {output.size} classes")
    others = np.delete(output, target_index)
    return int(output[target_index] > others.max())


def correct_mask(outputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised accuracy_indicator over a batch."""
    outputs = np.asarray(outputs, dtype=float)
    rows = np.arange(len(outputs))
    target_vals = outputs[rows, targets]
    masked = outputs.copy()
    masked[rows, targets] = -np.inf
    return target_vals > masked.max(axis=1)


@dataclass(frozen=True)
class GroupAccuracyTable:
    """Correct/total counts per (protected, target) cell and per demographic."""

    cells: Mapping[GroupKey, Tuple[int, int]]
    demographics: Mapping[int, Tuple[int, int]]

    def rate(self, key: GroupKey) -> float:
        try:
            correct, total = self.cells[key]
        except KeyError:
            raise MissingGroupError(key) from None
        return correct / total

    def demographic_rate(self, a: int) -> float:
        correct, total = self.demographics[a]
        return correct / total

    @property
    def classes(self) -> list:
        return sorted({y for _, y in self.cells})

    @property
    def protected_values(self) -> list:
        return sorted(self.demographics)

    @classmethod
    def from_rates(cls, rates: Mapping[GroupKey, float], total: int = 1000) -> "GroupAccuracyTable":
        """Build a table from rates; each rate is rounded to ``k/total``."""
        cells = {}
        demo: Dict[int, list] = {}
        for key, r in rates.items():
            correct = int(round(r * total))
            cells[key] = (correct, total)
            acc = demo.setdefault(key[0], [0, 0])
            acc[0] += correct
            acc[1] += total
        return cls(cells, {a: tuple(v) for a, v in demo.items()})


def group_accuracy_table(batch: OutputBatch) -> GroupAccuracyTable:
    if len(batch) == 0:
        raise EmptyInputError("cannot tabulate accuracy of an empty batch")
    correct = correct_mask(batch.outputs, batch.targets)
    cells: Dict[GroupKey, list] = {}
    demo: Dict[int, list] = {}
    for a, y, c in zip(batch.protected.tolist(), batch.targets.tolist(), correct.tolist()):
        cell = cells.setdefault((a, y), [0, 0])
        cell[0] += c
        cell[1] += 1
        d = demo.setdefault(a, [0, 0])
        d[0] += c
        d[1] += 1
    return GroupAccuracyTable(
        {k: tuple(v) for k, v in sorted(cells.items())},
        {k: tuple(v) for k, v in sorted(demo.items())},
    )


def deo(table: GroupAccuracyTable, a: int, a_prime: int, y: int) -> float:
    """Absolute gap in correct-prediction rate between two demographics at class ``y``."""
    return abs(table.rate((a, y)) - table.rate((a_prime, y)))


def _per_class_gaps(table: GroupAccuracyTable, on_missing: str) -> list:
    if on_missing not in MISSING_MODES:
        raise ValueError(f"on_missing must be one of {MISSING_MODES}, got {on_missing!r}")
    demographics = table.protected_values
    gaps = []
    for y in table.classes:
        rates = []
        for a in demographics:
            if (a, y) in table.cells:
                rates.append(table.rate((a, y)))
            elif on_missing == "error":
                raise MissingGroupError((a, y))
            else:
                log.warning("skipping empty group (protected=%d, target=%d)", a, y)
        if len(rates) < 2:
            if on_missing == "error":
                raise MissingGroupError(
                    (demographics[0] if demographics else -1, y),
                    f"class {y} has fewer than two demographics; DEO is undefined",
                )
            log.warning("skipping class %d: fewer than two demographics present", y)
            continue
        gaps.append(max(rates) - min(rates))
    if not gaps:
        raise MissingGroupError((-1, -1), "no class has two or more demographics")
    return gaps


def deo_max(table: GroupAccuracyTable, on_missing: str = "error") -> float:
    """Largest DEO over all classes and demographic pairs."""
    return max(_per_class_gaps(table, on_missing))


def deo_avg(table: GroupAccuracyTable, on_missing: str = "error") -> float:
    """Per-class worst DEO, averaged over classes."""
    gaps = _per_class_gaps(table, on_missing)
    return math.fsum(gaps) / len(gaps)


def sigma_acc(per_demographic_rates: Iterable[float]) -> float:
    """Population standard deviation of per-demographic accuracy."""
    rates = [float(r) for r in per_demographic_rates]
    if not rates:
        raise EmptyInputError("sigma_acc needs at least one rate")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rate {r} outside [0, 1]")
    if min(rates) == max(rates):
        # the rounded mean of identical values need not equal them exactly
        return 0.0
    mu = math.fsum(rates) / len(rates)
    return math.sqrt(math.fsum((r - mu) ** 2 for r in rates) / len(rates))


@dataclass(frozen=True)
class MetricsReport:
    overall_accuracy: float
    per_demographic_accuracy: Dict[int, float]
    sigma_acc: float
    deo_max: float
    deo_avg: float
    sample_counts: Dict[GroupKey, int] = field(default_factory=dict)
    group_accuracy: Dict[GroupKey, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready form used in report files."""
        return {
            "acc": self.overall_accuracy,
            "sigma_acc": self.sigma_acc,
            "deo_max": self.deo_max,
            "deo_avg": self.deo_avg,
            "per_group": {
                "demographic_accuracy": {str(a): r for a, r in self.per_demographic_accuracy.items()},
                "cells": [
                    {
                        "protected": a,
                        "target": y,
                        "count": self.sample_counts[(a, y)],
                        "accuracy": self.group_accuracy[(a, y)],
                    }
                    for a, y in sorted(self.sample_counts)
                ],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        cells = d["per_group"]["cells"]
        return cls(
            overall_accuracy=d["acc"],
            per_demographic_accuracy={
                int(a): r for a, r in d["per_group"]["demographic_accuracy"].items()
            },
            sigma_acc=d["sigma_acc"],
            deo_max=d["deo_max"],
            deo_avg=d["deo_avg"],
            sample_counts={(c["protected"], c["target"]): c["count"] for c in cells},
            group_accuracy={(c["protected"], c["target"]): c["accuracy"] for c in cells},
        )


def compute_report(batch: OutputBatch, on_missing: str = "error") -> MetricsReport:
    table = group_accuracy_table(batch)
    correct = sum(c for c, _ in table.cells.values())
    total = sum(t for _, t in table.cells.values())
    per_demo = {a: table.demographic_rate(a) for a in table.protected_values}
    return MetricsReport(
        overall_accuracy=correct / total,
        per_demographic_accuracy=per_demo,
        sigma_acc=sigma_acc(per_demo.values()),
        deo_max=deo_max(table, on_missing),
        deo_avg=deo_avg(table, on_missing),
        sample_counts={k: t for k, (_, t) in table.cells.items()},
        group_accuracy={k: table.rate(k) for k in table.cells},
    )

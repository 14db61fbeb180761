"""Class-incremental accuracy metrics and CSV reports."""

import csv
import io
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from mergecl.errors import InputError

logger = logging.getLogger(__name__)

REPORT_HEADER = ["task", "acc_seen", "last_acc", "inc_acc", "strategy", "lambda", "seed"]
SWEEP_HEADER = ["lambda", "seed", "strategy", "last_acc", "inc_acc"]

# Accuracy (%) on the pooled test sets of tasks 1..t, one entry per task t.
AccMatrix = Sequence[float]


def accuracy(predictions: ArrayLike, labels: ArrayLike) -> float:
    predictions, labels = np.asarray(predictions).ravel(), np.asarray(labels).ravel()
    if len(labels) == 0:
        raise InputError("accuracy of an empty set is undefined")
    if len(predictions) != len(labels):
        raise InputError(f"{len(predictions)} predictions for {len(labels)} labels")
    correct = int(np.count_nonzero(predictions == labels))
    return 100.0 * correct / len(labels)


def _checked(matrix: AccMatrix) -> list[float]:
    values = [float(v) for v in matrix]
    if not values:
        raise InputError("accuracy matrix is empty")
    if any(not 0.0 <= v <= 100.0 for v in values):
        raise InputError("accuracies must lie in [0, 100]")
    return values


def last_acc(matrix: AccMatrix) -> float:
    return _checked(matrix)[-1]


def inc_acc(matrix: AccMatrix) -> float:
    values = _checked(matrix)
    return sum(values) / len(values)


def _number(value: float) -> str:
    return repr(float(value))


def format_report_csv(report) -> str:
    """One row per task (running inc_acc) and a summary row tagged 'all'."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    common = [report.strategy, _number(report.lam), str(report.seed)]
    for t, acc in enumerate(report.acc_seen, start=1):
        writer.writerow([t, _number(acc), "", _number(inc_acc(report.acc_seen[:t])), *common])
    writer.writerow(["all", _number(report.last_acc), _number(report.last_acc), _number(report.inc_acc), *common])
    return buffer.getvalue()


def write_report_csv(report, path: Union[str, Path]) -> None:
    Path(path).write_text(format_report_csv(report), encoding="utf-8")


def write_sweep_csv(rows: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow(
                [_number(row["lambda"]), row["seed"], row["strategy"], _number(row["last_acc"]), _number(row["inc_acc"])]
            )
    logger.info("wrote %d sweep rows to %s", len(rows), path)


def significant(value: float, digits: int = 6) -> str:
    """Console formatting: `digits` significant digits."""
    return f"{value:.{digits}g}"

import csv
import io
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from mergecl.errors import InputError
from mergecl.metrics import (
    REPORT_HEADER,
    SWEEP_HEADER,
    accuracy,
    format_report_csv,
    inc_acc,
    last_acc,
    significant,
    write_sweep_csv,
)


def test_accuracy_hand_cases():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert accuracy([0, 1, 0, 1], [0, 0, 0, 0]) == 50.0


def test_accuracy_matches_a_brute_force_count():
    rng = np.random.default_rng(0)
    predictions = rng.integers(0, 5, size=1000)
    labels = rng.integers(0, 5, size=1000)

    correct = sum(1 for p, y in zip(predictions, labels) if p == y)

    assert accuracy(predictions, labels) == 100.0 * correct / 1000


def test_accuracy_rejects_empty_and_ragged_inputs():
    with pytest.raises(InputError):
        accuracy([], [])
    with pytest.raises(InputError):
        accuracy([1, 2], [1])


def test_last_and_incremental_accuracy():
    assert last_acc([90.0, 80.0, 70.0]) == 70.0
    assert inc_acc([90.0, 80.0, 70.0]) == 80.0
    assert last_acc([42.0]) == 42.0
    assert inc_acc([55.0] * 4) == 55.0


def test_incremental_accuracy_is_the_mean_and_bounded():
    values = list(np.random.default_rng(1).uniform(0, 100, size=17))

    assert abs(inc_acc(values) - sum(values) / len(values)) < 1e-14
    assert min(values) <= inc_acc(values) <= max(values)


def test_metrics_reject_empty_and_out_of_range_matrices():
    with pytest.raises(InputError):
        last_acc([])
    with pytest.raises(InputError):
        inc_acc([101.0])


def test_report_csv_has_one_row_per_task_and_a_summary():
    report = SimpleNamespace(
        strategy="coma", lam=0.5, seed=3, acc_seen=[100.0, 75.0], last_acc=75.0, inc_acc=87.5
    )

    rows = list(csv.reader(io.StringIO(format_report_csv(report))))

    assert rows[0] == REPORT_HEADER
    assert rows[1] == ["1", "100.0", "", "100.0", "coma", "0.5", "3"]
    assert rows[2] == ["2", "75.0", "", "87.5", "coma", "0.5", "3"]
    assert rows[3] == ["all", "75.0", "75.0", "87.5", "coma", "0.5", "3"]


def test_sweep_csv_is_long_form(tmp_path: Path):
    path = tmp_path / "sweep.csv"
    rows = [
        {"lambda": 0.0, "seed": 0, "strategy": "coma", "last_acc": 50.0, "inc_acc": 70.0},
        {"lambda": 1.0, "seed": 0, "strategy": "coma", "last_acc": 40.0, "inc_acc": 65.0},
    ]

    write_sweep_csv(rows, path)

    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER)
    assert lines[2] == "1.0,0,coma,40.0,65.0"


def test_significant_uses_six_digits():
    assert significant(1 / 3) == "0.333333"
    assert significant(123456789.0) == "1.23457e+08"

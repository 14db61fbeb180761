from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from mergecl.errors import InputError, ParseError
from mergecl.taskstream import (
    LabeledDataset,
    Task,
    TaskStream,
    frozen_feature_projection,
    load_csv_stream,
    read_csv_dataset,
    write_csv_stream,
)


def test_gaussian_stream_has_disjoint_tasks(make_stream: Callable[..., TaskStream]):
    stream = make_stream(num_tasks=3, classes_per_task=2, samples_per_class=20)

    assert len(stream) == 3
    assert [task.class_set for task in stream] == [[0, 1], [2, 3], [4, 5]]
    for task in stream:
        assert len(task.train) == 32
        assert len(task.test) == 8


def test_gaussian_stream_is_deterministic(make_stream: Callable[..., TaskStream]):
    first = make_stream(seed=4)
    second = make_stream(seed=4)

    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.train.features, b.train.features)
        np.testing.assert_array_equal(a.test.labels, b.test.labels)


def test_class_data_does_not_depend_on_task_count(make_stream: Callable[..., TaskStream]):
    short = make_stream(num_tasks=1)
    long = make_stream(num_tasks=4)

    np.testing.assert_array_equal(short.tasks[0].train.features, long.tasks[0].train.features)


def test_stream_rejects_repeated_classes():
    data = LabeledDataset(np.zeros((2, 2)), [0, 1])

    with pytest.raises(InputError):
        TaskStream((Task(data, data), Task(data, data)))


def test_seen_test_pools_splits_in_task_order(make_stream: Callable[..., TaskStream]):
    stream = make_stream(num_tasks=3)

    seen = stream.seen_test(2)

    assert len(seen) == len(stream.tasks[0].test) + len(stream.tasks[1].test)
    assert seen.class_set == [0, 1, 2, 3]


def test_csv_round_trip_keeps_values(tmp_path: Path, make_stream: Callable[..., TaskStream]):
    stream = make_stream(num_tasks=2)
    train_path, test_path = tmp_path / "train.csv", tmp_path / "test.csv"
    write_csv_stream(stream, train_path, test_path)

    loaded = load_csv_stream(train_path, [[0, 1], [2, 3]], test_path=test_path)

    for original, reloaded in zip(stream, loaded):
        np.testing.assert_array_equal(original.train.features, reloaded.train.features)
        np.testing.assert_array_equal(original.test.labels, reloaded.test.labels)


def test_csv_without_test_file_is_split_per_class(tmp_path: Path):
    path = tmp_path / "data.csv"
    rows = [f"{c},{i}.0,{c}.5" for c in (0, 1) for i in range(10)]
    path.write_text("\n".join(rows) + "\n")

    stream = load_csv_stream(path, [[0], [1]])

    assert [len(task.train) for task in stream] == [8, 8]
    assert [len(task.test) for task in stream] == [2, 2]


def test_csv_parse_error_reports_the_line(tmp_path: Path):
    path = tmp_path / "bad.csv"
    path.write_text("0,1.0,2.0\n1,abc,2.0\n")

    with pytest.raises(ParseError) as excinfo:
        read_csv_dataset(path)

    assert excinfo.value.line == 2


def test_csv_ragged_rows_are_rejected(tmp_path: Path):
    path = tmp_path / "ragged.csv"
    path.write_text("0,1.0,2.0\n1,3.0\n")

    with pytest.raises(ParseError, match="line 2"):
        read_csv_dataset(path)


def test_csv_labels_outside_the_partition_are_rejected(tmp_path: Path):
    path = tmp_path / "data.csv"
    path.write_text("0,1.0\n0,2.0\n5,1.0\n5,3.0\n")

    with pytest.raises(InputError, match="5"):
        load_csv_stream(path, [[0]])


def test_projection_applies_one_fixed_matrix(make_stream: Callable[..., TaskStream]):
    stream = make_stream(num_tasks=2, feature_dim=4)
    matrix = np.eye(3, 4)

    projected = frozen_feature_projection(stream, 3, seed=0, matrix=matrix)

    np.testing.assert_allclose(projected.tasks[1].test.features, np.tanh(stream.tasks[1].test.features[:, :3]))
    with pytest.raises(InputError):
        frozen_feature_projection(stream, 2, seed=0, matrix=matrix)

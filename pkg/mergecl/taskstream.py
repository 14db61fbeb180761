"""Class-incremental task streams: synthetic Gaussian blobs and CSV ingestion."""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike
from pydantic import ConfigDict
from sqlmodel import Field, SQLModel

from mergecl.errors import InputError, ParseError

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.2


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, ndmin=2)
        labels = np.array(self.labels, dtype=np.int64).ravel()
        if len(labels) < 1:
            raise InputError("a dataset needs at least one sample")
        if features.shape[0] != len(labels):
            raise InputError(f"{features.shape[0]} feature rows for {len(labels)} labels")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_set(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def of_class(self, class_id: int) -> np.ndarray:
        return self.features[self.labels == class_id]

    def with_features(self, features: ArrayLike) -> "LabeledDataset":
        return LabeledDataset(features, self.labels)


def concat_datasets(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    if not datasets:
        raise InputError("nothing to concatenate")
    return LabeledDataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
    )


@dataclass(frozen=True)
class Task:
    train: LabeledDataset
    test: LabeledDataset

    @property
    def class_set(self) -> list[int]:
        return self.train.class_set


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for index, task in enumerate(self.tasks, start=1):
            if task.train.class_set != task.test.class_set:
                raise InputError(f"task {index}: train and test class sets differ")
            overlap = seen.intersection(task.class_set)
            if overlap:
                raise InputError(f"task {index} repeats classes {sorted(overlap)}")
            seen.update(task.class_set)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def feature_dim(self) -> int:
        return self.tasks[0].train.feature_dim

    def seen_test(self, upto: int) -> LabeledDataset:
        """Union of the test splits of tasks 1..upto."""
        return concat_datasets([task.test for task in self.tasks[:upto]])


class StreamConfig(SQLModel):
    model_config = ConfigDict(extra="forbid")

    num_tasks: int = Field(default=5, ge=1)
    classes_per_task: int = Field(default=2, ge=1)
    samples_per_class: int = Field(default=100, ge=2)
    feature_dim: int = Field(default=20, ge=1)
    class_separation: float = Field(default=2.5, gt=0)
    within_class_std: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)
    projection_dim: Optional[int] = Field(default=None, ge=1)


def _split_indices(count: int, seed: int, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 80/20 split of one class, keyed on (seed, class id) only."""
    num_test = max(1, int(round(TEST_FRACTION * count)))
    order = np.random.default_rng([seed, 2, class_id]).permutation(count)
    return np.sort(order[num_test:]), np.sort(order[:num_test])


def _split_class_rows(
    features: np.ndarray, class_id: int, seed: int
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    train_idx, test_idx = _split_indices(len(features), seed, class_id)
    labels = np.full(len(features), class_id)
    return (features[train_idx], labels[train_idx]), (features[test_idx], labels[test_idx])


def _assemble(parts: list[tuple[np.ndarray, np.ndarray]]) -> LabeledDataset:
    return LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def gen_gaussian_stream(config: StreamConfig) -> TaskStream:
    """Gaussian blobs: class means on a sphere of radius `class_separation`."""
    tasks = []
    for task_index in range(config.num_tasks):
        train_parts, test_parts = [], []
        for offset in range(config.classes_per_task):
            class_id = task_index * config.classes_per_task + offset
            rng = np.random.default_rng([config.seed, 1, class_id])
            direction = rng.normal(size=config.feature_dim)
            mean = config.class_separation * direction / np.linalg.norm(direction)
            samples = mean + config.within_class_std * rng.normal(
                size=(config.samples_per_class, config.feature_dim)
            )
            train, test = _split_class_rows(samples, class_id, config.seed)
            train_parts.append(train)
            test_parts.append(test)
        tasks.append(Task(_assemble(train_parts), _assemble(test_parts)))
    stream = TaskStream(tuple(tasks))
    if config.projection_dim is not None:
        stream = frozen_feature_projection(stream, config.projection_dim, config.seed)
    logger.debug("generated %d-task gaussian stream (seed %d)", config.num_tasks, config.seed)
    return stream


def _read_csv_rows(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    labels, rows = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as handle:
        for line_number, record in enumerate(csv.reader(handle), start=1):
            if not record:
                continue
            if len(record) < 2:
                raise ParseError("expected 'label,f1,...,fd'", line_number)
            try:
                label = int(record[0])
                values = [float(v) for v in record[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line_number) from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(f"expected {width} features, found {len(values)}", line_number)
            if not np.all(np.isfinite(values)):
                raise ParseError("non-finite feature value", line_number)
            labels.append(label)
            rows.append(values)
    if not rows:
        raise InputError(f"{path} holds no rows")
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def read_csv_dataset(path: Union[str, Path]) -> LabeledDataset:
    """One dataset from a 'label,f1,...,fd' file, rows in file order."""
    features, labels = _read_csv_rows(path)
    return LabeledDataset(features, labels)


def _check_partition(task_partition: Sequence[Sequence[int]], labels: np.ndarray) -> None:
    flat = [int(c) for part in task_partition for c in part]
    if len(set(flat)) != len(flat):
        raise InputError("task partition repeats a class")
    outside = sorted(set(labels.tolist()) - set(flat))
    if outside:
        raise InputError(f"labels {outside} are outside the task partition")


def load_csv_stream(
    path: Union[str, Path],
    task_partition: Sequence[Sequence[int]],
    test_path: Optional[Union[str, Path]] = None,
    seed: int = 0,
) -> TaskStream:
    """Read 'label,f1,...,fd' rows and cut them into tasks by class.

    Without `test_path`, every class is split 80/20 with the generator's rule.
    """
    features, labels = _read_csv_rows(path)
    _check_partition(task_partition, labels)
    if test_path is not None:
        test_features, test_labels = _read_csv_rows(test_path)
        _check_partition(task_partition, test_labels)
    tasks = []
    for part in task_partition:
        classes = [int(c) for c in part]
        if test_path is not None:
            train_rows = np.isin(labels, classes)
            test_rows = np.isin(test_labels, classes)
            if not train_rows.any() or not test_rows.any():
                raise InputError(f"task with classes {classes} has no rows")
            train = LabeledDataset(features[train_rows], labels[train_rows])
            test = LabeledDataset(test_features[test_rows], test_labels[test_rows])
        else:
            train_parts, test_parts = [], []
            for class_id in classes:
                class_rows = features[labels == class_id]
                if len(class_rows) == 0:
                    raise InputError(f"class {class_id} has no rows")
                train_part, test_part = _split_class_rows(class_rows, class_id, seed)
                train_parts.append(train_part)
                test_parts.append(test_part)
            train, test = _assemble(train_parts), _assemble(test_parts)
        tasks.append(Task(train, test))
    return TaskStream(tuple(tasks))


def write_csv_dataset(dataset: LabeledDataset, path: Union[str, Path], append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label), *(repr(float(v)) for v in row)])


def write_csv_stream(stream: TaskStream, train_path: Union[str, Path], test_path: Union[str, Path]) -> None:
    for index, task in enumerate(stream.tasks):
        write_csv_dataset(task.train, train_path, append=index > 0)
        write_csv_dataset(task.test, test_path, append=index > 0)


def frozen_feature_projection(
    stream: TaskStream,
    proj_dim: int,
    seed: int,
    matrix: Optional[ArrayLike] = None,
) -> TaskStream:
    """Replace every feature vector x by tanh(R x) with one fixed matrix R."""
    if proj_dim < 1:
        raise InputError("proj_dim must be at least 1")
    if matrix is None:
        rng = np.random.default_rng([seed, 3])
        matrix = rng.normal(0.0, 1.0 / np.sqrt(stream.feature_dim), size=(proj_dim, stream.feature_dim))
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (proj_dim, stream.feature_dim):
        raise InputError(f"projection matrix must be {proj_dim}x{stream.feature_dim}")

    def project(dataset: LabeledDataset) -> LabeledDataset:
        return dataset.with_features(np.tanh(dataset.features @ matrix.T))

    return TaskStream(tuple(Task(project(t.train), project(t.test)) for t in stream.tasks))

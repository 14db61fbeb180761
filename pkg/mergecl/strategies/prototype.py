"""Nearest-prototype baseline: cosine similarity to per-class mean features of a frozen backbone."""

import time
from collections.abc import Mapping

import numpy as np
from numpy.typing import ArrayLike

from mergecl.errors import InputError
from mergecl.model import ClassifierModel
from mergecl.strategies.report import ExperimentReport, TaskSnapshot
from mergecl.taskstream import TaskStream


def class_prototypes(model: ClassifierModel, features: ArrayLike, labels: ArrayLike) -> dict[int, np.ndarray]:
    embedded = model.features(features).data
    labels = np.asarray(labels)
    return {int(c): embedded[labels == c].mean(axis=0) for c in np.unique(labels)}


def cosine_predict(prototypes: Mapping[int, np.ndarray], embedded: np.ndarray) -> np.ndarray:
    """Argmax cosine similarity; zero-norm vectors score -inf, and a row of -inf picks the lowest class id."""
    if not prototypes:
        raise InputError("no prototypes to compare against")
    class_ids = np.array(sorted(prototypes))
    matrix = np.stack([prototypes[c] for c in class_ids])
    proto_norms = np.linalg.norm(matrix, axis=1)
    feature_norms = np.linalg.norm(embedded, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        similarity = (embedded @ matrix.T) / np.outer(feature_norms, proto_norms)
    similarity[:, proto_norms == 0.0] = -np.inf
    similarity[feature_norms == 0.0, :] = -np.inf
    return class_ids[np.argmax(similarity, axis=1)]


def prototype_classifier(
    stream: TaskStream, backbone: ClassifierModel, *, seed: int = 0, config_hash: str = ""
) -> ExperimentReport:
    report = ExperimentReport("prototype", 0.0, seed, config_hash)
    prototypes: dict[int, np.ndarray] = {}
    for t, task in enumerate(stream, start=1):
        started = time.perf_counter()
        prototypes.update(class_prototypes(backbone, task.train.features, task.train.labels))
        frozen = dict(prototypes)
        report.record(
            stream,
            lambda x: cosine_predict(frozen, backbone.features(x).data),
            TaskSnapshot(t, backbone),
            time.perf_counter() - started,
            merges=0,
        )
    return report

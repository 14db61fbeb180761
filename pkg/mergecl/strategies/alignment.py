"""Post-hoc classifier alignment on features sampled from per-class Gaussians."""

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from mergecl.autodiff import (
    GradTape,
    ParamSet,
    Tensor,
    backward,
    normalize_rows,
    softmax_cross_entropy,
)
from mergecl.config import TrainConfig
from mergecl.errors import InputError, NumericalError, UsageError
from mergecl.model import ClassifierModel, head_logits
from mergecl.strategies.training import sgd_step
from mergecl.taskstream import LabeledDataset

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10


@dataclass(frozen=True)
class ClassStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        covariance = np.array(self.covariance, dtype=np.float64, ndmin=2)
        if covariance.shape != (mean.size, mean.size):
            raise InputError(f"covariance of shape {covariance.shape} for a {mean.size}-dim mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", clip_to_psd(covariance))


def clip_to_psd(covariance: np.ndarray) -> np.ndarray:
    """Symmetrise and clip rounding-level negative eigenvalues to zero."""
    symmetric = 0.5 * (covariance + covariance.T)
    eigenvalues, vectors = np.linalg.eigh(symmetric)
    if eigenvalues.size and eigenvalues.min() < -PSD_TOLERANCE:
        raise NumericalError(f"covariance has eigenvalue {eigenvalues.min():.3g} below zero")
    if eigenvalues.size and eigenvalues.min() >= 0.0:
        return symmetric
    clipped = (vectors * np.maximum(eigenvalues, 0.0)) @ vectors.T
    return 0.5 * (clipped + clipped.T)


def collect_class_stats(model: ClassifierModel, dataset: LabeledDataset) -> dict[int, ClassStats]:
    """Mean and covariance of the model's features for every class in `dataset`."""
    features = model.features(dataset.features).data
    stats = {}
    for class_id in dataset.class_set:
        rows = features[dataset.labels == class_id]
        covariance = np.cov(rows, rowvar=False) if len(rows) > 1 else np.zeros((rows.shape[1], rows.shape[1]))
        stats[class_id] = ClassStats(rows.mean(axis=0), np.atleast_2d(covariance))
    return stats


def sample_class_features(
    stats: ClassStats, count: int, rng: np.random.Generator, jitter: float = 1e-6
) -> np.ndarray:
    dim = stats.mean.size
    try:
        factor = np.linalg.cholesky(stats.covariance + jitter * np.eye(dim))
    except np.linalg.LinAlgError:
        raise NumericalError("Cholesky factorisation of the class covariance failed") from None
    return stats.mean + rng.standard_normal((count, dim)) @ factor.T


def classifier_alignment(
    model: ClassifierModel,
    class_stats: Mapping[int, ClassStats],
    config: TrainConfig,
    *,
    seed_key: int = 0,
) -> ParamSet:
    """Retrain the head rows on sampled features with norm-scaled logits; returns the head only."""
    missing = [c for c in model.head.class_ids if c not in class_stats]
    if missing:
        raise UsageError(f"no feature statistics for classes {missing}")
    rng = np.random.default_rng([config.seed, 5, seed_key])
    samples, labels = [], []
    for class_id in model.head.class_ids:
        samples.append(
            sample_class_features(class_stats[class_id], config.ca_samples_per_class, rng, config.ca_cov_jitter)
        )
        labels.append(np.full(config.ca_samples_per_class, class_id))
    features = np.concatenate(samples)
    targets = model.head.index_of(np.concatenate(labels))
    head = model.params.subset(model.head_names)
    rates = {name: config.lr_head for name in head}
    for _ in range(config.ca_epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            tape = GradTape()
            logits = head_logits(model.head, tape.watch(head), Tensor(features[batch]))
            loss = softmax_cross_entropy(normalize_rows(logits, config.ca_temperature), targets[batch])
            head = sgd_step(head, backward(tape, loss), rates)
    logger.debug("aligned %d head rows on %d sampled features", len(model.head), len(features))
    return head


def aligned_model(model: ClassifierModel, head: ParamSet) -> ClassifierModel:
    return model.with_params(model.params.updated(head))

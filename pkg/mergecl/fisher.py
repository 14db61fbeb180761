"""Diagonal Fisher information of the classifier's predictive distribution."""

import logging
from collections.abc import Iterable, Mapping
from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from mergecl.autodiff import GradTape, ParamSet, softmax
from mergecl.errors import InputError
from mergecl.model import ClassifierModel
from mergecl.taskstream import LabeledDataset

logger = logging.getLogger(__name__)

FISHER_SUFFIX = ".fisher"
DEFAULT_EPSILON = 1e-8


class FisherDiag(ParamSet):
    """Nonnegative per-parameter Fisher values, aligned with a ParamSet."""

    __slots__ = ()

    def __init__(
        self,
        entries: Union[Mapping[str, ArrayLike], Iterable[tuple[str, ArrayLike]]] = (),
    ):
        super().__init__(entries)
        for name, array in self.items():
            if not np.all(np.isfinite(array)) or np.any(array < 0.0):
                raise InputError(f"Fisher entry {name!r} must be finite and nonnegative")


def _logit_jacobian(model: ClassifierModel, row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and the K×P Jacobian of the logits for one input."""
    tape = GradTape()
    logits = model.logits(row[None, :], tape)
    num_classes = model.num_classes
    jacobian = np.empty((num_classes, model.params.size))
    for k in range(num_classes):
        cotangent = np.zeros((1, num_classes))
        cotangent[0, k] = 1.0
        jacobian[k] = tape.vjp(logits, cotangent).flat()
    return softmax(logits.data)[0], jacobian


def _score_rows(probs: np.ndarray, jacobian: np.ndarray) -> np.ndarray:
    # d log p_k = d z_k - sum_j p_j d z_j
    return jacobian - probs @ jacobian


def _check_inputs(model: ClassifierModel, data: LabeledDataset) -> None:
    if len(data) == 0:
        raise InputError("Fisher estimation needs at least one sample")
    if model.num_classes < 1:
        raise InputError("Fisher estimation needs a non-empty head")


def estimate_fisher_exact(model: ClassifierModel, data: LabeledDataset) -> FisherDiag:
    """Diagonal Fisher with the label expectation taken exactly over all classes."""
    _check_inputs(model, data)
    accumulated = np.zeros(model.params.size)
    for row in data.features:
        probs, jacobian = _logit_jacobian(model, row)
        scores = _score_rows(probs, jacobian)
        accumulated += probs @ (scores * scores)
    logger.debug("exact Fisher over %d samples, %d parameters", len(data), model.params.size)
    return FisherDiag(ParamSet.from_flat(accumulated / len(data), model.params))


def estimate_fisher_mc(
    model: ClassifierModel, data: LabeledDataset, samples_per_point: int, seed: int
) -> FisherDiag:
    """Diagonal Fisher with labels sampled from the model's own predictive distribution."""
    if samples_per_point < 1:
        raise InputError("samples_per_point must be at least 1")
    _check_inputs(model, data)
    rng = np.random.default_rng(seed)
    accumulated = np.zeros(model.params.size)
    for row in data.features:
        probs, jacobian = _logit_jacobian(model, row)
        scores = _score_rows(probs, jacobian)
        draws = rng.choice(len(probs), size=samples_per_point, p=probs / probs.sum())
        frequencies = np.bincount(draws, minlength=len(probs)) / samples_per_point
        accumulated += frequencies @ (scores * scores)
    return FisherDiag(ParamSet.from_flat(accumulated / len(data), model.params))


def fisher_floor(fisher: Mapping[str, np.ndarray], epsilon: float) -> FisherDiag:
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    return FisherDiag((name, np.maximum(array, epsilon)) for name, array in fisher.items())


def tag_fisher(fisher: FisherDiag) -> dict[str, np.ndarray]:
    """Entry names as stored on disk."""
    return {name + FISHER_SUFFIX: array for name, array in fisher.items()}


def untag_fisher(entries: Mapping[str, np.ndarray]) -> FisherDiag:
    return FisherDiag(
        (name[: -len(FISHER_SUFFIX)], array) for name, array in entries.items() if name.endswith(FISHER_SUFFIX)
    )

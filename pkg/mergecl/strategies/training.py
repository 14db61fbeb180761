import logging
from collections.abc import Callable, Mapping
from typing import Optional

import numpy as np

from mergecl.autodiff import (
    GradTape,
    ParamSet,
    Tensor,
    add,
    backward,
    mul,
    scale,
    softmax_cross_entropy,
    square,
    sub,
    total,
)
from mergecl.config import TrainConfig
from mergecl.errors import AlignmentError, InputError
from mergecl.fisher import FisherDiag
from mergecl.model import ClassifierModel, expand_head
from mergecl.taskstream import LabeledDataset

logger = logging.getLogger(__name__)

Penalty = Callable[[GradTape, ParamSet], Tensor]
StepHook = Callable[[ParamSet], None]


def ewc_penalty(
    theta: ParamSet,
    theta_anchor: Mapping[str, np.ndarray],
    fisher_anchor: FisherDiag,
    ewc_lambda: float,
    tape: Optional[GradTape] = None,
) -> Tensor:
    """(ewc_lambda / 2) * sum_j F_j (theta_j - anchor_j)^2 over the anchor's entries.

    With a tape, the result is differentiable through `theta`.
    """
    if ewc_lambda < 0:
        raise InputError("ewc_lambda must be nonnegative")
    values = tape.watch(theta) if tape is not None else {n: Tensor(a) for n, a in theta.items()}
    terms = []
    for name in sorted(theta_anchor):
        if name not in theta or theta[name].shape != np.shape(theta_anchor[name]):
            raise AlignmentError(f"EWC anchor entry {name!r} does not match the parameters")
        if name not in fisher_anchor or fisher_anchor[name].shape != theta[name].shape:
            raise AlignmentError(f"EWC Fisher entry {name!r} does not match the parameters")
        drift = square(sub(values[name], Tensor(theta_anchor[name])))
        terms.append(total(mul(Tensor(fisher_anchor[name]), drift)))
    if not terms:
        return Tensor(0.0)
    penalty = terms[0]
    for term in terms[1:]:
        penalty = add(penalty, term)
    return scale(penalty, 0.5 * ewc_lambda)


def sgd_step(params: ParamSet, grads: ParamSet, rates: Mapping[str, float]) -> ParamSet:
    return ParamSet((name, array - rates[name] * grads[name]) for name, array in params.items())


def learning_rates(model: ClassifierModel, config: TrainConfig) -> dict[str, float]:
    head = set(model.head_names)
    return {name: config.lr_head if name in head else config.lr_backbone for name in model.params}


def train_task(
    model: ClassifierModel,
    dataset: LabeledDataset,
    config: TrainConfig,
    *,
    task_id: int = 1,
    penalty: Optional[Penalty] = None,
    on_step: Optional[StepHook] = None,
) -> ParamSet:
    """Minibatch SGD on cross-entropy (plus an optional penalty); returns theta_t.

    Shuffling is seeded on (config.seed, task_id). Optimizer state is not kept
    across calls.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    targets = model.head.index_of(dataset.labels)
    rates = learning_rates(model, config)
    rng = np.random.default_rng([config.seed, 4, task_id])
    params = model.params
    steps = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            tape = GradTape()
            logits = model.with_params(params).logits(dataset.features[batch], tape)
            loss = softmax_cross_entropy(logits, targets[batch])
            if penalty is not None:
                loss = add(loss, penalty(tape, params))
            grads = backward(tape, loss)
            params = sgd_step(params, grads, rates)
            steps += 1
            if on_step is not None:
                on_step(params)
        logger.debug("task %d epoch %d: last batch loss %.6g", task_id, epoch + 1, loss.item())
    logger.debug("task %d: %d SGD steps", task_id, steps)
    return params


def pretrain_backbone(model: ClassifierModel, dataset: LabeledDataset, config: TrainConfig) -> ClassifierModel:
    """Train backbone and a throwaway head on a pre-task dataset; return the backbone only."""
    scratch = expand_head(model, dataset.class_set, task_id=1)
    params = train_task(scratch, dataset, config, task_id=0)
    logger.info("pre-trained backbone on %d samples", len(dataset))
    return model.with_backbone(params)

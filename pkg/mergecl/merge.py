"""Weight-space combination rules.

Every rule takes the freshly fine-tuned parameters first. Entries the mask
marks as shared are combined with the anchor; the others (head rows of classes
new in this task) are copied from the fine-tuned set unchanged.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import AliasChoices, ConfigDict
from sqlmodel import Field, SQLModel

from mergecl.autodiff import ParamSet
from mergecl.errors import AlignmentError, InputError, UsageError
from mergecl.fisher import DEFAULT_EPSILON, FisherDiag, fisher_floor

logger = logging.getLogger(__name__)

Mask = Mapping[str, bool]

# Documents spell the merge weight "lambda"; the attribute is `lam`.
LAMBDA_ALIAS = {"validation_alias": AliasChoices("lambda", "lam"), "serialization_alias": "lambda"}


class MergeStrategy(str, Enum):
    coma = "coma"
    cofima = "cofima"
    uniform_running = "uniform_running"
    batch_average = "batch_average"
    wise_ft_theta0 = "wise_ft_theta0"
    wise_ft_prev = "wise_ft_prev"
    ema = "ema"


class MergeSpec(SQLModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    strategy: MergeStrategy = MergeStrategy.coma
    lam: float = Field(default=0.5, ge=0.0, le=1.0, schema_extra=dict(LAMBDA_ALIAS))
    epsilon: float = Field(default=DEFAULT_EPSILON, gt=0.0)
    beta: float = Field(default=0.999, ge=0.0, lt=1.0)
    mask: Optional[dict[str, bool]] = None


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")


def shared_names(theta_t: ParamSet, anchor: Mapping[str, np.ndarray], mask: Optional[Mask]) -> list[str]:
    """Names to combine; raises AlignmentError naming the first offending entry."""
    if mask is None:
        theta_t.check_aligned(anchor)
        return list(theta_t)
    if set(mask) != set(theta_t):
        missing = sorted(set(mask) ^ set(theta_t))[0]
        raise AlignmentError(f"mask not aligned with parameters at entry {missing!r}")
    for name in anchor:
        if name not in theta_t:
            raise AlignmentError(f"anchor entry {name!r} is missing from the fine-tuned parameters")
    shared = [name for name in theta_t if mask[name]]
    for name in shared:
        if name not in anchor:
            raise AlignmentError(f"shared entry {name!r} is missing from the anchor")
        if np.shape(anchor[name]) != theta_t[name].shape:
            raise AlignmentError(
                f"entry {name!r} has shapes {theta_t[name].shape} and {np.shape(anchor[name])}"
            )
    return shared


def coma_merge(
    theta_t: ParamSet, theta_prev_star: ParamSet, lam: float, mask: Optional[Mask] = None
) -> ParamSet:
    """lam * theta_t + (1 - lam) * theta_prev_star on shared entries."""
    _check_lambda(lam)
    names = shared_names(theta_t, theta_prev_star, mask)
    if lam == 1.0:
        return theta_t
    if lam == 0.0:
        return theta_t.updated({name: theta_prev_star[name] for name in names})
    return theta_t.updated(
        {name: lam * theta_t[name] + (1.0 - lam) * theta_prev_star[name] for name in names}
    )


def cofima_merge(
    theta_t: ParamSet,
    fisher_t: FisherDiag,
    theta_prev_star: ParamSet,
    fisher_prev_star: FisherDiag,
    lam: float,
    epsilon: float = DEFAULT_EPSILON,
    mask: Optional[Mask] = None,
) -> ParamSet:
    """Fisher-weighted CoMA: each entry is a precision-weighted mean of the two models.

    Both Fishers are floored at `epsilon` first, so where neither model carries
    information the rule falls back to plain CoMA.
    """
    _check_lambda(lam)
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    names = shared_names(theta_t, theta_prev_star, mask)
    for name in names:
        for label, fisher in (("current", fisher_t), ("previous", fisher_prev_star)):
            if name not in fisher or fisher[name].shape != theta_t[name].shape:
                raise AlignmentError(f"{label} Fisher not aligned at entry {name!r}")
    if lam == 1.0:
        return theta_t
    if lam == 0.0:
        return theta_t.updated({name: theta_prev_star[name] for name in names})
    f_t = fisher_floor(fisher_t.subset(names), epsilon)
    f_prev = fisher_floor(fisher_prev_star.subset(names), epsilon)
    merged = {}
    for name in names:
        weight_t = lam * f_t[name]
        weight_prev = (1.0 - lam) * f_prev[name]
        merged[name] = (weight_t * theta_t[name] + weight_prev * theta_prev_star[name]) / (weight_t + weight_prev)
    return theta_t.updated(merged)


def uniform_running_avg(
    theta_t: ParamSet, theta_star_prev: Optional[ParamSet], t: int, mask: Optional[Mask] = None
) -> ParamSet:
    """Running mean: theta_t enters with weight 1/t."""
    if t < 1:
        raise InputError("task index must be at least 1")
    if t == 1:
        return theta_t
    if theta_star_prev is None:
        raise UsageError("a previous average is required after the first task")
    return coma_merge(theta_t, theta_star_prev, 1.0 / t, mask)


def batch_average(thetas: Sequence[ParamSet]) -> ParamSet:
    if not thetas:
        raise InputError("cannot average an empty list")
    first = thetas[0]
    for other in thetas[1:]:
        first.check_aligned(other)
    return ParamSet((name, np.stack([theta[name] for theta in thetas]).mean(axis=0)) for name in first)


def grown_batch_average(thetas: Sequence[ParamSet]) -> ParamSet:
    """Per-entry mean over those sets that hold the entry; the last set fixes the names."""
    if not thetas:
        raise InputError("cannot average an empty list")
    latest = thetas[-1]
    merged = {}
    for name in latest:
        holders = [theta[name] for theta in thetas if name in theta]
        for array in holders:
            if array.shape != latest[name].shape:
                raise AlignmentError(f"entry {name!r} changes shape across the sequence")
        merged[name] = np.stack(holders).mean(axis=0)
    return ParamSet(merged)


def fisher_batch_average(
    thetas: Sequence[ParamSet], fishers: Sequence[FisherDiag], epsilon: float = DEFAULT_EPSILON
) -> ParamSet:
    """Sum F_t theta_t / sum F_t, element-wise."""
    if not thetas:
        raise InputError("cannot average an empty list")
    if len(thetas) != len(fishers):
        raise InputError(f"{len(thetas)} parameter sets but {len(fishers)} Fishers")
    first = thetas[0]
    for other in list(thetas[1:]) + list(fishers):
        first.check_aligned(other)
    merged = {}
    for name in first:
        weights = np.stack([fisher[name] for fisher in fishers])
        values = np.stack([theta[name] for theta in thetas])
        merged[name] = (weights * values).sum(axis=0) / np.maximum(weights.sum(axis=0), epsilon)
    return ParamSet(merged)


def wise_ft_merge(
    theta_ft: ParamSet, theta_anchor: ParamSet, lam: float, mask: Optional[Mask] = None
) -> ParamSet:
    """Interpolate a fine-tuned model toward a fixed anchor."""
    return coma_merge(theta_ft, theta_anchor, lam, mask)


@dataclass(frozen=True)
class EmaState:
    """Debiased exponential moving average.

    `average` holds the bias-corrected value directly; the classic biased
    accumulator is `running`.
    """

    average: ParamSet
    step: int
    beta: float

    @property
    def running(self) -> ParamSet:
        correction = 1.0 - self.beta**self.step
        return ParamSet((name, array * correction) for name, array in self.average.items())


def ema_init(params: ParamSet, beta: float) -> EmaState:
    if not 0.0 <= beta < 1.0:
        raise InputError(f"beta must lie in [0, 1), got {beta}")
    return EmaState(params.zeros_like(), 0, beta)


def ema_update(state: EmaState, theta_m: ParamSet) -> EmaState:
    state.average.check_aligned(theta_m, "EMA state and parameters")
    step = state.step + 1
    rate = (1.0 - state.beta) / (1.0 - state.beta**step)
    if rate == 1.0:
        return EmaState(theta_m, step, state.beta)
    average = ParamSet(
        (name, array + rate * (theta_m[name] - array)) for name, array in state.average.items()
    )
    return EmaState(average, step, state.beta)


def ema_extend(state: EmaState, new_entries: Mapping[str, np.ndarray]) -> EmaState:
    """Add entries (new head rows) to the average at their current value."""
    clash = set(new_entries) & set(state.average)
    if clash:
        raise AlignmentError(f"EMA already tracks {sorted(clash)[0]!r}")
    return EmaState(ParamSet({**state.average, **new_entries}), state.step, state.beta)


def ema_debiased(state: EmaState) -> ParamSet:
    if state.step == 0:
        raise UsageError("EMA has seen no update yet")
    return state.average


def overlay(base: ParamSet, replacement: Mapping[str, np.ndarray], mask: Mask) -> ParamSet:
    """Take masked entries from `replacement`, the rest from `base`."""
    return base.updated({name: replacement[name] for name in base if mask[name]})


def apply_merge(
    spec: MergeSpec,
    theta_t: ParamSet,
    anchor: ParamSet,
    *,
    fisher_t: Optional[FisherDiag] = None,
    fisher_anchor: Optional[FisherDiag] = None,
    task_index: int = 2,
) -> ParamSet:
    """Two-operand merge selected by `spec`."""
    if spec.strategy == MergeStrategy.cofima:
        if fisher_t is None or fisher_anchor is None:
            raise UsageError("cofima needs both Fisher operands")
        return cofima_merge(theta_t, fisher_t, anchor, fisher_anchor, spec.lam, spec.epsilon, spec.mask)
    if spec.strategy in (MergeStrategy.coma, MergeStrategy.wise_ft_theta0, MergeStrategy.wise_ft_prev):
        return coma_merge(theta_t, anchor, spec.lam, spec.mask)
    if spec.strategy == MergeStrategy.uniform_running:
        return uniform_running_avg(theta_t, anchor, task_index, spec.mask)
    if spec.strategy == MergeStrategy.batch_average:
        return batch_average([anchor, theta_t])
    raise UsageError(f"{spec.strategy.value} is not a two-operand merge")

"""Diagonal quadratic tasks, where every averaging rule has an exact answer.

A diagonal Gaussian posterior N(mu_t, A_t^-1) has log-likelihood equal (up to a
constant) to -1/2 (theta - mu_t)^T diag(A_t) (theta - mu_t), so the joint
optimum, the Fisher and the merge rules can all be checked to rounding error.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike

from mergecl.autodiff import GradTape, ParamSet, Tensor, backward, mul, square, sub, total
from mergecl.errors import InputError
from mergecl.fisher import FisherDiag
from mergecl.merge import cofima_merge, coma_merge, fisher_batch_average

logger = logging.getLogger(__name__)

ENTRY = "theta"


@dataclass(frozen=True)
class QuadraticTask:
    center: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).ravel()
        precision = np.array(self.precision, dtype=np.float64).ravel()
        if center.shape != precision.shape:
            raise InputError("center and precision must have the same length")
        if not np.all(precision > 0):
            raise InputError("precisions must be strictly positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "precision", precision)

    @property
    def dim(self) -> int:
        return self.center.size


def random_tasks(rng: np.random.Generator, num_tasks: int, dim: int) -> list[QuadraticTask]:
    return [
        QuadraticTask(rng.normal(size=dim), rng.uniform(0.1, 10.0, size=dim)) for _ in range(num_tasks)
    ]


def _as_params(vector: ArrayLike) -> ParamSet:
    return ParamSet({ENTRY: vector})


def task_loss(task: QuadraticTask, theta: ArrayLike) -> float:
    diff = np.asarray(theta, dtype=np.float64) - task.center
    return float(0.5 * np.sum(task.precision * diff * diff))


def summed_loss(tasks: Sequence[QuadraticTask], theta: ArrayLike) -> float:
    return sum(task_loss(task, theta) for task in tasks)


def exact_joint_optimum(tasks: Sequence[QuadraticTask]) -> np.ndarray:
    """argmin of the summed quadratics: (sum A_t mu_t) / (sum A_t)."""
    if not tasks:
        raise InputError("at least one task is required")
    precisions = np.stack([task.precision for task in tasks])
    centers = np.stack([task.center for task in tasks])
    return (precisions * centers).sum(axis=0) / precisions.sum(axis=0)


def fisher_of_quadratic(task: QuadraticTask) -> FisherDiag:
    return FisherDiag({ENTRY: task.precision})


def gaussian_fisher_quadrature(task: QuadraticTask, order: int = 8) -> FisherDiag:
    """E_y[(d/dtheta log N(y; theta, A^-1))^2] at theta = mu, by Gauss-Hermite quadrature.

    Scores come from the autodiff engine; the integrand is a polynomial of
    degree two in the standardised sample, which the quadrature integrates exactly.
    """
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    theta = _as_params(task.center)
    expected = np.zeros(task.dim)
    for node, weight in zip(nodes, weights):
        sample = task.center + node / np.sqrt(task.precision)
        tape = GradTape()
        leaves = tape.watch(theta)
        residual = sub(Tensor(sample), leaves[ENTRY])
        # Per-coordinate log-likelihoods are independent, so one backward pass
        # over their sum yields every coordinate's score.
        log_likelihood = total(mul(Tensor(-0.5 * task.precision), square(residual)))
        score = backward(tape, log_likelihood)[ENTRY]
        expected += weight * score * score
    return FisherDiag({ENTRY: expected})


@dataclass
class OptimalityReport:
    num_tasks: int
    batch_gap: float
    two_task_gap: float
    iterative_gap: float
    optimum_loss: float
    iterative_loss: float
    uniform_latest_loss: float
    recency_latest_loss: float
    iterative: np.ndarray = field(repr=False)
    optimum: np.ndarray = field(repr=False)

    @property
    def max_gap(self) -> float:
        return max(self.batch_gap, self.two_task_gap)

    def passed(self, tolerance: float = 1e-10) -> bool:
        return self.max_gap < tolerance


def _iterative_cofima(tasks: Sequence[QuadraticTask], lam: float) -> np.ndarray:
    """theta*_t from Fisher-weighted averaging, with F*_t the Fisher of task t's likelihood."""
    merged = _as_params(tasks[0].center)
    for previous, task in zip(tasks, tasks[1:]):
        merged = cofima_merge(
            _as_params(task.center),
            fisher_of_quadratic(task),
            merged,
            fisher_of_quadratic(previous),
            lam,
        )
    return merged[ENTRY]


def _iterative_coma(tasks: Sequence[QuadraticTask], schedule: Sequence[float]) -> np.ndarray:
    merged = _as_params(tasks[0].center)
    for task, lam in zip(tasks[1:], schedule[1:]):
        merged = coma_merge(_as_params(task.center), merged, lam)
    return merged[ENTRY]


def verify_merge_optimality(
    tasks: Sequence[QuadraticTask], lambda_schedule: Optional[Sequence[float]] = None
) -> OptimalityReport:
    """Measure how far each averaging rule lands from the exact joint optimum.

    `lambda_schedule` is the recency schedule (default constant 0.5); the
    uniform schedule is lambda_t = 1/t.
    """
    if not tasks:
        raise InputError("at least one task is required")
    count = len(tasks)
    schedule = list(lambda_schedule) if lambda_schedule is not None else [0.5] * count
    if len(schedule) != count:
        raise InputError(f"schedule has {len(schedule)} entries for {count} tasks")
    optimum = exact_joint_optimum(tasks)
    batch = fisher_batch_average(
        [_as_params(task.center) for task in tasks], [fisher_of_quadratic(task) for task in tasks]
    )[ENTRY]
    batch_gap = float(np.max(np.abs(batch - optimum)))
    if count >= 2:
        pair = tasks[:2]
        two_task = _iterative_cofima(pair, 0.5)
        two_task_gap = float(np.max(np.abs(two_task - exact_joint_optimum(pair))))
    else:
        two_task_gap = 0.0
    iterative = _iterative_cofima(tasks, schedule[-1]) if count >= 2 else optimum.copy()
    uniform = _iterative_coma(tasks, [1.0 / t for t in range(1, count + 1)])
    recency = _iterative_coma(tasks, schedule)
    latest = tasks[-1]
    report = OptimalityReport(
        num_tasks=count,
        batch_gap=batch_gap,
        two_task_gap=two_task_gap,
        iterative_gap=float(np.max(np.abs(iterative - optimum))),
        optimum_loss=summed_loss(tasks, optimum),
        iterative_loss=summed_loss(tasks, iterative),
        uniform_latest_loss=task_loss(latest, uniform),
        recency_latest_loss=task_loss(latest, recency),
        iterative=iterative,
        optimum=optimum,
    )
    logger.debug("optimality check over %d tasks: %s", count, report)
    return report

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from mergecl.fisher import FisherDiag
from mergecl.metrics import accuracy, inc_acc, last_acc
from mergecl.model import ClassifierModel
from mergecl.taskstream import TaskStream

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TaskSnapshot:
    """State kept after task `task`.

    The deployed model, its Fisher when the strategy keeps one, and the
    fine-tuned model the deployed one was formed from.
    """

    task: int
    model: ClassifierModel
    fisher: Optional[FisherDiag] = None
    finetuned: Optional[ClassifierModel] = None


@dataclass
class ExperimentReport:
    strategy: str
    lam: float
    seed: int
    config_hash: str = ""
    # acc_seen[t-1]: accuracy (%) on the pooled test sets of tasks 1..t after task t
    acc_seen: list[float] = field(default_factory=list)
    # task_acc[t-1][s-1]: accuracy on task s's test split after task t
    task_acc: list[list[float]] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)
    labels: list[np.ndarray] = field(default_factory=list)
    merge_counts: list[int] = field(default_factory=list)
    snapshots: list[TaskSnapshot] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.acc_seen)

    @property
    def last_acc(self) -> float:
        return last_acc(self.acc_seen)

    @property
    def inc_acc(self) -> float:
        return inc_acc(self.acc_seen)

    def record(
        self,
        stream: TaskStream,
        predict: Predictor,
        snapshot: TaskSnapshot,
        wall_time: float,
        merges: int,
    ) -> float:
        """Evaluate after task `snapshot.task` and append every per-task field."""
        upto = snapshot.task
        seen = stream.seen_test(upto)
        predictions = np.asarray(predict(seen.features))
        acc = accuracy(predictions, seen.labels)
        breakdown, start = [], 0
        for task in stream.tasks[:upto]:
            stop = start + len(task.test)
            breakdown.append(accuracy(predictions[start:stop], seen.labels[start:stop]))
            start = stop
        self.acc_seen.append(acc)
        self.task_acc.append(breakdown)
        self.predictions.append(predictions)
        self.labels.append(np.asarray(seen.labels))
        self.wall_times.append(wall_time)
        self.merge_counts.append(merges)
        self.snapshots.append(snapshot)
        logger.info("%s task %d: acc_seen=%.4f (%.2fs)", self.strategy, upto, acc, wall_time)
        return acc

    def same_results(self, other: "ExperimentReport") -> bool:
        """Accuracies, predictions and deployed parameters agree exactly; strategy names and timings may differ."""
        if self.acc_seen != other.acc_seen or self.task_acc != other.task_acc:
            return False
        if len(self.predictions) != len(other.predictions):
            return False
        if any(not np.array_equal(a, b) for a, b in zip(self.predictions, other.predictions)):
            return False
        return all(a.model.params == b.model.params for a, b in zip(self.snapshots, other.snapshots))

    def summary(self) -> dict[str, Any]:
        """Deterministic, JSON-ready digest; wall times are left out."""
        return {
            "strategy": self.strategy,
            "lambda": self.lam,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "num_tasks": self.num_tasks,
            "acc_seen": list(self.acc_seen),
            "task_acc": [list(row) for row in self.task_acc],
            "last_acc": self.last_acc,
            "inc_acc": self.inc_acc,
            "merge_counts": list(self.merge_counts),
        }

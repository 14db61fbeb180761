from mergecl.strategies.alignment import ClassStats, classifier_alignment, collect_class_stats
from mergecl.strategies.prototype import prototype_classifier
from mergecl.strategies.report import ExperimentReport, TaskSnapshot
from mergecl.strategies.runner import joint_training, run_continual
from mergecl.strategies.training import ewc_penalty, pretrain_backbone, train_task

__all__ = [
    "ClassStats",
    "ExperimentReport",
    "TaskSnapshot",
    "classifier_alignment",
    "collect_class_stats",
    "ewc_penalty",
    "joint_training",
    "pretrain_backbone",
    "prototype_classifier",
    "run_continual",
    "train_task",
]

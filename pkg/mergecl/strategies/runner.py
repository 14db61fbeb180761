"""The continual-learning loop: fine-tune, merge, optionally align the head, evaluate."""

import logging
import time
from typing import Optional

import numpy as np

from mergecl.autodiff import ParamSet
from mergecl.config import AlignmentMode, FisherEstimator, InitFrom, Strategy, TrainConfig
from mergecl.errors import UsageError
from mergecl.fisher import FisherDiag, estimate_fisher_exact, estimate_fisher_mc
from mergecl.merge import (
    EmaState,
    apply_merge,
    ema_debiased,
    ema_extend,
    ema_init,
    ema_update,
    grown_batch_average,
    overlay,
)
from mergecl.model import ClassifierModel, expand_head, shared_param_mask
from mergecl.strategies.alignment import ClassStats, aligned_model, classifier_alignment, collect_class_stats
from mergecl.strategies.prototype import prototype_classifier
from mergecl.strategies.report import ExperimentReport, TaskSnapshot
from mergecl.strategies.training import ewc_penalty, train_task
from mergecl.taskstream import LabeledDataset, Task, TaskStream, concat_datasets

logger = logging.getLogger(__name__)

# Strategies whose fine-tuning follows the plain sequential model rather than the deployed one.
CHAIN_STRATEGIES = {Strategy.wise_ft_theta0, Strategy.wise_ft_prev, Strategy.ema}


def estimate_fisher(model: ClassifierModel, data: LabeledDataset, config: TrainConfig, key: tuple[int, ...]) -> FisherDiag:
    if config.fisher_estimator == FisherEstimator.exact:
        return estimate_fisher_exact(model, data)
    seed = int(np.random.SeedSequence([config.seed, 6, *key]).generate_state(1)[0])
    return estimate_fisher_mc(model, data, config.fisher_mc_samples, seed)


class _ContinualRun:
    """Loop state between tasks: the deployed model, its Fisher and the per-strategy extras."""

    def __init__(self, stream: TaskStream, config: TrainConfig, base: ClassifierModel, config_hash: str):
        if base.head.rows:
            raise UsageError("the base model must have an empty head")
        self.stream = stream
        self.config = config
        self.strategy = config.strategy
        self.theta0 = base
        self.deployed = base
        self.chain = base
        self.fisher_star: Optional[FisherDiag] = None
        self.history: list[ParamSet] = []
        self.ema: Optional[EmaState] = None
        self.ema_steps = 0
        self.ewc_anchor: Optional[tuple[ParamSet, FisherDiag]] = None
        self.class_stats: dict[int, ClassStats] = {}
        self.report = ExperimentReport(self.strategy.value, config.lam, config.seed, config_hash)

    def start_model(self, t: int, classes: list[int]) -> ClassifierModel:
        previous = self.chain if self.strategy in CHAIN_STRATEGIES else self.deployed
        model = expand_head(previous, classes, t)
        if self.config.init_from == InitFrom.theta0 and t > 1:
            model = model.with_backbone(self.theta0.backbone())
        return model

    def _penalty(self):
        if self.strategy != Strategy.ewc or self.ewc_anchor is None or self.config.ewc_lambda == 0.0:
            return None
        anchor, fisher = self.ewc_anchor
        return lambda tape, params: ewc_penalty(params, anchor, fisher, self.config.ewc_lambda, tape)

    def step(self, t: int, task: Task) -> None:
        config = self.config
        started = time.perf_counter()
        model = self.start_model(t, task.class_set)
        mask = shared_param_mask(model, t)
        on_step = None
        if self.strategy == Strategy.ema:
            if self.ema is None:
                self.ema = ema_init(model.params, config.ema_beta)
            else:
                self.ema = ema_extend(self.ema, {n: model.params[n] for n in model.params if n not in self.ema.average})
            self.ema_steps = 0

            def on_step(params: ParamSet) -> None:
                self.ema = ema_update(self.ema, params)
                self.ema_steps += 1

        theta_t = train_task(model, task.train, config, task_id=t, penalty=self._penalty(), on_step=on_step)
        trained = model.with_params(theta_t)
        deployed, fisher, merges = self.combine(t, trained, mask, task.train)
        self.chain = trained
        self.deployed = deployed
        evaluated = self.align(t, deployed, task.train)
        snapshot = TaskSnapshot(t, deployed, fisher, trained)
        self.report.record(self.stream, evaluated.predict, snapshot, time.perf_counter() - started, merges)

    def combine(
        self, t: int, trained: ClassifierModel, mask: dict[str, bool], data: LabeledDataset
    ) -> tuple[ClassifierModel, Optional[FisherDiag], int]:
        """Form theta*_t from theta_t; returns the deployed model, its Fisher and the merge count."""
        config, strategy = self.config, self.strategy
        theta_t = trained.params
        if strategy == Strategy.seq_ft:
            return trained, None, 0
        if strategy == Strategy.ewc:
            fisher_t = estimate_fisher(trained, data, config, (t, 0))
            self.ewc_anchor = (theta_t, fisher_t)
            return trained, fisher_t, 0
        if strategy == Strategy.ema:
            return trained.with_params(overlay(theta_t, ema_debiased(self.ema), mask)), None, self.ema_steps
        if strategy == Strategy.batch_average:
            self.history.append(theta_t)
            return trained.with_params(grown_batch_average(self.history)), None, 1
        spec = config.merge_spec()
        if spec is None:
            raise UsageError(f"{strategy.value} is not a continual merging strategy")
        fisher_t = estimate_fisher(trained, data, config, (t, 0)) if strategy == Strategy.cofima else None
        if t == 1:
            # theta*_1 = theta_1 for every task-level merge.
            self.fisher_star = fisher_t
            return trained, fisher_t, 1
        anchor = self.deployed.params
        if strategy == Strategy.wise_ft_theta0:
            anchor, mask = self.theta0.params, shared_param_mask(trained, 1)
        elif strategy == Strategy.wise_ft_prev:
            anchor = self.chain.params
        merged = apply_merge(
            spec.model_copy(update={"mask": mask}),
            theta_t,
            anchor,
            fisher_t=fisher_t,
            fisher_anchor=self.fisher_star,
            task_index=t,
        )
        deployed = trained.with_params(merged)
        if strategy == Strategy.cofima:
            # F*_t is measured at theta*_t itself.
            self.fisher_star = fisher_t if merged is theta_t else estimate_fisher(deployed, data, config, (t, 1))
            return deployed, self.fisher_star, 1
        return deployed, None, 1

    def align(self, t: int, deployed: ClassifierModel, data: LabeledDataset) -> ClassifierModel:
        config = self.config
        if not config.ca_enabled:
            return deployed
        self.class_stats.update(collect_class_stats(deployed, data))
        if config.ca_mode == AlignmentMode.final and t < len(self.stream):
            return deployed
        head = classifier_alignment(deployed, self.class_stats, config, seed_key=t)
        return aligned_model(deployed, head)


def run_continual(
    stream: TaskStream, config: TrainConfig, base: ClassifierModel, *, config_hash: str = ""
) -> ExperimentReport:
    """Run one strategy over the whole stream starting from the backbone `base`."""
    if config.strategy == Strategy.joint:
        return joint_training(stream, config, base, config_hash=config_hash)
    if config.strategy == Strategy.prototype:
        return prototype_classifier(stream, base, seed=config.seed, config_hash=config_hash)
    run = _ContinualRun(stream, config, base, config_hash)
    for t, task in enumerate(stream, start=1):
        run.step(t, task)
    report = run.report
    logger.info(
        "%s finished %d tasks: last_acc=%.4f inc_acc=%.4f", report.strategy, report.num_tasks,
        report.last_acc, report.inc_acc,
    )
    return report


def joint_training(
    stream: TaskStream, config: TrainConfig, base: ClassifierModel, *, config_hash: str = ""
) -> ExperimentReport:
    """Train once on every task's data pooled; the one model is evaluated after each task's classes."""
    started = time.perf_counter()
    pooled = concat_datasets([task.train for task in stream])
    model = expand_head(base, pooled.class_set, 1)
    model = model.with_params(train_task(model, pooled, config, task_id=1))
    training_time = time.perf_counter() - started
    report = ExperimentReport(Strategy.joint.value, config.lam, config.seed, config_hash)
    for t in range(1, len(stream) + 1):
        report.record(stream, model.predict, TaskSnapshot(t, model), training_time if t == 1 else 0.0, merges=0)
    return report

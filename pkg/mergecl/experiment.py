"""End-to-end experiment: build the stream and base model, run a strategy, write the run directory."""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Union

from mergecl.checkpoint import Checkpoint, atomic_write_text, model_metadata, save_checkpoint
from mergecl.config import ExperimentConfig
from mergecl.metrics import format_report_csv
from mergecl.model import ClassifierModel, MlpConfig, init_model
from mergecl.strategies import ExperimentReport, pretrain_backbone, run_continual
from mergecl.taskstream import (
    LabeledDataset,
    TaskStream,
    frozen_feature_projection,
    gen_gaussian_stream,
    load_csv_stream,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
RUN_META_FILE = "run_meta.json"


def params_file(task: int) -> str:
    return f"task_{task:02d}.params.ckpt"


def fisher_file(task: int) -> str:
    return f"task_{task:02d}.fisher.ckpt"


def build_stream(config: ExperimentConfig) -> TaskStream:
    if config.csv is not None:
        csv = config.csv
        return load_csv_stream(csv.path, csv.task_partition, test_path=csv.test_path, seed=csv.split_seed)
    return gen_gaussian_stream(config.stream)


def _pretrain_dataset(config: ExperimentConfig, feature_dim: int) -> LabeledDataset:
    """Held-out Gaussian pre-task in the same input space as the stream."""
    pretrain, stream = config.pretrain, config.stream
    source = stream.model_copy(
        update={
            "num_tasks": 1,
            "classes_per_task": pretrain.num_classes,
            "samples_per_class": pretrain.samples_per_class,
            "feature_dim": stream.feature_dim if config.csv is None else feature_dim,
            "seed": stream.seed + pretrain.seed_offset,
            "projection_dim": None,
        }
    )
    generated = gen_gaussian_stream(source)
    if config.csv is None and stream.projection_dim is not None:
        # Same frozen projection as the stream itself.
        generated = frozen_feature_projection(generated, stream.projection_dim, stream.seed)
    return generated.tasks[0].train


def build_base_model(config: ExperimentConfig, stream: TaskStream) -> ClassifierModel:
    """theta_0: a seeded backbone, pre-trained on a held-out task when configured."""
    mlp = MlpConfig(
        input_dim=stream.feature_dim,
        hidden_dims=config.model.hidden_dims,
        activation=config.model.activation,
        seed=config.train.seed,
    )
    model = init_model(mlp)
    if config.pretrain is not None:
        train = config.train.model_copy(update={"epochs": config.pretrain.epochs})
        model = pretrain_backbone(model, _pretrain_dataset(config, stream.feature_dim), train)
    return model


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    stream = build_stream(config)
    base = build_base_model(config, stream)
    logger.info(
        "running %s (lambda=%s, seed=%d) on %d tasks", config.train.strategy.value, config.train.lam,
        config.train.seed, len(stream),
    )
    return run_continual(stream, config.train, base, config_hash=config.config_hash())


def _json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_run_outputs(
    report: ExperimentReport,
    config: ExperimentConfig,
    out_dir: Union[str, Path],
    started_at: Optional[datetime] = None,
    finished_at: Optional[datetime] = None,
) -> Path:
    """Checkpoints, metrics CSV and summary are deterministic; timestamps go to run_meta.json only."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    common = {"strategy": report.strategy, "config_hash": report.config_hash}
    if config.output.write_checkpoints:
        for snapshot in report.snapshots:
            metadata = {**common, "task": snapshot.task, **model_metadata(snapshot.model)}
            save_checkpoint(out_dir / params_file(snapshot.task), Checkpoint.build(params=snapshot.model.params, **metadata))
            if snapshot.fisher is not None:
                save_checkpoint(
                    out_dir / fisher_file(snapshot.task),
                    Checkpoint.build(fisher=snapshot.fisher, task=snapshot.task, **common),
                )
    atomic_write_text(out_dir / METRICS_FILE, format_report_csv(report))
    atomic_write_text(out_dir / SUMMARY_FILE, _json(report.summary()))
    meta = {
        "config_hash": report.config_hash,
        "config": config.model_dump(mode="json", by_alias=True),
        "wall_times": report.wall_times,
        "started_at": (started_at or datetime.now(timezone.utc)).isoformat(),
        "finished_at": (finished_at or datetime.now(timezone.utc)).isoformat(),
    }
    atomic_write_text(out_dir / RUN_META_FILE, _json(meta))
    logger.info("wrote run outputs to %s", out_dir)
    return out_dir

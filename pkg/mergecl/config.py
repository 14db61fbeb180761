import hashlib
import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import ConfigDict, ValidationError
from sqlmodel import Field, SQLModel

from mergecl.errors import ConfigError
from mergecl.fisher import DEFAULT_EPSILON
from mergecl.merge import LAMBDA_ALIAS, MergeSpec, MergeStrategy
from mergecl.model import Activation
from mergecl.taskstream import StreamConfig

THREADS_ENV = "MERGECL_THREADS"


class Strategy(str, Enum):
    seq_ft = "seq_ft"
    coma = "coma"
    cofima = "cofima"
    uniform_running = "uniform_running"
    batch_average = "batch_average"
    wise_ft_theta0 = "wise_ft_theta0"
    wise_ft_prev = "wise_ft_prev"
    ema = "ema"
    ewc = "ewc"
    prototype = "prototype"
    joint = "joint"


class InitFrom(str, Enum):
    prev = "prev"
    theta0 = "theta0"


class AlignmentMode(str, Enum):
    every_task = "every_task"
    final = "final"


class FisherEstimator(str, Enum):
    exact = "exact"
    mc = "mc"


# Common base for every config section: typos and unknown keys are errors.
class ConfigBase(SQLModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class CsvSourceConfig(ConfigBase):
    path: str
    test_path: Optional[str] = None
    task_partition: list[list[int]]
    split_seed: int = Field(default=0, ge=0)


class PretrainConfig(ConfigBase):
    num_classes: int = Field(default=4, ge=2)
    samples_per_class: int = Field(default=100, ge=2)
    epochs: int = Field(default=5, ge=1)
    seed_offset: int = Field(default=1000, ge=0)


class ModelConfig(ConfigBase):
    hidden_dims: list[int] = Field(default_factory=lambda: [8])
    activation: Activation = Activation.tanh


class TrainConfig(ConfigBase):
    lr_backbone: float = Field(default=0.1, ge=0.0)
    lr_head: float = Field(default=0.1, ge=0.0)
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    seed: int = Field(default=0, ge=0)
    lam: float = Field(default=0.5, ge=0.0, le=1.0, schema_extra=dict(LAMBDA_ALIAS))
    strategy: Strategy = Strategy.cofima
    init_from: InitFrom = InitFrom.prev
    ewc_lambda: float = Field(default=100.0, ge=0.0)
    ema_beta: float = Field(default=0.999, ge=0.0, lt=1.0)
    fisher_epsilon: float = Field(default=DEFAULT_EPSILON, gt=0.0)
    fisher_estimator: FisherEstimator = FisherEstimator.exact
    fisher_mc_samples: int = Field(default=1, ge=1)
    ca_enabled: bool = False
    ca_mode: AlignmentMode = AlignmentMode.every_task
    ca_samples_per_class: int = Field(default=64, ge=1)
    ca_epochs: int = Field(default=5, ge=1)
    ca_temperature: float = Field(default=25.0, gt=0.0)
    ca_cov_jitter: float = Field(default=1e-6, ge=0.0)

    def merge_spec(self) -> Optional[MergeSpec]:
        """Merge rule for weight-averaging strategies, None for the others."""
        try:
            strategy = MergeStrategy(self.strategy.value)
        except ValueError:
            return None
        return MergeSpec(strategy=strategy, lam=self.lam, epsilon=self.fisher_epsilon, beta=self.ema_beta)


class OutputConfig(ConfigBase):
    out_dir: str = "runs/latest"
    write_checkpoints: bool = True


class ExperimentConfig(ConfigBase):
    stream: StreamConfig = Field(default_factory=StreamConfig)
    csv: Optional[CsvSourceConfig] = None
    pretrain: Optional[PretrainConfig] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def with_overrides(
        self,
        seed: Optional[int] = None,
        lam: Optional[float] = None,
        strategy: Optional[str] = None,
        out: Optional[str] = None,
    ) -> "ExperimentConfig":
        """Apply CLI overrides and validate the result again."""
        data = self.model_dump(by_alias=True)
        if seed is not None:
            data["train"]["seed"] = seed
            data["stream"]["seed"] = seed
        if lam is not None:
            data["train"]["lambda"] = lam
        if strategy is not None:
            data["train"]["strategy"] = strategy
        if out is not None:
            data["output"]["out_dir"] = out
        return parse_config(data)

    def config_hash(self) -> str:
        """Digest of everything that affects results; output paths are excluded."""
        data = self.model_dump(mode="json", by_alias=True, exclude={"output"})
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _describe(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{where}: {item['msg']}")
    return "; ".join(lines)


def parse_config(data: Union[dict[str, Any], str]) -> ExperimentConfig:
    try:
        if isinstance(data, str):
            return ExperimentConfig.model_validate_json(data)
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_describe(exc)}") from None


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def worker_limit(default: Optional[int] = None) -> int:
    value = os.getenv(THREADS_ENV)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    return default or os.cpu_count() or 1

"""The classifier h(f(x)): a small MLP feature extractor and an expandable linear head."""

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike
from pydantic import ConfigDict
from sqlmodel import Field, SQLModel

from mergecl.autodiff import (
    GradTape,
    ParamSet,
    Tensor,
    forward_linear,
    relu,
    stack,
    tanh,
)
from mergecl.errors import AlignmentError, InputError, UsageError

logger = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."
HEAD_PREFIX = "head."
HEAD_INIT_STD = 0.01


class Activation(str, Enum):
    tanh = "tanh"
    relu = "relu"


class MlpConfig(SQLModel):
    model_config = ConfigDict(extra="forbid")

    input_dim: int = Field(ge=1)
    # An empty list gives a plain linear softmax model.
    hidden_dims: list[int] = Field(default_factory=list)
    activation: Activation = Activation.tanh
    seed: int = Field(default=0, ge=0)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


@dataclass(frozen=True)
class HeadRow:
    class_id: int
    task_id: int

    @property
    def weight_name(self) -> str:
        return f"{HEAD_PREFIX}c{self.class_id:05d}.weight"

    @property
    def bias_name(self) -> str:
        return f"{HEAD_PREFIX}c{self.class_id:05d}.bias"


@dataclass(frozen=True)
class IncrementalHead:
    rows: tuple[HeadRow, ...] = ()

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def class_ids(self) -> list[int]:
        return [row.class_id for row in self.rows]

    @property
    def entry_names(self) -> list[str]:
        return [name for row in self.rows for name in (row.weight_name, row.bias_name)]

    def index_of(self, class_ids: ArrayLike) -> np.ndarray:
        """Logit column of every class id."""
        lookup = {row.class_id: i for i, row in enumerate(self.rows)}
        try:
            return np.array([lookup[int(c)] for c in np.asarray(class_ids).ravel()], dtype=np.int64)
        except KeyError as exc:
            raise UsageError(f"class {exc.args[0]} has no head row") from None


def _layer_names(index: int) -> tuple[str, str]:
    return f"{BACKBONE_PREFIX}l{index:02d}.weight", f"{BACKBONE_PREFIX}l{index:02d}.bias"


@dataclass(frozen=True)
class ClassifierModel:
    """Backbone and head exposed as one ParamSet; immutable, training returns new ParamSets."""

    config: MlpConfig
    params: ParamSet
    head: IncrementalHead = IncrementalHead()

    @property
    def num_classes(self) -> int:
        return len(self.head)

    @property
    def backbone_names(self) -> list[str]:
        return [name for name in self.params if name.startswith(BACKBONE_PREFIX)]

    @property
    def head_names(self) -> list[str]:
        return self.head.entry_names

    def backbone(self) -> ParamSet:
        return self.params.subset(self.backbone_names)

    def with_params(self, params: ParamSet) -> "ClassifierModel":
        if params is not self.params:
            self.params.check_aligned(params, "model parameters")
        return ClassifierModel(self.config, params, self.head)

    def with_backbone(self, backbone: Mapping[str, np.ndarray]) -> "ClassifierModel":
        return self.with_params(self.params.updated({name: backbone[name] for name in self.backbone_names}))

    def _values(self, tape: Optional[GradTape]) -> dict[str, Tensor]:
        if tape is not None:
            return tape.watch(self.params)
        return {name: Tensor(array) for name, array in self.params.items()}

    def features(self, inputs: ArrayLike, tape: Optional[GradTape] = None) -> Tensor:
        values = self._values(tape)
        hidden = Tensor(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
        if hidden.shape[1] != self.config.input_dim:
            raise AlignmentError(f"inputs have {hidden.shape[1]} features, model expects {self.config.input_dim}")
        activation = tanh if self.config.activation == Activation.tanh else relu
        for index in range(len(self.config.hidden_dims)):
            weight, bias = _layer_names(index)
            hidden = activation(forward_linear(hidden, values[weight], values[bias]))
        return hidden

    def logits(self, inputs: ArrayLike, tape: Optional[GradTape] = None) -> Tensor:
        if not self.head.rows:
            raise UsageError("model head is empty; expand it before computing logits")
        features = self.features(inputs, tape)
        return head_logits(self.head, self._values(tape), features)

    def predict(self, inputs: ArrayLike) -> np.ndarray:
        return predict(self, inputs)


def head_logits(head: IncrementalHead, values: Mapping[str, Tensor], features: Tensor) -> Tensor:
    """Linear head over `features`, one logit column per head row in insertion order."""
    weight = stack([values[row.weight_name] for row in head.rows], axis=1)
    bias = stack([values[row.bias_name] for row in head.rows], axis=0)
    return forward_linear(features, weight, bias)


def init_model(config: MlpConfig, seed: Optional[int] = None) -> ClassifierModel:
    """Seeded backbone (scaled Gaussian weights, zero biases) with an empty head."""
    seed = config.seed if seed is None else seed
    config = config.model_copy(update={"seed": seed})
    rng = np.random.default_rng([seed, 0])
    entries = {}
    fan_in = config.input_dim
    for index, width in enumerate(config.hidden_dims):
        if width < 1:
            raise InputError(f"hidden layer {index} has width {width}")
        weight, bias = _layer_names(index)
        entries[weight] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, width))
        entries[bias] = np.zeros(width)
        fan_in = width
    logger.debug("initialised backbone %s with seed %d", config.hidden_dims, seed)
    return ClassifierModel(config, ParamSet(entries))


def expand_head(model: ClassifierModel, new_classes: Iterable[int], task_id: int) -> ClassifierModel:
    """Append one head row per new class; existing parameters are carried over untouched."""
    new_classes = [int(c) for c in new_classes]
    present = set(model.head.class_ids)
    if len(set(new_classes)) != len(new_classes) or present.intersection(new_classes):
        raise InputError(f"classes {sorted(present.intersection(new_classes)) or new_classes} already in the head")
    if task_id < 1:
        raise InputError("task ids start at 1")
    rows = list(model.head.rows)
    entries = dict(model.params)
    feature_dim = model.config.feature_dim
    for class_id in new_classes:
        row = HeadRow(class_id, task_id)
        rng = np.random.default_rng([model.config.seed, 1, class_id])
        entries[row.weight_name] = rng.normal(0.0, HEAD_INIT_STD, size=feature_dim)
        entries[row.bias_name] = rng.normal(0.0, HEAD_INIT_STD)
        rows.append(row)
    return ClassifierModel(model.config, ParamSet(entries), IncrementalHead(tuple(rows)))


def shared_param_mask(model: ClassifierModel, task_id: int) -> dict[str, bool]:
    """True on backbone entries and on head rows introduced before `task_id`."""
    if task_id < 1:
        raise InputError("task ids start at 1")
    mask = {name: True for name in model.backbone_names}
    for row in model.head.rows:
        shared = row.task_id < task_id
        mask[row.weight_name] = shared
        mask[row.bias_name] = shared
    return {name: mask[name] for name in model.params}


def predict(model: ClassifierModel, inputs: ArrayLike) -> np.ndarray:
    """Argmax class id per row; exact ties go to the lowest class id."""
    logits = model.logits(inputs).data
    class_ids = np.array(model.head.class_ids)
    order = np.argsort(class_ids, kind="stable")
    # argmax returns the first maximum, so scan columns in class-id order.
    return class_ids[order][np.argmax(logits[:, order], axis=1)]

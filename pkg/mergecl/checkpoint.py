"""Binary container for parameters and Fisher diagonals.

Layout (all integers little-endian):

    b"CFMA" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | float64 LE payload
    optional trailer: b"META" | length u32 | UTF-8 JSON object (sorted keys)
"""

import json
import logging
import math
import os
import struct
import tempfile
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from mergecl.autodiff import ParamSet
from mergecl.errors import CorruptionError, FormatError, InputError
from mergecl.fisher import FISHER_SUFFIX, FisherDiag, tag_fisher, untag_fisher
from mergecl.model import Activation, ClassifierModel, HeadRow, IncrementalHead, MlpConfig

logger = logging.getLogger(__name__)

MAGIC = b"CFMA"
META_MAGIC = b"META"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    entries: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        params: Optional[ParamSet] = None,
        fisher: Optional[FisherDiag] = None,
        **metadata: Any,
    ) -> "Checkpoint":
        entries: dict[str, np.ndarray] = {}
        if params is not None:
            entries.update(params)
        if fisher is not None:
            entries.update(tag_fisher(fisher))
        return cls(entries, metadata)

    @property
    def params(self) -> ParamSet:
        return ParamSet((n, a) for n, a in self.entries.items() if not n.endswith(FISHER_SUFFIX))

    @property
    def fisher(self) -> Optional[FisherDiag]:
        if not any(name.endswith(FISHER_SUFFIX) for name in self.entries):
            return None
        return untag_fisher(self.entries)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(checkpoint.entries))]
    for name in sorted(checkpoint.entries):
        array = np.asarray(checkpoint.entries[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U64.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array).tobytes())
    if checkpoint.metadata:
        meta = json.dumps(checkpoint.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts.extend([META_MAGIC, _U32.pack(len(meta)), meta])
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CorruptionError(f"truncated file while reading {what}", self.offset)
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    @property
    def remaining(self) -> int:
        return len(self.payload) - self.offset


def decode_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if len(payload) < 4 or payload[:4] != MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    reader.take(4, "magic")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    count = reader.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for index in range(count):
        start = reader.offset
        name_length = reader.u32(f"name length of entry {index}")
        try:
            name = reader.take(name_length, f"name of entry {index}").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptionError(f"entry {index} name is not UTF-8", start) from None
        if name in entries:
            raise CorruptionError(f"duplicate entry {name!r}", start)
        rank = reader.u32(f"rank of {name!r}")
        shape = tuple(reader.u64(f"dims of {name!r}") for _ in range(rank))
        payload_start = reader.offset
        raw = reader.take(8 * math.prod(shape), f"payload of {name!r}")
        try:
            entries[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        except (ValueError, OverflowError):
            raise CorruptionError(f"entry {name!r} has an unrepresentable shape {shape}", payload_start) from None
    metadata: dict[str, Any] = {}
    if reader.remaining:
        start = reader.offset
        if reader.take(min(4, reader.remaining), "metadata marker") != META_MAGIC:
            raise CorruptionError("unexpected bytes after the last entry", start)
        length = reader.u32("metadata length")
        try:
            metadata = json.loads(reader.take(length, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CorruptionError("metadata is not valid JSON", start) from None
        if reader.remaining:
            raise CorruptionError("unexpected bytes after metadata", reader.offset)
    return Checkpoint(entries, metadata)


def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "wb") as stream:
            stream.write(payload)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(checkpoint))
    logger.debug("saved %d entries to %s", len(checkpoint.entries), path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def model_metadata(model: ClassifierModel) -> dict[str, Any]:
    return {
        "model": {
            "input_dim": model.config.input_dim,
            "hidden_dims": list(model.config.hidden_dims),
            "activation": model.config.activation.value,
            "seed": model.config.seed,
            "head": [[row.class_id, row.task_id] for row in model.head.rows],
        }
    }


def model_from_checkpoint(checkpoint: Checkpoint) -> ClassifierModel:
    """Rebuild a classifier from a parameter checkpoint written with model metadata."""
    spec: Optional[Mapping[str, Any]] = checkpoint.metadata.get("model")
    if spec is None:
        raise InputError("checkpoint carries no model description")
    config = MlpConfig(
        input_dim=spec["input_dim"],
        hidden_dims=spec["hidden_dims"],
        activation=Activation(spec["activation"]),
        seed=spec["seed"],
    )
    head = IncrementalHead(tuple(HeadRow(int(c), int(t)) for c, t in spec["head"]))
    model = ClassifierModel(config, checkpoint.params, head)
    expected = set(model.backbone_names) | set(head.entry_names)
    if expected != set(model.params):
        raise InputError("checkpoint entries do not match its model description")
    return model

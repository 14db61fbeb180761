import struct
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from mergecl.autodiff import ParamSet
from mergecl.checkpoint import (
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    model_metadata,
    save_checkpoint,
)
from mergecl.errors import CorruptionError, FormatError, InputError
from mergecl.fisher import FisherDiag
from mergecl.model import ClassifierModel


def random_entries(rng: np.random.Generator) -> dict[str, np.ndarray]:
    entries = {}
    for index in range(int(rng.integers(0, 5))):
        shape = tuple(int(d) for d in rng.integers(0, 4, size=int(rng.integers(0, 4))))
        entries[f"e{index}.w"] = rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300)
    return entries


def test_random_checkpoints_round_trip_bit_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        entries = random_entries(rng)

        decoded = decode_checkpoint(encode_checkpoint(Checkpoint(entries)))

        assert sorted(decoded.entries) == sorted(entries)
        for name, array in entries.items():
            assert decoded.entries[name].shape == array.shape
            assert decoded.entries[name].tobytes() == np.asarray(array, dtype="<f8").tobytes()


def test_special_values_survive():
    entries = {"w": np.array([np.nan, np.inf, -np.inf, -0.0, 5e-324])}

    decoded = decode_checkpoint(encode_checkpoint(Checkpoint(entries)))

    assert decoded.entries["w"].tobytes() == entries["w"].tobytes()


def test_layout_starts_with_magic_version_and_count():
    payload = encode_checkpoint(Checkpoint({"a": np.array(1.5)}))

    assert payload[:4] == b"CFMA"
    assert struct.unpack("<II", payload[4:12]) == (1, 1)
    assert payload[12:16] == struct.pack("<I", 1)
    assert payload[16:17] == b"a"
    assert payload[17:21] == struct.pack("<I", 0)
    assert payload[21:] == struct.pack("<d", 1.5)


def test_bad_magic_is_a_format_error():
    payload = b"XXXX" + encode_checkpoint(Checkpoint({"a": np.ones(2)}))[4:]

    with pytest.raises(FormatError):
        decode_checkpoint(payload)


def test_unknown_version_is_a_format_error():
    payload = bytearray(encode_checkpoint(Checkpoint({"a": np.ones(2)})))
    payload[4:8] = struct.pack("<I", 99)

    with pytest.raises(FormatError, match="99"):
        decode_checkpoint(bytes(payload))


def test_truncation_reports_the_offset():
    payload = encode_checkpoint(Checkpoint({"a": np.ones(3)}))

    with pytest.raises(CorruptionError) as excinfo:
        decode_checkpoint(payload[:-4])

    assert excinfo.value.offset == len(payload) - 24


def test_entry_count_larger_than_payload_is_corruption():
    payload = bytearray(encode_checkpoint(Checkpoint({"a": np.ones(2)})))
    payload[8:12] = struct.pack("<I", 2)

    with pytest.raises(CorruptionError):
        decode_checkpoint(bytes(payload))


@pytest.mark.parametrize("dims", [(2**62, 4), (2**64 - 1, 0)])
def test_absurd_dimensions_are_corruption(dims: tuple[int, int]):
    header = b"CFMA" + struct.pack("<II", 1, 1)
    entry = struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<QQ", *dims)

    with pytest.raises(CorruptionError) as excinfo:
        decode_checkpoint(header + entry + bytes(16))

    assert excinfo.value.offset == len(header) + len(entry)


def test_trailing_garbage_is_corruption():
    payload = encode_checkpoint(Checkpoint({"a": np.ones(2)})) + b"junk"

    with pytest.raises(CorruptionError):
        decode_checkpoint(payload)


def test_metadata_and_fisher_ride_along(tmp_path: Path):
    params = ParamSet({"w": [1.0, 2.0]})
    fisher = FisherDiag({"w": [0.5, 0.25]})
    path = tmp_path / "task_01.ckpt"

    save_checkpoint(path, Checkpoint.build(params=params, fisher=fisher, task=1, config_hash="abc"))
    loaded = load_checkpoint(path)

    assert loaded.params == params
    assert loaded.fisher == fisher
    assert loaded.metadata == {"task": 1, "config_hash": "abc"}
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_fisher_entries():
    assert Checkpoint.build(params=ParamSet({"w": [1.0]})).fisher is None


def test_model_round_trips_through_metadata(tmp_path: Path, make_model: Callable[..., ClassifierModel]):
    model = make_model(hidden_dims=[3, 2], classes=[4, 1])
    path = tmp_path / "model.ckpt"

    save_checkpoint(path, Checkpoint.build(params=model.params, **model_metadata(model)))
    restored = model_from_checkpoint(load_checkpoint(path))

    assert restored.params == model.params
    assert restored.head == model.head
    assert restored.config == model.config


def test_model_needs_a_description():
    with pytest.raises(InputError):
        model_from_checkpoint(Checkpoint({"w": np.ones(1)}))

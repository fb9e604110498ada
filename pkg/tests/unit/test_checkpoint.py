import json

import numpy as np
import pytest

from s4ecg.checkpoint import load_checkpoint, save_checkpoint
from s4ecg.errors import CheckpointError

pytestmark = pytest.mark.unit


def test_values_and_metadata_survive(tmp_path) -> None:
    path = str(tmp_path / "nested" / "model.ckpt")
    state = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5], dtype=np.float32)}

    save_checkpoint(path, state, {"codes": ["AF", "NORM"]})
    loaded, metadata = load_checkpoint(path)

    np.testing.assert_array_equal(loaded["a"], state["a"])
    assert loaded["b"].dtype == np.float32
    assert metadata == {"codes": ["AF", "NORM"]}


def test_unreadable_file(tmp_path) -> None:
    path = tmp_path / "broken.ckpt"
    path.write_text("{not json")

    with pytest.raises(CheckpointError, match="Could not read"):
        load_checkpoint(str(path))


def test_missing_file(tmp_path) -> None:
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_foreign_format(tmp_path) -> None:
    path = tmp_path / "other.ckpt"
    path.write_text(json.dumps({"format": "something-else", "version": 1}))

    with pytest.raises(CheckpointError, match="not an s4ecg checkpoint"):
        load_checkpoint(str(path))


@pytest.mark.parametrize(
    "document, message",
    [
        ({"format": "s4ecg-checkpoint"}, "no version"),
        ({"format": "s4ecg-checkpoint", "version": 99}, "Unsupported checkpoint version"),
    ],
)
def test_version_checks(tmp_path, document, message) -> None:
    path = tmp_path / "model.ckpt"
    path.write_text(json.dumps(document))

    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(str(path))


def test_corrupt_parameter(tmp_path) -> None:
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), {"a": np.ones(4)}, {})
    document = json.loads(path.read_text())
    document["parameters"]["a"]["shape"] = [3]
    path.write_text(json.dumps(document))

    with pytest.raises(CheckpointError, match="Could not decode parameter a"):
        load_checkpoint(str(path))

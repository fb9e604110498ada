"""Self-describing JSON containers for parameter checkpoints.

A checkpoint maps parameter names to their shape and little-endian values (base64) and carries a
free-form metadata dictionary, e.g. the configurations a model was trained with.
"""

import base64
import json
import logging
import os
from typing import Any, Dict, Tuple

import numpy as np

from s4ecg.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "s4ecg-checkpoint"
CHECKPOINT_VERSION = 1


def _encode_array(values: np.ndarray) -> Dict[str, Any]:
    little_endian = np.ascontiguousarray(values).astype(values.dtype.newbyteorder("<"), copy=False)
    return {
        "shape": list(values.shape),
        "dtype": little_endian.dtype.str,
        "data": base64.b64encode(little_endian.tobytes()).decode("ascii"),
    }


def _decode_array(name: str, entry: Dict[str, Any]) -> np.ndarray:
    try:
        raw = base64.b64decode(entry["data"])
        values = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Could not decode parameter {name}") from e
    return values.astype(values.dtype.newbyteorder("="))


def save_checkpoint(path: str, state: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> None:
    """Writes parameters and metadata to a JSON checkpoint.

    Args:
        path: target file, parent directories are created
        state: mapping from parameter names to arrays
        metadata: JSON-serializable description (configurations, vocabulary, ...)
    """
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata,
        "parameters": {name: _encode_array(np.asarray(values)) for name, values in state.items()},
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="UTF-8") as f:
        json.dump(document, f)
    logger.info("Wrote checkpoint with %d parameters to %s", len(state), path)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Reads a checkpoint written by `save_checkpoint`.

    Returns:
        the parameter mapping and the metadata

    Raises:
        CheckpointError: on unreadable files, foreign formats or version mismatches
    """
    try:
        with open(path, "r", encoding="UTF-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Could not read the checkpoint {path}.") from e
    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an s4ecg checkpoint")
    if "version" not in document:
        raise CheckpointError(f"{path} has no version field")
    if document["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {document['version']} in {path}")
    state = {name: _decode_array(name, entry) for name, entry in document.get("parameters", {}).items()}
    return state, document.get("metadata", {})

"""Utility functions for s4ecg"""

import ast
import hashlib
import os
from typing import Any, Dict, Iterable, List

import numpy as np

from s4ecg.errors import ConfigError


def content_hash(paths: Iterable[str], extra: Iterable[str] = ()) -> str:
    """SHA-256 over the contents of files (directories recursively, in sorted order) and extra strings.

    Args:
        paths: files or directories whose contents are hashed
        extra: strings mixed into the hash, e.g. serialized configurations

    Returns:
        hex digest
    """
    digest = hashlib.sha256()
    for path in paths:
        if os.path.isdir(path):
            files = sorted(os.path.join(root, name) for root, _, names in os.walk(path) for name in names)
        else:
            files = [path]
        for file in files:
            digest.update(os.path.relpath(file, path if os.path.isdir(path) else os.path.dirname(file)).encode())
            with open(file, "rb") as f:
                for block in iter(lambda: f.read(1 << 20), b""):
                    digest.update(block)
    for value in extra:
        digest.update(value.encode("UTF-8"))
    return digest.hexdigest()


def derive_seeds(seed: int, n: int) -> List[int]:
    """n independent run seeds derived from a master seed"""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n)]


def parse_value(text: str) -> Any:
    """A Python literal if the text is one, otherwise the text itself"""
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_overrides(assignments: Iterable[str]) -> Dict[str, Any]:
    """Parses `key=value` assignments from the command line.

    Raises:
        ConfigError: if an assignment has no `=` or an empty key
    """
    overrides = {}
    for assignment in assignments:
        key, sep, value = assignment.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Expected key=value, got {assignment!r}")
        overrides[key.strip()] = parse_value(value.strip())
    return overrides

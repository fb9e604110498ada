"""Helpers for reading and writing the delimited text tables (manifests, predictions, logs)"""

import os
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

SEPARATOR = "\t"
COMMENT = "#"


def read_table(path: str, numeric: bool = False) -> pd.DataFrame:
    """Reads a tab separated table with a header, skipping `#` comment lines.

    Args:
        path: file to read
        numeric: whether pandas may infer column types; otherwise every cell is a string and empty
            cells stay empty strings

    Returns:
        the table
    """
    if numeric:
        return pd.read_csv(path, sep=SEPARATOR, comment=COMMENT)
    return pd.read_csv(path, sep=SEPARATOR, comment=COMMENT, dtype=str, keep_default_na=False)


def read_comments(path: str) -> list:
    """Leading `#` lines of a table, without the marker"""
    comments = []
    with open(path, "r", encoding="UTF-8") as f:
        for line in f:
            if not line.startswith(COMMENT):
                break
            comments.append(line[len(COMMENT) :].strip())
    return comments


def write_table(df: pd.DataFrame, path: str, comments: Optional[Iterable[str]] = None) -> None:
    """Writes a tab separated table, preceded by optional `#` comment lines"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="UTF-8", newline="") as f:
        for comment in comments or ():
            f.write(f"{COMMENT} {comment}\n")
        df.to_csv(f, sep=SEPARATOR, index=False, lineterminator="\n", float_format="%.17g")


def encode_vector(values: Sequence[Any], integer: bool = False) -> str:
    """Comma separated cell for a vector, exact for float64 values"""
    if integer:
        return ",".join(str(int(v)) for v in values)
    return ",".join(repr(float(v)) for v in values)


def decode_vector(cell: str, dtype: Any = np.float64) -> np.ndarray:
    cell = str(cell).strip()
    if not cell:
        return np.zeros(0, dtype=dtype)
    return np.array([float(v) for v in cell.split(",")], dtype=dtype)

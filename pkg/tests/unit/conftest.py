from typing import Any, Callable, Iterator, List

import numpy as np
import pandas as pd
import pytest

from s4ecg.data import Dataset
from s4ecg.synth import SynthSpec, synth_generate
from s4ecg.tensor import Tensor, get_default_dtype, no_grad, set_default_dtype


@pytest.fixture(autouse=True)
def float64() -> Iterator[None]:
    previous = get_default_dtype()
    set_default_dtype("float64")
    yield
    set_default_dtype(previous)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset() -> Dataset:
    return synth_generate(SynthSpec("freq", n_records=40, fs=50.0, duration=2.0, n_channels=3), seed=3)


def numerical_gradients(build: Callable[..., Tensor], arrays: List[np.ndarray], eps: float = 1e-6) -> List[np.ndarray]:
    """Central differences of the scalar build(*tensors) with respect to every entry of every array"""
    grads = []
    for index, array in enumerate(arrays):
        grad = np.zeros_like(array)
        for position in np.ndindex(array.shape):
            values = [a.copy() for a in arrays]
            values[index][position] += eps
            with no_grad():
                upper = build(*[Tensor(v) for v in values]).item()
            values[index][position] -= 2 * eps
            with no_grad():
                lower = build(*[Tensor(v) for v in values]).item()
            grad[position] = (upper - lower) / (2 * eps)
        grads.append(grad)
    return grads


def gradient_error(build: Callable[..., Tensor], *arrays: np.ndarray, eps: float = 1e-6) -> float:
    """Largest relative error between the tape gradients of build(*tensors) and central differences"""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    errors = []
    for tensor, numeric in zip(tensors, numerical_gradients(build, arrays, eps)):
        analytic = tensor.grad
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        errors.append(np.linalg.norm(analytic - numeric) / scale)
    return float(max(errors))


def assert_tables_equal(left: pd.DataFrame, right: pd.DataFrame, **kwargs: Any) -> None:
    """Compares two tables regardless of the order of their rows and columns"""
    columns = sorted(left.columns)
    left_sorted = left[columns].sort_values(columns).reset_index(drop=True)
    right_sorted = right[sorted(right.columns)].sort_values(sorted(right.columns)).reset_index(drop=True)
    pd.testing.assert_frame_equal(left_sorted, right_sorted, **kwargs)

from typing import Iterator

import pytest

from s4ecg.tensor import get_default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def float64() -> Iterator[None]:
    previous = get_default_dtype()
    set_default_dtype("float64")
    yield
    set_default_dtype(previous)

# tests/conftest.py
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

import pytest  # noqa: E402

from app.tensor import set_default_dtype  # noqa: E402
from app.utils.types import Precision  # noqa: E402


@pytest.fixture(autouse=True)
def _f64_tensors():
    """Every test starts in 64-bit mode; pipeline commands switch precision globally."""
    set_default_dtype(Precision.F64)
    yield
    set_default_dtype(Precision.F64)

import pytest

from pqgen import tensor


@pytest.fixture(autouse=True)
def _fresh_tape():
    tensor.reset_tape()
    yield
    tensor.reset_tape()

import numpy as np
import pytest

from motionssm import tensor as T


@pytest.fixture(autouse=True)
def _clean_tensor_state():
    """Each test starts from a fresh tape, float32 default, checked mode off."""
    T.reset_tape()
    T.set_default_dtype(np.float32)
    T.set_checked(False)
    yield
    T.reset_tape()
    T.set_default_dtype(np.float32)
    T.set_checked(False)


@pytest.fixture
def f64():
    with T.using_dtype(np.float64):
        yield np.float64

import numpy as np
import pytest

from geodepth import autodiff


@pytest.fixture(autouse=True)
def _reset_precision():
    # keep the process-global dtype from leaking between tests
    yield
    autodiff.set_default_dtype(np.float32)
    autodiff.set_debug(False)

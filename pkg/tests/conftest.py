import logging

import numpy as np
import pytest

# epoch-by-epoch INFO lines drown the acceptance PASS lines under -s
logging.getLogger("cgldetect").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

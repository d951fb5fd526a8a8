import warnings

import numpy as np
import pytest

from sdkit.core import ConvLayer
from sdkit.synth import generate_in_memory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def layer_with(weight, bias=None, **kw):
    """A ConvLayer whose parameters are replaced by the given tensors/arrays."""
    from sdkit.core import as_tensor

    w = as_tensor(weight)
    o, c, k, _ = w.shape
    layer = ConvLayer(c, o, k, **kw)
    layer.weight = w
    layer.bias = as_tensor(np.zeros(o) if bias is None else bias)
    return layer


@pytest.fixture(scope="session")
def tiny_data():
    """Small in-memory dataset (32 x 64) shared by trainer and CLI tests."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate_in_memory(10, height=32, width=64, seed=5)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

from numcode.encoders import Normalizer  # noqa: E402
from numcode.numtext import CharVocab  # noqa: E402
from numcode.seqmodel import ModelConfig, SeqModel  # noqa: E402


@pytest.fixture(scope="session")
def vocab():
    return CharVocab()


@pytest.fixture
def model():
    return SeqModel.create(ModelConfig(), seed=0, normalizer=Normalizer(5.0, 3.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(test_acceptance.RESULTS):
        ok, detail = test_acceptance.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from data2eqn.expr import Vocabulary
from data2eqn.model import Policy
from data2eqn.nn import ModelConfig

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_VOCAB = Vocabulary(mantissa_digits=1, exponent_range=1, n_variables=3)
TINY_CONFIG = ModelConfig(width=8, enc_layers=2, dec_layers=2, heads=2, ff_mult=2,
                          memory_slots=2, inducing_points=3, max_len=8)


@pytest.fixture
def tiny_vocab():
    return TINY_VOCAB


@pytest.fixture
def tiny_policy():
    return Policy(TINY_CONFIG, TINY_VOCAB, seed=3)


@pytest.fixture
def small_policy():
    """Default vocabulary, narrow network: fast but realistic decoding."""
    return Policy(ModelConfig(width=16, enc_layers=1, dec_layers=1, heads=2, memory_slots=2,
                              inducing_points=4), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """``verdict(n, ok, detail)`` prints and records one PASS/FAIL line, then asserts."""
    import time
    start = time.perf_counter()
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def verdict(number, ok, detail=""):
        line = (f"criterion {number}: {'PASS' if ok else 'FAIL'} "
                f"({time.perf_counter() - start:.1f}s) {detail}").rstrip()
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

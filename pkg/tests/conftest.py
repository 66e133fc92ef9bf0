import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ratlab import tensor as T
from ratlab.data import SyntheticSpec, synthetic_task
from ratlab.models import ModelConfig, ModelParams, collate

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = SyntheticSpec(n_train=64, n_dev=16, n_test=16, seed=3)


@pytest.fixture(autouse=True)
def _fresh_graph():
    T.new_graph()
    yield
    T.new_graph()


@pytest.fixture(scope="session")
def ner_data():
    return synthetic_task("ner", TINY)


@pytest.fixture(scope="session")
def re_data():
    return synthetic_task("re", TINY)


def tiny_model(data, dim=6, hidden=8, attention=False, seed=0):
    cfg = ModelConfig(data.task, len(data.vocab), len(data.labels), dim=dim, hidden=hidden, attention=attention)
    return ModelParams.init(cfg, np.random.default_rng(seed))


@pytest.fixture
def ner_batch(ner_data):
    return collate(ner_data.train[:4], "ner")


@pytest.fixture
def re_batch(re_data):
    return collate(re_data.train[:4], "re")


# (criterion number, passed, title, detail) collected by tests/test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, title, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} | {detail}")

import numpy as np
import pytest
from hypothesis import settings

from sagefaith.toymm import ModelConfig, build_model

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def params():
    return build_model(ModelConfig())


@pytest.fixture(scope="session")
def small_params():
    return build_model(ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=16, grid_h=2, grid_w=2, n_sys=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the outcome is filled in after the test runs."""
    def mark(number: int, title: str):
        request.config.stash.setdefault(CRITERIA, {})[request.node.nodeid] = (number, title)
    return mark


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entries = item.config.stash.get(CRITERIA, {})
    if item.nodeid in entries and (rep.when == "call" or rep.failed):
        number, title = entries[item.nodeid][:2]
        entries[item.nodeid] = (number, title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter, config):
    entries = [e for e in config.stash.get(CRITERIA, {}).values() if len(e) == 3]
    if not entries:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(entries):
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")

import numpy as np
import pytest

from mvhidden.chain import GridSpec
from mvhidden.model import control_set, example_71, make_model

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_logreport(report):
    marks = getattr(report, "criterion", None)
    if marks is None:
        return
    number, title = marks
    entry = _criteria.setdefault(number, {"title": title, "failed": False, "ran": False})
    if report.when == "call" or report.outcome != "passed":
        entry["ran"] = True
        entry["failed"] |= report.outcome != "passed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "FAIL" if entry["failed"] else ("PASS" if entry["ran"] else "SKIP")
        terminalreporter.write_line(f"[{status}] criterion {number}: {entry['title']}")
        for line in entry.get("notes", []):
            terminalreporter.write_line(f"    {line}")


@pytest.fixture
def note(request):
    """Attach a measured value to the summary line of the test's criterion."""
    mark = request.node.get_closest_marker("criterion")
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "failed": False, "ran": False})

    def add(text):
        entry.setdefault("notes", []).append(text)
        print(text)

    return add


@pytest.fixture(scope="session")
def ex71():
    return example_71()


@pytest.fixture(scope="session")
def ex71_grid(ex71):
    return GridSpec.build(ex71, 0.25, 0.001, 0.0, 6.0, "reduced")


@pytest.fixture(scope="session")
def ex71_controls():
    return control_set(-2.0, 2.0, 41)


def gbm_toy(r=0.05, b=0.15, sigma=0.3, T=1.0):
    """Single regime, one risky node with constant coefficients."""
    return make_model(
        Q=[[0.0]],
        g=[0.0],
        sigma0=1.0,
        r=([r], [0.0]),
        b=([[b]], [[0.0]]),
        sigma_bar=([[[sigma]]], [[[0.0]]]),
        horizon=(0.0, T),
        name="gbm",
    )


def two_regime_toy(T=1.0):
    return make_model(
        Q=[[-1.0, 1.0], [2.0, -2.0]],
        g=[0.0, 1.0],
        sigma0=0.5,
        r=([0.1, 0.2], [0.0, 0.0]),
        b=([[0.3, -0.1]], [[0.0, 0.0]]),
        sigma_bar=([[[0.2, 0.4]]], [[[0.0, 0.0]]]),
        horizon=(0.0, T),
        name="toy2",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

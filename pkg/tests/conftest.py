import numpy as np
import pytest

from cvrnet.model import build
from cvrnet.synthetic import TOY_CONFIG as TOY
from cvrnet.synthetic import write_toy_dataset


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """200 synthetic 32x32 grayscale images, two linearly separable classes."""
    root = tmp_path_factory.mktemp("toy") / "data"
    write_toy_dataset(root, 100)
    return root


@pytest.fixture
def toy_model():
    return build(TOY, init_seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------------

_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        if _CRITERIA.get(name) != "FAIL":
            _CRITERIA[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        number, _, label = name.removeprefix("test_criterion_").partition("_")
        terminalreporter.write_line(f"{_CRITERIA[name]}  criterion {int(number)}: {label.replace('_', ' ')}")

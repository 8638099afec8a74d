import pytest

from test.fixtures import bimodal, rng, sde  # noqa: F401


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the trainings behind the slow marker")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks for minutes")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return

    skip = pytest.mark.skip(reason="needs --runslow")

    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)

import pytest

from rar_forge.dataset import SyntheticWorldConfig, generate_synthetic
from rar_forge.trainer import Environment

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (call.when == "call" and report.outcome != "passed")
    if report.when == "setup" and report.failed:
        _criteria[number] = (title, "FAIL")
    elif report.when == "call":
        _criteria[number] = (title, "FAIL" if failed else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {title}")


@pytest.fixture(scope="session")
def world():
    return generate_synthetic(SyntheticWorldConfig(num_users=20, seed=3))


@pytest.fixture(scope="session")
def env(world):
    return Environment(world)

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from camsticker import _pykernels, kernels  # noqa: E402

try:
    from camsticker import _ckernels
except ImportError:  # extension not built
    _ckernels = None


@pytest.fixture(params=["cython", "python"])
def kernel_backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    if request.param == "cython":
        if _ckernels is None:
            pytest.skip("compiled extension not built")
        impl = _ckernels
    else:
        impl = _pykernels
    for name in kernels.__all__[1:]:
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        _CRITERIA.append(f"{status:<5} {mark.args[0]}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)

import os
import pathlib
import sys

import pytest
import torch

sys.path.insert(0, str(pathlib.Path(__file__).parent))

if os.environ.get("FOVEALSEG_THREADS"):
    torch.set_num_threads(max(int(os.environ["FOVEALSEG_THREADS"]), 1))

_criteria: list[tuple[str, str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        ok = rep.passed and not hasattr(rep, "wasxfail")
        detail = dict(item.user_properties).get("detail", "")
        _criteria.append((mark.args[0], "PASS" if ok else "FAIL", mark.args[1], detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid, status, text, detail in _criteria:
        line = f"criterion {cid:<3} {status}  {text}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""),
                                    green=status == "PASS", red=status == "FAIL")

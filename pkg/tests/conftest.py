import pytest
import torch

torch.set_flush_denormal(True)

_criteria: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if status == "FAIL" and not detail:
        detail = rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else ""
    previous = _criteria.get(number)
    if previous is None or previous[1] == "PASS":
        _criteria[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))

from __future__ import annotations

import re

_RESULTS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "ran": False, "detail": []})
    if call.when == "call":
        entry["ran"] = True
        if call.excinfo is not None:
            entry["ok"] = False
            msg = str(call.excinfo.value).strip().splitlines()
            if msg:
                entry["detail"].append(re.sub(r"\s+", " ", msg[0])[:160])
    elif call.excinfo is not None:
        entry["ok"] = False
    for key, val in item.user_properties:
        if key == "detail" and val not in entry["detail"]:
            entry["detail"].append(val)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        status = "PASS" if (e["ok"] and e["ran"]) else "FAIL"
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"criterion {n} [{status}] {e['title']}" + (f" :: {detail}" if detail else ""))

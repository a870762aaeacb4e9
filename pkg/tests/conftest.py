import json
from pathlib import Path

import numpy as np
import pytest

from udeep.imaging import ImageBuffer, save_png

_acceptance_lines = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = report.keywords.get("acceptance")
    if not marker:
        return
    status = "PASS" if report.passed else ("XFAIL" if report.skipped else "FAIL")
    doc = getattr(report, "criterion", None) or report.nodeid.split("::")[-1]
    _acceptance_lines.append(f"[{status}] {doc}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        rep.criterion = mark.args[0] if mark.args else item.name


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def blob_image(width=200, height=160, rect=(60, 40, 80, 80), bg=20, fg=230, source="frame"):
    px = np.full((height, width, 3), bg, dtype=np.uint8)
    x, y, w, h = rect
    px[y:y + h, x:x + w] = fg
    return ImageBuffer(px, source)


@pytest.fixture
def write_image(tmp_path):
    def _write(name, img, boxes=None, directory=None):
        directory = Path(directory or tmp_path)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / name
        save_png(img, path)
        if boxes is not None:
            path.with_suffix(".txt").write_text("".join(b + "\n" for b in boxes))
        return path

    return _write


@pytest.fixture
def write_json(tmp_path):
    def _write(name, obj):
        path = tmp_path / name
        path.write_text(json.dumps(obj))
        return path

    return _write

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vipseval.core import CategoryTable, VideoPanopticSequence  # noqa: E402


@pytest.fixture
def cats():
    return CategoryTable([
        {"category_id": 1, "name": "sky", "is_thing": False},
        {"category_id": 2, "name": "road", "is_thing": False},
        {"category_id": 3, "name": "person", "is_thing": True},
        {"category_id": 4, "name": "car", "is_thing": True},
    ])


@pytest.fixture
def scene(cats):
    """Two 4x6 frames: sky/road bands, person 7 moving right, car 8 static."""
    f = np.zeros((2, 4, 6), dtype=np.uint32)
    f[:, :2, :] = 101
    f[:, 2:, :] = 102
    f[0, 1:3, 0:2] = 7
    f[1, 1:3, 1:3] = 7
    f[:, 2:4, 4:6] = 8
    f[1, 0, 5] = 0
    return VideoPanopticSequence("v0", f, {101: 1, 102: 2, 7: 3, 8: 4}, cats)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

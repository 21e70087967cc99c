"""The twelve acceptance criteria, one test each; a pass/fail line per criterion is printed at the end of the run."""

from __future__ import annotations

import pytest

from conftest import ACCEPTANCE_LINES
from geobeams.acceptance import CRITERIA, format_line, run_criterion

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    r = run_criterion(number)
    line = format_line(r)
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert r.passed, line

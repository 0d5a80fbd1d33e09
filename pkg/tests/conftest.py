import datetime as dt

import numpy as np
import pytest

from mcdtsf.data import RawSeries, make_windows, stack_windows
from mcdtsf.featenc import Frequency
from mcdtsf.textcond import TextDocument

_ACCEPTANCE: dict[int, str] = {}


def tiny_batch(n_windows: int = 6, history: int = 4, horizon: int = 2, seed: int = 0, text: bool = True):
    """A short monthly series cut into windows, with a report on every other month."""
    rng = np.random.default_rng(seed)
    n = n_windows + history + horizon - 1
    freq = Frequency.MONTHLY
    dates = [freq.step(dt.date(2001, 1, 1), i) for i in range(n)]
    series = RawSeries(dates, rng.standard_normal((n, 1)), freq, ["value"])
    docs = [TextDocument(d, d, f"value will shift {'up' if i % 4 else 'down'}")
            for i, d in enumerate(dates) if i % 2 == 0]
    windows = make_windows(series, horizon, history, docs if text else (), "value")
    return stack_windows(windows)


@pytest.fixture
def acceptance():
    """Records one PASS/FAIL line per acceptance criterion and prints it."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])

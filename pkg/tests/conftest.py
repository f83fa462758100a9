import numpy as np
import pytest

from concept_forgetting.features import FeatureMatrix


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_matrix(data, labels=None, **kw):
    kw.setdefault("label_count", None if labels is None else int(np.max(labels)) + 1)
    return FeatureMatrix.from_array(np.asarray(data, dtype=np.float32), labels, **kw)


# acceptance results, printed as one line per criterion at the end of the session
ACCEPTANCE: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

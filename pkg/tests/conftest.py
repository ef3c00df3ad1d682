import os

import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True, scope="session")
def _extractor_cache(tmp_path_factory):
    os.environ.setdefault("GENIMG_CACHE", str(tmp_path_factory.mktemp("genimg_cache")))
    yield


class CriterionRecord:
    """One acceptance criterion: named sub-checks plus free-form measurements."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.checks = {}
        self.notes = []
        self.finished = False

    def check(self, label, ok, detail=""):
        self.checks[label] = bool(ok)
        if detail:
            self.notes.append(f"{label}: {detail}")
        return bool(ok)

    def note(self, text):
        self.notes.append(text)

    @property
    def passed(self):
        return self.finished and bool(self.checks) and all(self.checks.values())

    def assert_passed(self):
        self.finished = True
        failed = [k for k, v in self.checks.items() if not v]
        assert not failed, f"criterion {self.number} failed checks: {failed}; " + "; ".join(self.notes)


@pytest.fixture
def criterion(request):
    records = request.config.__dict__.setdefault("_acceptance_records", {})

    def make(number, title):
        rec = CriterionRecord(number, title)
        records[number] = rec
        return rec

    return make


def pytest_terminal_summary(terminalreporter, config):
    records = getattr(config, "_acceptance_records", {})
    if not records:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(records):
        rec = records[number]
        status = "PASS" if rec.passed else "FAIL"
        detail = "; ".join(rec.notes) if rec.notes else ""
        if not rec.finished:
            detail = "did not complete" + (f" ({detail})" if detail else "")
        terminalreporter.write_line(f"[{status}] {number:>2}. {rec.title} | {detail}")

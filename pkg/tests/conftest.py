import datetime as dt

import pytest

from crowdlend import synth
from crowdlend.dataset import ListingRecord, LoanRecord


@pytest.fixture(scope="session")
def small_loans():
    loans, _ = synth.generate(synth.GeneratorConfig(n=400, seed=11))
    return loans


@pytest.fixture(scope="session")
def small_market():
    return synth.generate_market(synth.GeneratorConfig(n=3000, seed=4))


def make_loan(i, amount=1000.0, rate=0.15, status="Completed", paid=None, created=None,
              originated=None, features=None, scorex=6, history=2000, grade="C",
              occupation=None, max_rate=0.35):
    originated = originated or dt.date(2007, 6, 15)
    created = created or originated
    listing = ListingRecord(f"L{i:04d}", amount, max_rate, created, grade, scorex, history,
                            features or {}, occupation, None)
    defaulted = status == "Defaulted"
    principal = amount if paid is None and not defaulted else (paid or 0.0)
    return LoanRecord(listing, rate, originated, 36, principal, 0.0, status, int(defaulted))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

"""Acceptance criteria, one test each.

Every test prints the criterion's PASS/FAIL line (plus its individual
checks) and asserts the verdict. Thresholds and runtime budgets live in
``freegrad.harness.acceptance``. The MNIST training criteria carry the
``slow`` marker (deselect with ``-m "not slow"``) but run by default.
"""

from __future__ import annotations

import pytest

from freegrad.harness.acceptance import BUDGETS, CRITERIA, MNIST_CRITERIA, SuiteOptions, run_criterion


@pytest.fixture(scope="module")
def opts(tmp_path_factory):
    return SuiteOptions(seed=0, out_dir=str(tmp_path_factory.mktemp("acceptance")))


def _params() -> list:
    return [pytest.param(n, id=f"criterion_{n:02d}", marks=[pytest.mark.slow] if n in MNIST_CRITERIA else [])
            for n in sorted(CRITERIA)]


def test_every_criterion_has_a_budget():
    assert set(CRITERIA) == set(BUDGETS) == set(range(1, 12))


@pytest.mark.parametrize("number", _params())
def test_criterion(number, opts, acceptance_report):
    res = run_criterion(number, opts)
    acceptance_report.append(res.line())
    print(res.line())
    for c in res.checks:
        print(f"      {'ok ' if c.passed else 'BAD'} {c.label}")
    for line in res.info:
        print(f"      info: {line}")
    assert res.checks, "criterion produced no checks"
    assert res.passed, res.line()

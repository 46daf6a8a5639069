"""Acceptance criteria 1-9, each run at its stated tolerance.

One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import pytest

from m4fuse import acceptance

_cache = {}
SUMMARY = []


def result(k):
    if k not in _cache:
        _cache[k] = acceptance.CRITERIA[k]()
    return _cache[k]


def record(k, label=None, passed=None, detail=None):
    res = result(k)
    passed = res.passed if passed is None else passed
    SUMMARY.append(f"[{'PASS' if passed else 'FAIL'}] criterion {label or k}: {res.title} "
                   f"({res.seconds:.1f}s) {detail if detail is not None else res.detail}")
    return passed


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6, 7])
def test_criterion(k):
    assert record(k), result(k).detail


def test_criterion_8_convergence():
    res = result(8)
    ok = res.detail["full_best"] >= 0.90 and not res.detail.get("over_time")
    d = {key: res.detail[key] for key in ("full_best", "full_final", "full_epochs")}
    assert record(8, "8a", ok, d), res.detail


def test_criterion_8_bridge_ablation_lower():
    res = result(8)
    ok = res.detail["off_final"] < res.detail["full_final"]
    d = {key: res.detail[key] for key in ("full_final", "off_final", "off_best")}
    assert record(8, "8b", ok, d), res.detail


def test_criterion_9():
    assert record(9), result(9).detail

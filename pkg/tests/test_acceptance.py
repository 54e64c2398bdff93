"""One test per acceptance criterion, each printing a PASS/FAIL line.

The degree-1 sweep behind criteria 5-8, 11, 12, 14, 16 and 17 is computed
once per session (verify.degree1_sweep is cached).
"""

import pytest

from glneck import verify

from conftest import ACCEPTANCE_LINES

CHECKS = sorted(verify.NUMBER.items(), key=lambda kv: kv[1])


@pytest.mark.parametrize("check", [fn for fn, _ in CHECKS],
                         ids=[f"c{k:02d}_{fn.__name__.removeprefix('check_')}" for fn, k in CHECKS])
def test_criterion(check):
    res = verify.run_check(check, seed=0)
    line = res.line()
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert res.criterion == verify.NUMBER[check]
    assert res.passed, f"{line}\n{res.detail}"

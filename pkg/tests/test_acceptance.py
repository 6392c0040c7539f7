"""Acceptance gate: every shipped guarantee, one pass/fail line each.

Each test runs one named check from cpalign.checks and prints a single
PASS/FAIL line with the measured detail, so the full gate can be read off a
plain pytest log (or reproduced with `cpalign check`).
"""

import pytest

from cpalign.checks import ALL_CHECKS, run_all

EXPECTED = (
    "window-counts",
    "similarity-op-budget",
    "warp-transport",
    "delay-compensation",
    "loss-gradients",
    "gradient-reversal",
    "fps-reference",
    "downsample-contract",
    "ambiguity-weights",
    "struct-conv",
    "fusion-algebra",
    "codec-bounds",
    "delay-sweep-ordering",
)


def test_gate_covers_all_checks():
    assert tuple(name for name, _ in ALL_CHECKS) == EXPECTED


@pytest.mark.parametrize("name", EXPECTED)
def test_criterion(name, capsys):
    result = run_all([name])[0]
    line = f"{'PASS' if result.passed else 'FAIL'} {name}: {result.detail}"
    with capsys.disabled():
        print(f"\n{line}")
    assert result.passed, line

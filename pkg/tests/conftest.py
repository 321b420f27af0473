"""Pytest hooks: one PASS/FAIL line per acceptance criterion.

The acceptance gate lives in ``test_acceptance.py`` with one test per
numbered criterion (``test_criterion_N_*``).  After the normal pytest
summary this hook prints a compact per-criterion verdict so a release
run can be read at a glance.
"""
from __future__ import annotations

import re

CRITERIA = {
    1: "zero-noise exactness (100-seed reconstruction + single-view batch)",
    2: "P3P oracle gate (500 random configurations)",
    3: "candidate-count reproduction and pruning floor",
    4: "calibrated-noise accuracy (50-seed batch)",
    5: "robustness to missing, dislodged and too-few detections",
    6: "detector recall, threshold and equivariance suite",
    7: "deterministic byte-identical reports",
}

_NODE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts: dict[int, str] = {}
    for outcome, label in (
        ("passed", "PASS"),
        ("skipped", "SKIP"),
        ("failed", "FAIL"),
        ("error", "FAIL"),
    ):
        for report in terminalreporter.stats.get(outcome, []):
            match = _NODE.search(getattr(report, "nodeid", ""))
            if match is None:
                continue
            num = int(match.group(1))
            prev = verdicts.get(num)
            if prev is None or _RANK[label] > _RANK[prev]:
                verdicts[num] = label
    if not verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(verdicts):
        name = CRITERIA.get(num, "unknown criterion")
        terminalreporter.write_line(f"criterion {num}: {verdicts[num]} - {name}")

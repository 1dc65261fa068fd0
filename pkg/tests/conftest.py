from __future__ import annotations

import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CRITERIA = {
    "complexity": "complexity oracles",
    "gradients": "gradient suite",
    "attention": "attention loop oracles",
    "metrics": "metric oracles",
    "one_step": "one-step property",
    "overfit": "single-sequence overfit",
    "generalization": "generalization vs persistence",
    "sampling": "sampling schedule",
    "schedule": "lr continuity and patience",
    "formats": "format round trips",
}

# filled by test_acceptance.py; one line per criterion in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key, title in CRITERIA.items():
        if key not in ACCEPTANCE:
            terminalreporter.write_line(f"[NOT RUN] {title}")
            continue
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {title}: {detail}")

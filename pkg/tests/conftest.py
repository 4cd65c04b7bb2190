import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def fixtures():
    from resolveq import builtin_fixtures

    return {record.device_id: record for record in builtin_fixtures()}


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, whatever the verbosity."""
    lines = []
    for outcome in ("passed", "failed", "xfailed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call" and outcome != "error":
                continue
            props = dict(getattr(report, "user_properties", []))
            if "criterion" not in props:
                continue
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((props["criterion"], verdict, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, verdict, detail in sorted(lines, key=lambda item: item[0]):
        terminalreporter.write_line(f"{verdict}  {criterion}" + (f"  [{detail}]" if detail else ""))

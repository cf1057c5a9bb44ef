import re


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    match = re.search(r"test_c(\d+)_(\w+)", report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    name = match.group(2).replace("_", " ")
    verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    print(f"\n[criterion {number:02d}] {verdict}: {name} "
          f"({report.duration:.1f}s)", flush=True)

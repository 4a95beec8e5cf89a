"""Session plumbing: pins BLAS to one thread (tiny matrices, and the
acceptance grid runs one process per core) and prints one PASS/FAIL/SKIP
line per acceptance criterion after the run."""

import os
import re
from collections import defaultdict

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

try:
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
except ImportError:  # best effort; the env vars above cover fresh processes
    pass

_CRITERION = re.compile(r"test_acceptance\.py.*::test_criterion(\d+)\w*")
_results = defaultdict(list)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    m = _CRITERION.search(report.nodeid)
    if m:
        _results[int(m.group(1))].append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tw = terminalreporter
    tw.section("acceptance criteria")
    for num in sorted(_results):
        outcomes = [o for _, o in _results[num]]
        if all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        elif any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        else:
            verdict = "PASS"
        parts = ", ".join(f"{nid.split('::')[-1]}={o}" for nid, o in _results[num])
        tw.write_line(f"{verdict} criterion {num}: {parts}")

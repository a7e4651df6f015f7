import itertools

import pytest

from ixpmeter.core import AddressScope, Hop, TraceRecord, parse_prefix

_ids = itertools.count()

_acceptance_results = {}


def make_trace(addrs, rtts=None, dst=None, src="200.87.0.10", ts=1_404_000_000,
               probe_id="p1", reached=None, flow_id=1):
    """Build a trace from responder addresses (None = star) and RTTs in us."""
    if rtts is None:
        rtts = [1000 * (i + 1) for i in range(len(addrs))]
    hops = tuple(Hop(i + 1, a, None if a is None else r) for i, (a, r) in enumerate(zip(addrs, rtts)))
    if dst is None:
        dst = next(a for a in reversed(addrs) if a is not None)
    if reached is None:
        last = next((a for a in reversed(addrs) if a is not None), None)
        reached = last == dst
    return TraceRecord(f"t{next(_ids)}", probe_id, ts, src, dst, flow_id, hops, reached)


@pytest.fixture
def scope():
    return make_scope()


def make_scope():
    return AddressScope([parse_prefix("200.87.0.0/16"), parse_prefix("190.129.0.0/16")],
                        [parse_prefix("203.0.113.0/24")])


def pytest_configure(config):
    for i in range(1, 12):
        config.addinivalue_line("markers", f"AC{i}: acceptance criterion {i}")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for mark in report.keywords:
        if mark.startswith("AC") and mark[2:].isdigit():
            prev = _acceptance_results.get(mark, True)
            _acceptance_results[mark] = prev and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    from test_acceptance import CRITERIA
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance_results, key=lambda k: int(k[2:])):
        status = "PASS" if _acceptance_results[key] else "FAIL"
        terminalreporter.write_line(f"{status}  {key}  {CRITERIA.get(key, '')}")

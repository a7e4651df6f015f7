import os
import struct

import pytest
from hypothesis import given, settings, strategies as st

from ixpmeter.core import parse_prefix
from ixpmeter.simnet import SimBackend, scenario
from ixpmeter.targets import build_targets
from ixpmeter.tracer import (US, DailyFileSink, DutyWindow, ListSink, ProbeReply,
                             RateLimiter, ReplyKind, SweepAborted, TraceConfig, VirtualClock,
                             inet_checksum, paris_echo_request, parse_icmp_reply, run_daily,
                             run_sweep, trace)


def test_trace_linear_three_hops():
    be = SimBackend(scenario("linear"), "linear")
    rec = trace("200.87.3.1", TraceConfig(), be, "p")
    assert [h.addr for h in rec.hops] == ["200.87.1.1", "200.87.2.1", "200.87.3.1"]
    assert rec.reached and rec.src == "200.87.0.1"


def test_trace_with_silenced_hop():
    s = scenario("linear")
    s.nodes[2]["labels"].append("silent")
    rec = trace("200.87.3.1", TraceConfig(), SimBackend(s, "linear"))
    assert [h.addr for h in rec.hops] == ["200.87.1.1", None, "200.87.3.1"]
    assert rec.reached


def test_trace_gives_up_after_gap_limit():
    s = scenario("linear")
    s.silent_prefixes = ["200.87.9.0/24"]
    rec = trace("200.87.9.9", TraceConfig(gap_limit=3), SimBackend(s, "linear"))
    assert not rec.reached
    assert [h.addr for h in rec.hops] == ["200.87.1.1", "200.87.2.1", "200.87.3.1", None, None, None]


class _Dead:
    src = "200.87.0.1"

    def __init__(self):
        self.clock = VirtualClock()
        self.calls = []

    def send(self, ttl, flow_id, dst):
        self.calls.append((ttl, flow_id, dst))
        self.clock.sleep_us(2 * US)
        return ProbeReply(None, None, ReplyKind.TIMEOUT)


def test_no_replies_at_all():
    be = _Dead()
    rec = trace("1.2.3.4", TraceConfig(attempts_per_ttl=2, gap_limit=5), be)
    assert not rec.reached and rec.responding() == []
    assert len(be.calls) == 10
    # the flow identifier never changes within a trace
    assert {c[1] for c in be.calls} == {1}


def test_ecmp_equal_flow_ids_give_equal_paths():
    s = scenario("ecmp")
    for flow in range(6):
        cfg = TraceConfig(flow_id=flow + 1)
        a = trace("200.87.99.9", cfg, SimBackend(s, "ecmp"))
        b = trace("200.87.99.9", cfg, SimBackend(s, "ecmp", start_us=86400 * US))
        assert [h.addr for h in a.hops] == [h.addr for h in b.hops]


def test_config_validation():
    with pytest.raises(ValueError):
        TraceConfig(max_ttl=0)
    with pytest.raises(ValueError):
        TraceConfig(probes_per_second=0)


def _max_in_window(times, width=US):
    best, j = 0, 0
    for i, t in enumerate(times):
        while times[j] <= t - width:
            j += 1
        best = max(best, i - j + 1)
    return best


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.lists(st.integers(0, 300_000), min_size=1, max_size=300))
def test_rate_limiter_sliding_window(rate, gaps):
    clock = VirtualClock()
    lim = RateLimiter(rate, clock)
    sent = []
    for g in gaps:
        clock.sleep_us(g)
        sent.append(lim.acquire())
    assert _max_in_window(sent) <= rate


def test_sweep_rate_cap_in_virtual_clock():
    s = scenario("bolivia-like")
    be = SimBackend(s, "lapaz", record_sends=True)
    targets = build_targets([parse_prefix("190.181.0.0/22")], seed=1)
    run_sweep(targets, TraceConfig(probes_per_second=20), None, ListSink(), be, "lapaz")
    assert len(be.sends) > 40
    assert _max_in_window(be.sends) <= 20


def test_window_parse():
    assert DutyWindow.parse("20h") == DutyWindow(0, 1200)
    assert DutyWindow.parse("00:00-00:00").empty
    assert DutyWindow.parse("22:00-02:00") == DutyWindow(1320, 240)
    assert DutyWindow.parse("00:00-24:00") == DutyWindow(0, 1440)
    with pytest.raises(ValueError):
        DutyWindow.parse("soon")


def test_window_open_and_next():
    w = DutyWindow(0, 1200)
    assert w.is_open(0) and w.is_open(19 * 3600 * US)
    assert not w.is_open(20 * 3600 * US)
    assert w.next_open(21 * 3600 * US) == 24 * 3600 * US
    night = DutyWindow(1320, 240)
    assert night.is_open(23 * 3600 * US) and night.is_open(25 * 3600 * US)
    assert night.next_open(12 * 3600 * US) == 22 * 3600 * US


def _linear_targets(n, silent=0):
    addrs = [f"200.87.{100 + i // 200}.{1 + i % 200}" for i in range(n)]
    return addrs, addrs[:silent]


def test_sweep_all_responsive():
    targets, _ = _linear_targets(100)
    be = SimBackend(scenario("linear"), "linear")
    summary = run_sweep(targets, TraceConfig(), DutyWindow(), ListSink(), be)
    assert summary.as_dict() == {"reached": 100}


def test_sweep_half_silent():
    s = scenario("linear")
    targets = [f"200.87.{100 + (i % 2)}.{1 + i // 2}" for i in range(100)]
    s.silent_prefixes = ["200.87.101.0/24"]
    sink = ListSink()
    summary = run_sweep(targets, TraceConfig(), DutyWindow(), sink, SimBackend(s, "linear"))
    assert summary.as_dict() == {"reached": 50, "unreached": 50}
    assert len(sink.records) == summary.total


def test_zero_window_sends_nothing():
    be = SimBackend(scenario("linear"), "linear", record_sends=True)
    targets, _ = _linear_targets(10)
    summary = run_sweep(targets, TraceConfig(), DutyWindow.parse("00:00-00:00"), ListSink(), be)
    assert summary.as_dict() == {} and be.sends == []


def test_probes_only_inside_window():
    s = scenario("linear")
    s.silent_prefixes = ["200.87.0.0/16"]  # slow traces: every probe times out
    be = SimBackend(s, "linear", start_us=0, record_sends=True)
    w = DutyWindow.parse("01:00-01:05")
    targets = [f"200.87.9.{i}" for i in range(1, 40)]
    run_sweep(targets, TraceConfig(probes_per_second=5), w, ListSink(), be)
    assert be.sends and all(w.is_open(t) for t in be.sends)
    assert be.sends[-1] > 86400 * US  # sweep spilled into the next day's window


class _BrokenSink(ListSink):
    def __init__(self, fail_after):
        super().__init__()
        self.fail_after = fail_after
        self.partial = False

    def write(self, record):
        if len(self.records) >= self.fail_after:
            raise OSError("disk full")
        super().write(record)

    def mark_partial(self):
        self.partial = True


def test_sink_failure_aborts_with_marker():
    targets, _ = _linear_targets(10)
    sink = _BrokenSink(3)
    with pytest.raises(SweepAborted) as ei:
        run_sweep(targets, TraceConfig(), None, sink, SimBackend(scenario("linear"), "linear"))
    assert sink.partial and ei.value.summary.partial
    assert ei.value.summary.total == 3


def test_daily_file_sink_and_run_daily(tmp_path):
    targets, _ = _linear_targets(5)
    sink = DailyFileSink(tmp_path, "pA")
    be = SimBackend(scenario("linear"), "linear", start_us=1_704_067_200 * US)
    out = run_daily(targets, TraceConfig(), DutyWindow(), sink, be, "pA", days=3)
    sink.close()
    assert [s.reached for s in out] == [5, 5, 5]
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["traces-pA-20240101.jsonl", "traces-pA-20240102.jsonl",
                     "traces-pA-20240103.jsonl"]


def test_paris_checksum_constant_across_sequence():
    for flow in (0, 1, 0x1234, 0xFFFF, 0xFFFE):
        sums = set()
        for seq in range(0, 65536, 997):
            pkt = paris_echo_request(0xBEEF, seq, flow)
            assert inet_checksum(pkt) == 0  # valid ICMP checksum
            sums.add(struct.unpack("!H", pkt[2:4])[0])
        assert sums == {flow}


def _ip_header(src, dst, proto=1):
    import socket
    return bytes([0x45, 0, 0, 0, 0, 0, 0, 0, 64, proto, 0, 0]) + \
        socket.inet_aton(src) + socket.inet_aton(dst)


def test_parse_time_exceeded_quotes_flow():
    echo = paris_echo_request(7, (5 << 8) | 1, 0xABCD)
    inner = _ip_header("200.87.0.1", "8.8.8.8") + echo
    outer = _ip_header("200.87.5.1", "200.87.0.1") + bytes([11, 0, 0, 0, 0, 0, 0, 0]) + inner
    info = parse_icmp_reply(outer)
    assert info["kind"] is ReplyKind.TTL_EXCEEDED
    assert (info["responder"], info["dst"], info["checksum"]) == ("200.87.5.1", "8.8.8.8", 0xABCD)
    assert info["seq"] >> 8 == 5 and info["ident"] == 7
    reply = _ip_header("8.8.8.8", "200.87.0.1") + struct.pack("!BBHHH", 0, 0, 0, 7, 9)
    assert parse_icmp_reply(reply)["kind"] is ReplyKind.ECHO_REPLY
    assert parse_icmp_reply(b"\x45" * 10) is None


@pytest.mark.skipif(os.geteuid() == 0, reason="root can open raw sockets")
def test_real_backend_reports_missing_privilege():
    from ixpmeter.tracer import BackendUnavailable, IcmpBackend
    with pytest.raises(BackendUnavailable, match="CAP_NET_RAW"):
        IcmpBackend()

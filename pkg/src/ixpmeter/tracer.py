"""Paris-traceroute probe engine, pacing and daily sweeps.

All probes of one trace carry the same flow identifier so per-flow load
balancers keep them on a single path. Backends implement ``send``; the
simulated backend advances a virtual clock so pacing runs instantly.
"""

from __future__ import annotations

import collections
import datetime as dt
import enum
import logging
import os
import re
import select
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol

from .core import Hop, TraceRecord, dumps_record, make_trace_id

log = logging.getLogger(__name__)

US = 1_000_000


class BackendUnavailable(RuntimeError):
    pass


class SweepAborted(RuntimeError):
    def __init__(self, message, summary):
        super().__init__(message)
        self.summary = summary


class ReplyKind(enum.Enum):
    TTL_EXCEEDED = "TtlExceeded"
    ECHO_REPLY = "EchoReply"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class ProbeReply:
    responder: Optional[str]
    rtt_us: Optional[int]
    kind: ReplyKind

    def __post_init__(self):
        if self.kind is not ReplyKind.TIMEOUT and (self.rtt_us is None or self.rtt_us < 0):
            raise ValueError("non-timeout reply needs rtt_us >= 0")


TIMEOUT = ProbeReply(None, None, ReplyKind.TIMEOUT)


@dataclass(frozen=True)
class TraceConfig:
    max_ttl: int = 30
    attempts_per_ttl: int = 2
    per_probe_timeout_ms: int = 2000
    flow_id: int = 1
    gap_limit: int = 5
    probes_per_second: float = 20

    def __post_init__(self):
        for name in ("max_ttl", "attempts_per_ttl", "per_probe_timeout_ms",
                     "gap_limit", "probes_per_second"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.flow_id <= 0xFFFF:
            raise ValueError("flow_id must fit in 16 bits")


class VirtualClock:
    """Microsecond clock that only moves when told to."""

    def __init__(self, start_us: int = 0):
        self._now = int(start_us)
        self._lock = threading.Lock()

    def now_us(self) -> int:
        return self._now

    def sleep_us(self, us: int) -> None:
        if us > 0:
            with self._lock:
                self._now += int(us)

    def advance_to(self, t_us: int) -> None:
        with self._lock:
            self._now = max(self._now, int(t_us))


class RealClock:
    def now_us(self) -> int:
        return time.time_ns() // 1000

    def sleep_us(self, us: int) -> None:
        if us > 0:
            time.sleep(us / US)

    def advance_to(self, t_us: int) -> None:
        self.sleep_us(t_us - self.now_us())


class RateLimiter:
    """At most ``rate`` sends in any half-open one-second window."""

    def __init__(self, rate: float, clock):
        self.limit = max(1, int(rate))
        self.clock = clock
        self._sent: collections.deque[int] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> int:
        with self._lock:
            now = self.clock.now_us()
            if len(self._sent) >= self.limit:
                oldest = self._sent[-self.limit]
                if now - oldest < US:
                    self.clock.sleep_us(oldest + US - now)
                    now = self.clock.now_us()
            self._sent.append(now)
            while len(self._sent) > self.limit:
                self._sent.popleft()
            return now


_WINDOW_RE = re.compile(r"^(\d{1,2}):(\d{2})-(\d{1,2}):(\d{2})$")


@dataclass(frozen=True)
class DutyWindow:
    """Daily active period in UTC: ``duration_min`` minutes from ``start_min``."""
    start_min: int = 0
    duration_min: int = 20 * 60

    def __post_init__(self):
        if not 0 <= self.start_min < 1440 or not 0 <= self.duration_min <= 1440:
            raise ValueError("window start/duration out of range")

    @classmethod
    def parse(cls, text: str) -> "DutyWindow":
        """``20h`` (from midnight), ``90m``, or ``HH:MM-HH:MM`` (equal ends = zero hours)."""
        text = text.strip()
        m = re.fullmatch(r"(\d+(?:\.\d+)?)([hm])", text)
        if m:
            minutes = float(m.group(1)) * (60 if m.group(2) == "h" else 1)
            return cls(0, int(round(minutes)))
        m = _WINDOW_RE.match(text)
        if not m:
            raise ValueError(f"bad window {text!r}; use 20h or HH:MM-HH:MM")
        h1, m1, h2, m2 = map(int, m.groups())
        if h1 > 23 or h2 > 24 or m1 > 59 or m2 > 59:
            raise ValueError(f"bad window {text!r}")
        start, end = h1 * 60 + m1, h2 * 60 + m2
        return cls(start, (end - start) % 1440 if end != 1440 else 1440 - start)

    @property
    def empty(self) -> bool:
        return self.duration_min == 0

    def is_open(self, t_us: int) -> bool:
        if self.duration_min >= 1440:
            return True
        minute_of_day = (t_us // (60 * US)) % 1440
        return (minute_of_day - self.start_min) % 1440 < self.duration_min

    def next_open(self, t_us: int) -> int:
        """Earliest time >= t_us inside the window."""
        if self.empty:
            raise ValueError("empty window never opens")
        if self.is_open(t_us):
            return t_us
        day_start = t_us - t_us % (86400 * US)
        start = day_start + self.start_min * 60 * US
        if start < t_us:
            start += 86400 * US
        return start


class Pacer:
    """Gate every probe on the duty window and the global rate cap."""

    def __init__(self, clock, rate: float, window: Optional[DutyWindow] = None):
        self.clock = clock
        self.window = window
        self.limiter = RateLimiter(rate, clock)

    def acquire(self) -> int:
        while True:
            if self.window is not None:
                self.clock.advance_to(self.window.next_open(self.clock.now_us()))
            t = self.limiter.acquire()
            if self.window is None or self.window.is_open(t):
                return t


class ProbingBackend(Protocol):
    src: str
    clock: object

    def send(self, ttl: int, flow_id: int, dst: str) -> ProbeReply: ...


def trace(dst: str, cfg: TraceConfig, backend, probe_id: str = "probe",
          pacer: Optional[Pacer] = None) -> TraceRecord:
    """Run one Paris traceroute towards ``dst`` with a constant flow id."""
    clock = backend.clock
    if pacer is None:
        pacer = Pacer(clock, cfg.probes_per_second)
    started: Optional[int] = None
    hops: list[Hop] = []
    stars = 0
    reached = False
    for ttl in range(1, cfg.max_ttl + 1):
        reply = TIMEOUT
        for _ in range(cfg.attempts_per_ttl):
            t = pacer.acquire()
            if started is None:
                started = t
            reply = backend.send(ttl, cfg.flow_id, dst)
            if reply.kind is not ReplyKind.TIMEOUT:
                break
        if reply.kind is ReplyKind.TIMEOUT:
            hops.append(Hop(ttl))
            stars += 1
            if stars >= cfg.gap_limit:
                break
            continue
        stars = 0
        hops.append(Hop(ttl, reply.responder, reply.rtt_us))
        if reply.responder == dst:
            reached = True
            break
    ts = (started if started is not None else clock.now_us()) // US
    return TraceRecord(
        trace_id=make_trace_id(probe_id, ts, dst, cfg.flow_id),
        probe_id=probe_id, ts=ts, src=backend.src, dst=dst,
        flow_id=cfg.flow_id, hops=tuple(hops), reached=reached)


@dataclass
class SweepSummary:
    reached: int = 0
    unreached: int = 0
    partial: bool = False

    @property
    def total(self) -> int:
        return self.reached + self.unreached

    def as_dict(self) -> dict:
        out = {}
        if self.reached:
            out["reached"] = self.reached
        if self.unreached:
            out["unreached"] = self.unreached
        return out


class ListSink:
    def __init__(self):
        self.records: list[TraceRecord] = []

    def write(self, record: TraceRecord) -> None:
        self.records.append(record)

    def mark_partial(self) -> None:
        pass

    def close(self) -> None:
        pass


class DailyFileSink:
    """Append records to ``traces-<probe_id>-<YYYYMMDD>.jsonl`` by record date."""

    def __init__(self, out_dir, probe_id: str):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.probe_id = probe_id
        self._files: dict[str, object] = {}
        self._lock = threading.Lock()
        self.paths: list[Path] = []

    def path_for(self, day: str) -> Path:
        return self.out_dir / f"traces-{self.probe_id}-{day}.jsonl"

    def write(self, record: TraceRecord) -> None:
        day = dt.datetime.fromtimestamp(record.ts, dt.timezone.utc).strftime("%Y%m%d")
        with self._lock:
            fh = self._files.get(day)
            if fh is None:
                p = self.path_for(day)
                fh = self._files[day] = open(p, "a")
                self.paths.append(p)
            fh.write(dumps_record(record.to_json()) + "\n")

    def mark_partial(self) -> None:
        for p in self.paths:
            Path(str(p) + ".partial").touch()

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()
            self._files.clear()


def run_sweep(targets: Iterable, cfg: TraceConfig, window: Optional[DutyWindow],
              sink, backend, probe_id: str = "probe", workers: int = 1) -> SweepSummary:
    """Trace every target once. Probes are only sent inside ``window``."""
    summary = SweepSummary()
    if window is not None and window.empty:
        return summary
    pacer = Pacer(backend.clock, cfg.probes_per_second, window)
    lock = threading.Lock()

    def one(target):
        addr = getattr(target, "addr", target)
        rec = trace(addr, cfg, backend, probe_id, pacer)
        with lock:
            try:
                sink.write(rec)
            except OSError as e:
                summary.partial = True
                raise SweepAborted(f"sink write failed: {e}", summary) from e
            if rec.reached:
                summary.reached += 1
            else:
                summary.unreached += 1

    try:
        if workers <= 1:
            for t in targets:
                one(t)
        else:
            if isinstance(backend.clock, VirtualClock):
                raise ValueError("concurrent sweeps need a real clock")
            with ThreadPoolExecutor(workers) as pool:
                for fut in [pool.submit(one, t) for t in targets]:
                    fut.result()
    except SweepAborted:
        sink.mark_partial()
        raise
    return summary


def run_daily(targets: list, cfg: TraceConfig, window: Optional[DutyWindow], sink,
              backend, probe_id: str, days: int) -> list[SweepSummary]:
    """One sweep per UTC day, each starting no earlier than that day's midnight."""
    clock = backend.clock
    out = []
    day0 = clock.now_us() - clock.now_us() % (86400 * US)
    for d in range(days):
        day_start = day0 + d * 86400 * US
        if clock.now_us() >= day_start + 86400 * US:
            log.warning("sweep for day %d skipped: previous sweep overran", d)
            out.append(SweepSummary())
            continue
        clock.advance_to(day_start)
        if hasattr(backend, "set_epoch"):
            backend.set_epoch(d)
        out.append(run_sweep(targets, cfg, window, sink, backend, probe_id))
    return out


# --- ICMP Paris backend ------------------------------------------------------

def inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    s = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def _ones_add(a: int, b: int) -> int:
    s = a + b
    return (s & 0xFFFF) + (s >> 16)


def paris_echo_request(ident: int, seq: int, flow_id: int) -> bytes:
    """ICMP echo request whose checksum equals ``flow_id`` (low 16 bits).

    Load balancers hashing on the ICMP checksum then see one flow even
    though the sequence number changes; a two-byte payload absorbs the
    difference.
    """
    want = flow_id & 0xFFFF
    partial = 0
    for word in (0x0800, ident & 0xFFFF, seq & 0xFFFF):
        partial = _ones_add(partial, word)
    filler = _ones_add(~want & 0xFFFF, ~partial & 0xFFFF)
    pkt = struct.pack("!BBHHHH", 8, 0, want, ident & 0xFFFF, seq & 0xFFFF, filler)
    return pkt


def parse_icmp_reply(packet: bytes) -> Optional[dict]:
    """Extract what demultiplexing needs from a raw IPv4+ICMP packet."""
    if len(packet) < 28:
        return None
    ihl = (packet[0] & 0x0F) * 4
    src = socket.inet_ntoa(packet[12:16])
    icmp = packet[ihl:]
    if len(icmp) < 8:
        return None
    kind = icmp[0]
    if kind == 0:
        _, _, _, ident, seq = struct.unpack("!BBHHH", icmp[:8])
        return {"kind": ReplyKind.ECHO_REPLY, "responder": src, "ident": ident,
                "seq": seq, "dst": src, "checksum": None}
    if kind == 11 and len(icmp) >= 8 + 20 + 8:
        inner = icmp[8:]
        inner_ihl = (inner[0] & 0x0F) * 4
        dst = socket.inet_ntoa(inner[16:20])
        q = inner[inner_ihl:inner_ihl + 8]
        if len(q) < 8 or q[0] != 8:
            return None
        _, _, csum, ident, seq = struct.unpack("!BBHHH", q)
        return {"kind": ReplyKind.TTL_EXCEEDED, "responder": src, "ident": ident,
                "seq": seq, "dst": dst, "checksum": csum}
    return None


class IcmpBackend:
    """Real-network Paris backend over raw ICMP sockets (needs CAP_NET_RAW)."""

    def __init__(self, src: Optional[str] = None, timeout_ms: int = 2000):
        try:
            probe = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_ICMP)
        except PermissionError as e:
            raise BackendUnavailable(
                "raw ICMP sockets need root or CAP_NET_RAW; rerun with privileges "
                "or use --backend simnet:<scenario>") from e
        probe.close()
        self.src = src or _local_addr()
        self.clock = RealClock()
        self.timeout_ms = timeout_ms
        self.ident = os.getpid() & 0xFFFF
        self._seq = 0
        self._lock = threading.Lock()

    def send(self, ttl: int, flow_id: int, dst: str) -> ProbeReply:
        with self._lock:
            self._seq = (self._seq + 1) & 0xFF
            seq = (ttl << 8) | self._seq
        sock = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_ICMP)
        try:
            sock.setsockopt(socket.IPPROTO_IP, socket.IP_TTL, ttl)
            t0 = time.perf_counter_ns()
            sock.sendto(paris_echo_request(self.ident, seq, flow_id), (dst, 0))
            deadline = t0 + self.timeout_ms * 1_000_000
            while True:
                left = (deadline - time.perf_counter_ns()) / 1e9
                if left <= 0:
                    return TIMEOUT
                ready, _, _ = select.select([sock], [], [], left)
                if not ready:
                    return TIMEOUT
                pkt = sock.recv(2048)
                t1 = time.perf_counter_ns()
                info = parse_icmp_reply(pkt)
                if (info is None or info["ident"] != self.ident or info["seq"] != seq
                        or info["dst"] != dst):
                    continue
                if info["checksum"] is not None and info["checksum"] != flow_id & 0xFFFF:
                    continue
                return ProbeReply(info["responder"], (t1 - t0) // 1000, info["kind"])
        finally:
            sock.close()


def _local_addr() -> str:
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        s.connect(("192.0.2.1", 9))
        return s.getsockname()[0]
    except OSError:
        return "0.0.0.0"
    finally:
        s.close()

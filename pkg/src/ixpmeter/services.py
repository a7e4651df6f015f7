"""Active-service tracking from repeated port-scan rounds.

An (addr, port) pair is active when it was seen open in at least 3 of the
last 5 scan rounds. Rounds missing a pair count as closed for it, and a
fresh store behaves as if the pre-history rounds were all closed.
"""

from __future__ import annotations

import csv
import datetime as dt
import threading
from dataclasses import dataclass
from itertools import groupby
from typing import Iterable, Optional

from .core import ip_to_int

WINDOW = 5
THRESHOLD = 3
WINDOW_MASK = (1 << WINDOW) - 1

DEFAULT_PORTS = (21, 22, 25, 80, 110, 143, 443, 465, 554, 993, 995, 5060)


class RoundError(ValueError):
    pass


@dataclass(frozen=True)
class ScanObservation:
    round_id: int
    ts: int
    addr: str
    port: int
    open: bool

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")
        ip_to_int(self.addr)


def is_active(window: int) -> bool:
    return bin(window & WINDOW_MASK).count("1") >= THRESHOLD


@dataclass
class RoundSummary:
    round_id: int
    ts: int
    counts: dict


class ServiceStateStore:
    """Sliding 5-round presence windows per (addr, port).

    Bit 0 of a window is the newest round. Single writer; readers take a
    snapshot under the lock and so always see a fully ingested round.
    """

    def __init__(self, ports: Optional[Iterable[int]] = None):
        self.windows: dict[tuple[str, int], int] = {}
        self.last_round: Optional[int] = None
        self.history: list[RoundSummary] = []
        self.ports = tuple(sorted(set(ports))) if ports is not None else None
        self._lock = threading.Lock()

    def ingest_round(self, observations: Iterable[ScanObservation],
                     round_id: Optional[int] = None, ts: Optional[int] = None):
        obs = list(observations)
        ids = {o.round_id for o in obs}
        if round_id is not None:
            ids.add(round_id)
        if len(ids) != 1:
            raise RoundError(f"a round needs exactly one round_id, got {sorted(ids)}")
        rid = ids.pop()
        if self.last_round is not None and rid <= self.last_round:
            raise RoundError(f"round {rid} is not newer than last ingested round {self.last_round}")
        seen = set()
        opened = set()
        for o in obs:
            key = (o.addr, o.port)
            if key in seen:
                raise RoundError(f"duplicate observation for {o.addr}:{o.port} in round {rid}")
            seen.add(key)
            if o.open:
                opened.add(key)
        if ts is None:
            ts = min((o.ts for o in obs), default=0)

        new = {}
        for key, w in self.windows.items():
            w = (w << 1) & WINDOW_MASK
            if key in opened:
                w |= 1
            if w:
                new[key] = w
        for key in opened:
            if key not in new:
                new[key] = 1
        counts: dict[int, int] = {}
        if self.ports is not None:
            counts = {p: 0 for p in self.ports}
        for (addr, port), w in new.items():
            if is_active(w):
                counts[port] = counts.get(port, 0) + 1
        with self._lock:
            self.windows = new
            self.last_round = rid
            self.history.append(RoundSummary(rid, ts, counts))
        return self

    def is_active(self, addr: str, port: int) -> bool:
        return is_active(self.windows.get((addr, port), 0))

    def active_set(self, port: Optional[int] = None) -> set[tuple[str, int]]:
        if self.last_round is None:
            raise RoundError("no scan round ingested yet")
        with self._lock:
            windows = self.windows
        return {k for k, w in windows.items()
                if is_active(w) and (port is None or k[1] == port)}

    def service_counts_series(self) -> list[tuple[str, int, int]]:
        """Rows of (date, port, active_count), one per port per round."""
        with self._lock:
            history = list(self.history)
        ports = sorted({p for r in history for p in r.counts})
        rows = []
        for r in history:
            day = dt.datetime.fromtimestamp(r.ts, dt.timezone.utc).strftime("%Y-%m-%d")
            for p in ports:
                rows.append((day, p, r.counts.get(p, 0)))
        return rows


def active_set(store: ServiceStateStore, port: Optional[int] = None) -> set:
    return store.active_set(port)


def ingest_round(store: ServiceStateStore, observations: Iterable[ScanObservation]):
    return store.ingest_round(observations)


_TRUE = {"1", "true", "yes", "open"}
_FALSE = {"0", "false", "no", "closed"}


def read_scan_csv(path) -> list[list[ScanObservation]]:
    """Read ``round_id,ts,addr,port,open`` rows and group them into rounds."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["round_id", "ts", "addr", "port", "open"]:
            raise ValueError(f"{path}: header must be round_id,ts,addr,port,open")
        for lineno, row in enumerate(reader, 2):
            if not row or not "".join(row).strip():
                continue
            try:
                rid, ts, addr, port, flag = (c.strip() for c in row)
                flag = flag.lower()
                if flag not in _TRUE | _FALSE:
                    raise ValueError(f"bad open flag {flag!r}")
                rows.append(ScanObservation(int(rid), int(float(ts)), addr, int(port), flag in _TRUE))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    rows.sort(key=lambda o: o.round_id)
    return [list(g) for _, g in groupby(rows, key=lambda o: o.round_id)]


def load_scan_history(path, ports: Optional[Iterable[int]] = None) -> ServiceStateStore:
    store = ServiceStateStore(ports)
    for rnd in read_scan_csv(path):
        store.ingest_round(rnd)
    return store


def write_service_counts(store: ServiceStateStore, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "port", "count"])
        w.writerows(store.service_counts_series())

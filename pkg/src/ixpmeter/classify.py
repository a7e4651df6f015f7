"""Route classification: IXP, P2P, International or Misbehavior."""

from __future__ import annotations

import datetime as dt
import enum
import json
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .core import AddressScope, Membership, RecordError, TraceRecord, dumps_record, iter_jsonl

log = logging.getLogger(__name__)


class Category(enum.Enum):
    IXP = "IXP"
    P2P = "P2P"
    INTERNATIONAL = "International"
    MISBEHAVIOR = "Misbehavior"


CATEGORIES = tuple(Category)


class NotReached(ValueError):
    pass


@dataclass(frozen=True, order=True)
class WeekBucket:
    iso_year: int
    iso_week: int

    def __post_init__(self):
        # raises for week 53 in years that only have 52
        dt.date.fromisocalendar(self.iso_year, self.iso_week, 1)

    @classmethod
    def of(cls, ts: int) -> "WeekBucket":
        y, w, _ = dt.datetime.fromtimestamp(ts, dt.timezone.utc).isocalendar()
        return cls(y, w)

    @classmethod
    def parse(cls, text: str) -> "WeekBucket":
        y, w = text.split("-W")
        return cls(int(y), int(w))

    def __str__(self) -> str:
        return f"{self.iso_year:04d}-W{self.iso_week:02d}"


@dataclass(frozen=True)
class ClassifiedTrace:
    trace: TraceRecord
    category: Category
    ixp_hop_ttl: Optional[int]
    week: WeekBucket

    def __post_init__(self):
        uses_ixp = self.category in (Category.IXP, Category.MISBEHAVIOR)
        if uses_ixp != (self.ixp_hop_ttl is not None):
            raise ValueError("ixp_hop_ttl must be set exactly for IXP/Misbehavior traces")

    @property
    def probe_id(self) -> str:
        return self.trace.probe_id

    def to_json(self) -> dict:
        out = self.trace.to_json()
        out["category"] = self.category.value
        out["ixp_hop_ttl"] = self.ixp_hop_ttl
        out["week"] = str(self.week)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ClassifiedTrace":
        return cls(TraceRecord.from_json(obj), Category(obj["category"]),
                   obj.get("ixp_hop_ttl"), WeekBucket.parse(obj["week"]))


def category_for(has_ixp: bool, all_domestic: bool) -> Category:
    if has_ixp:
        return Category.IXP if all_domestic else Category.MISBEHAVIOR
    return Category.P2P if all_domestic else Category.INTERNATIONAL


def classify(trace: TraceRecord, scope: AddressScope) -> ClassifiedTrace:
    """Classify a completed trace. Stars are ignored; the destination counts."""
    if not trace.reached:
        raise NotReached(f"trace {trace.trace_id} did not reach {trace.dst}")
    ixp_ttls = []
    all_domestic = True
    for hop in trace.hops:
        if hop.addr is None:
            continue
        m = scope.membership(hop.addr)
        if m is Membership.IXP:
            ixp_ttls.append(hop.ttl)
        elif m is Membership.FOREIGN:
            all_domestic = False
    if len(ixp_ttls) > 1:
        log.info("trace %s crosses the IXP prefix %d times", trace.trace_id, len(ixp_ttls))
    cat = category_for(bool(ixp_ttls), all_domestic)
    return ClassifiedTrace(trace, cat, ixp_ttls[0] if ixp_ttls else None, WeekBucket.of(trace.ts))


@dataclass
class BatchResult:
    classified: list
    rejected: int = 0
    diagnostics: list = None

    def __post_init__(self):
        if self.diagnostics is None:
            self.diagnostics = []


def classify_stream(records: Iterable[TraceRecord], scope: AddressScope,
                    stats: Optional[dict] = None) -> Iterator[ClassifiedTrace]:
    """Lazily classify, dropping unreached traces (counted in ``stats['rejected']``)."""
    if stats is not None:
        stats.setdefault("rejected", 0)
    for rec in records:
        if not rec.reached:
            if stats is not None:
                stats["rejected"] += 1
            continue
        yield classify(rec, scope)


def classify_batch(records: Iterable, scope: AddressScope) -> BatchResult:
    """Classify records or raw JSON lines, keeping input order.

    String items are parsed as trace JSON; malformed lines are reported in
    ``diagnostics`` as ``(source, lineno, message)`` and skipped.
    """
    result = BatchResult([])
    items = list(records)
    if items and isinstance(items[0], str):
        items = iter_jsonl(items, errors=result.diagnostics)
    stats = {"rejected": 0}
    result.classified = list(classify_stream(items, scope, stats))
    result.rejected = stats["rejected"]
    return result


def write_classified(items: Iterable[ClassifiedTrace], fh) -> int:
    n = 0
    for c in items:
        fh.write(dumps_record(c.to_json()) + "\n")
        n += 1
    return n


def read_classified(path) -> Iterator[ClassifiedTrace]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield ClassifiedTrace.from_json(json.loads(line))
                except (KeyError, ValueError) as e:
                    raise RecordError(f"{path}:{lineno}: {e}") from None

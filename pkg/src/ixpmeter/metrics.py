"""Weekly route statistics and inter-hop RTT differences."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .classify import CATEGORIES, Category, ClassifiedTrace, WeekBucket
from .core import AddressScope, Membership, TraceRecord

log = logging.getLogger(__name__)

PERCENTILE_METHOD = "linear interpolation between closest ranks, h=(n-1)p"


class NoPenultimateHop(ValueError):
    pass


def quantile(sorted_vals, p: float) -> float:
    n = len(sorted_vals)
    if n == 0:
        raise ValueError("quantile of empty sample")
    h = (n - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return sorted_vals[lo] + (h - lo) * (sorted_vals[hi] - sorted_vals[lo])


@dataclass(frozen=True)
class BoxStats:
    p5: float
    q1: float
    median: float
    q3: float
    p95: float
    mean: float
    count: int

    def row(self) -> list:
        return [self.p5, self.q1, self.median, self.q3, self.p95, self.mean, self.count]


def box_stats(samples: Iterable[float]) -> BoxStats:
    vals = sorted(samples)
    if not vals:
        raise ValueError("box_stats needs at least one sample")
    return BoxStats(
        p5=quantile(vals, 0.05), q1=quantile(vals, 0.25), median=quantile(vals, 0.5),
        q3=quantile(vals, 0.75), p95=quantile(vals, 0.95),
        mean=math.fsum(vals) / len(vals), count=len(vals))


def hop_count(trace: TraceRecord) -> int:
    if not trace.reached:
        raise ValueError(f"trace {trace.trace_id} did not reach its target")
    return trace.last_responding().ttl


def effective_rtt(trace: TraceRecord) -> int:
    """RTT of the last responding hop before the destination.

    The last hop is skipped on purpose: answers from end hosts behind busy NAT
    gear are slow and would dominate the measurement.
    """
    if not trace.reached:
        raise ValueError(f"trace {trace.trace_id} did not reach its target")
    resp = trace.responding()
    if len(resp) < 2:
        raise NoPenultimateHop(f"trace {trace.trace_id} has no hop before the destination")
    return resp[-2].rtt_us


def _by_week(classified: Iterable[ClassifiedTrace]) -> dict:
    weeks: dict[WeekBucket, list] = defaultdict(list)
    for c in classified:
        weeks[c.week].append(c)
    return weeks


def _local_routes(items: list) -> dict:
    routes: dict[tuple, set] = defaultdict(set)
    for c in items:
        routes[(c.trace.src, c.trace.dst)].add(c.category)
    total = len(routes)
    counts = Counter(cat for cats in routes.values() for cat in cats)
    return {cat: 100.0 * counts[cat] / total for cat in CATEGORIES}


def _available_time(items: list) -> dict:
    counts = Counter(c.category for c in items)
    return {cat: 100.0 * counts[cat] / len(items) for cat in CATEGORIES}


def weekly_local_routes(classified: Iterable[ClassifiedTrace]) -> dict:
    """Per week, share of distinct (src, dst) routes seen in each category.

    A route counts once per category it used that week, so the shares may
    add up to more than 100.
    """
    return {w: _local_routes(items) for w, items in sorted(_by_week(classified).items())}


def weekly_available_time(classified: Iterable[ClassifiedTrace]) -> dict:
    """Per week, share of traceroutes in each category (sums to 100)."""
    return {w: _available_time(items) for w, items in sorted(_by_week(classified).items())}


@dataclass(frozen=True)
class HopOffsetSample:
    offset: int
    diff_us: int
    category: Category
    probe_id: str

    def __post_init__(self):
        if self.diff_us < 0:
            raise ValueError("negative inter-hop difference")


def _offset_diffs(rtts: list, anchor: int) -> list[tuple[int, int]]:
    out = []
    for i in range(1, len(rtts)):
        d = rtts[i] - rtts[i - 1]
        if d >= 0:
            out.append((i - anchor, d))
    return out


def interhop_samples(c: ClassifiedTrace, scope: AddressScope) -> list[HopOffsetSample]:
    resp = c.trace.responding()
    if len(resp) < 2:
        return []
    if c.category is Category.IXP:
        if c.ixp_hop_ttl is None:
            raise ValueError(f"IXP trace {c.trace.trace_id} without ixp_hop_ttl")
        anchor = next(i for i, h in enumerate(resp) if h.ttl == c.ixp_hop_ttl)
        rtts = [h.rtt_us for h in resp]
    elif c.category is Category.INTERNATIONAL:
        foreign = [scope.membership(h.addr) is Membership.FOREIGN for h in resp]
        if not any(foreign):
            raise AssertionError(f"International trace {c.trace.trace_id} has no foreign hop")
        start = foreign.index(True)
        end = start
        while end + 1 < len(resp) and foreign[end + 1]:
            end += 1
        if any(foreign[end + 1:]):
            log.info("trace %s leaves the country more than once; only the first "
                     "foreign run is collapsed", c.trace.trace_id)
        # the whole foreign run becomes one virtual hop carrying its last RTT
        rtts = ([h.rtt_us for h in resp[:start]] + [resp[end].rtt_us]
                + [h.rtt_us for h in resp[end + 1:]])
        anchor = start
    else:
        return []
    return [HopOffsetSample(off, d, c.category, c.trace.probe_id)
            for off, d in _offset_diffs(rtts, anchor)]


def interhop_series(classified: Iterable[ClassifiedTrace], scope: AddressScope,
                    by_probe: bool = False) -> dict:
    """Group non-negative inter-hop RTT differences by (category, offset).

    Offset 0 is the IXP hop (or the collapsed foreign segment for
    International routes); negative offsets come before it. With
    ``by_probe`` keys become (probe_id, category, offset).
    """
    series: dict[tuple, list] = defaultdict(list)
    for c in classified:
        for s in interhop_samples(c, scope):
            key = (s.probe_id, s.category, s.offset) if by_probe else (s.category, s.offset)
            series[key].append(s)
    return dict(series)


@dataclass
class WeeklyReport:
    week: WeekBucket
    local_routes_pct: dict
    available_time_pct: dict
    hops: dict
    rtt: dict
    route_count: int
    trace_count: int
    no_penultimate: int = 0


def _week_report(week: WeekBucket, items: list) -> WeeklyReport:
    hops: dict[Category, list] = defaultdict(list)
    rtts: dict[Category, list] = defaultdict(list)
    skipped = 0
    for c in items:
        hops[c.category].append(hop_count(c.trace))
        try:
            rtts[c.category].append(effective_rtt(c.trace))
        except NoPenultimateHop:
            skipped += 1
    return WeeklyReport(
        week=week,
        local_routes_pct=_local_routes(items),
        available_time_pct=_available_time(items),
        hops={cat: box_stats(hops[cat]) for cat in CATEGORIES if hops[cat]},
        rtt={cat: box_stats(rtts[cat]) for cat in CATEGORIES if rtts[cat]},
        route_count=len({(c.trace.src, c.trace.dst) for c in items}),
        trace_count=len(items),
        no_penultimate=skipped,
    )


def build_weekly_report(classified: Iterable[ClassifiedTrace]) -> list[WeeklyReport]:
    return [_week_report(w, items) for w, items in sorted(_by_week(classified).items())]


# --- CSV output ---------------------------------------------------------------

BOX_COLUMNS = ["p5", "q1", "median", "q3", "p95", "mean", "count"]


def _num(x) -> str:
    if isinstance(x, int):
        return str(x)
    return f"{x:.3f}"


def _pct(x: float) -> str:
    return f"{x:.4f}"


def _write(path: Path, header: list, rows: Iterable[list]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_report_csvs(reports: list[WeeklyReport], series: dict, out_dir,
                      probe_series: Optional[dict] = None) -> list[Path]:
    """Write hops_weekly, rtt_weekly, local_routes, available_time and interhop CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def box_rows(attr):
        for r in reports:
            for cat in CATEGORIES:
                b = getattr(r, attr).get(cat)
                if b is not None:
                    yield [str(r.week), cat.value] + [_num(v) for v in b.row()]

    written.append(_write(out / "hops_weekly.csv", ["week", "category"] + BOX_COLUMNS,
                          box_rows("hops")))
    written.append(_write(out / "rtt_weekly.csv", ["week", "category"] + BOX_COLUMNS,
                          box_rows("rtt")))
    written.append(_write(out / "local_routes.csv", ["week", "category", "pct"],
                          ([str(r.week), cat.value, _pct(r.local_routes_pct[cat])]
                           for r in reports for cat in CATEGORIES)))
    written.append(_write(out / "available_time.csv", ["week", "category", "pct"],
                          ([str(r.week), cat.value, _pct(r.available_time_pct[cat])]
                           for r in reports for cat in CATEGORIES)))

    def series_rows(data, with_probe):
        order = {cat: i for i, cat in enumerate(CATEGORIES)}
        keys = sorted(data, key=lambda k: (k[0], order[k[1]], k[2]) if with_probe
                      else (order[k[0]], k[1]))
        for k in keys:
            b = box_stats([s.diff_us for s in data[k]])
            head = [k[0], k[1].value, k[2]] if with_probe else [k[0].value, k[1]]
            yield head + [_num(v) for v in (b.p5, b.q1, b.median, b.q3, b.p95)] + [b.count]

    cols = ["p5", "q1", "median", "q3", "p95", "count"]
    written.append(_write(out / "interhop.csv", ["category", "offset"] + cols,
                          series_rows(series, False)))
    if probe_series is not None:
        written.append(_write(out / "interhop_by_probe.csv",
                              ["probe_id", "category", "offset"] + cols,
                              series_rows(probe_series, True)))
    return written

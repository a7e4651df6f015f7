import csv
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ixpmeter.classify import CATEGORIES, Category, ClassifiedTrace, WeekBucket, classify
from ixpmeter.metrics import (NoPenultimateHop, box_stats, build_weekly_report, effective_rtt,
                              hop_count, interhop_samples, interhop_series, weekly_available_time,
                              weekly_local_routes, write_report_csvs)

from conftest import make_scope, make_trace
from oracles import sorted_percentile

TS = 1_404_000_000
WEEK = WeekBucket.of(TS)


def _c(cat, src="200.87.0.10", dst="200.87.9.9", ixp_ttl=None, trace=None):
    if trace is None:
        addrs = ["200.87.1.1", "203.0.113.1", dst] if cat in (Category.IXP, Category.MISBEHAVIOR) \
            else ["200.87.1.1", dst]
        trace = make_trace(addrs, src=src, ts=TS)
        if cat in (Category.IXP, Category.MISBEHAVIOR):
            ixp_ttl = 2
    return ClassifiedTrace(trace, cat, ixp_ttl, WeekBucket.of(trace.ts))


# box stats ---------------------------------------------------------------

def test_box_constant():
    b = box_stats([5, 5, 5, 5])
    assert (b.p5, b.q1, b.median, b.q3, b.p95, b.mean, b.count) == (5, 5, 5, 5, 5, 5, 4)


def test_box_one_to_hundred():
    b = box_stats(range(1, 101))
    assert b.median == 50.5
    assert b.count == 100 and b.mean == 50.5


def test_box_empty():
    with pytest.raises(ValueError):
        box_stats([])


def test_box_matches_numpy_linear():
    rng = random.Random(11)
    for n in range(1, 201):
        xs = [rng.uniform(-1e6, 1e6) for _ in range(n)]
        b = box_stats(xs)
        want = np.percentile(xs, [5, 25, 50, 75, 95], method="linear")
        assert np.allclose([b.p5, b.q1, b.median, b.q3, b.p95], want, rtol=0, atol=1e-6)
        assert b.mean == pytest.approx(float(np.mean(xs)), abs=1e-6)


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=60))
def test_box_matches_longhand(xs):
    b = box_stats(xs)
    for p, v in zip((0.05, 0.25, 0.5, 0.75, 0.95), (b.p5, b.q1, b.median, b.q3, b.p95)):
        assert v == pytest.approx(sorted_percentile(xs, p), abs=1e-6)
    assert b.p5 <= b.q1 <= b.median <= b.q3 <= b.p95


# per-trace quantities ----------------------------------------------------

def test_hop_count():
    assert hop_count(make_trace([f"200.87.{i}.1" for i in range(1, 8)])) == 7
    t = make_trace(["200.87.1.1", "200.87.2.1", None, None] + [f"200.87.{i}.1" for i in range(5, 10)])
    assert hop_count(t) == 9
    with pytest.raises(ValueError):
        hop_count(make_trace(["200.87.1.1", None], dst="200.87.9.9"))


def test_effective_rtt():
    assert effective_rtt(make_trace(["200.87.1.1", "200.87.2.1", "200.87.3.1"],
                                    rtts=[2000, 5000, 48000])) == 5000
    assert effective_rtt(make_trace(["200.87.1.1", None, "200.87.3.1"],
                                    rtts=[2000, None, 48000])) == 2000
    with pytest.raises(NoPenultimateHop):
        effective_rtt(make_trace(["200.87.3.1"]))


# weekly shares -----------------------------------------------------------

def test_local_routes_multi_category_route():
    pct = weekly_local_routes([_c(Category.IXP), _c(Category.INTERNATIONAL)])[WEEK]
    assert pct[Category.IXP] == 100 and pct[Category.INTERNATIONAL] == 100
    assert sum(pct.values()) == 200


def test_local_routes_single_category():
    cs = [_c(Category.IXP, dst=f"200.87.9.{i}") for i in range(1, 11)]
    pct = weekly_local_routes(cs)[WEEK]
    assert pct == {Category.IXP: 100, Category.P2P: 0, Category.INTERNATIONAL: 0,
                   Category.MISBEHAVIOR: 0}


def test_local_routes_arithmetic():
    cs = [_c(Category.IXP, dst="200.87.9.1"), _c(Category.IXP, dst="200.87.9.2"),
          _c(Category.P2P, dst="200.87.9.3"), _c(Category.INTERNATIONAL, dst="200.87.9.4"),
          _c(Category.IXP, dst="200.87.9.1")]
    pct = weekly_local_routes(cs)[WEEK]
    assert (pct[Category.IXP], pct[Category.P2P], pct[Category.INTERNATIONAL]) == (50, 25, 25)


def test_available_time_arithmetic():
    cs = [_c(Category.IXP)] * 6 + [_c(Category.INTERNATIONAL)] * 3 + [_c(Category.P2P)]
    pct = weekly_available_time(cs)[WEEK]
    assert pct == {Category.IXP: 60, Category.INTERNATIONAL: 30, Category.P2P: 10,
                   Category.MISBEHAVIOR: 0}
    only = weekly_available_time([_c(Category.P2P)] * 4)[WEEK]
    assert only[Category.P2P] == 100


def test_empty_weeks_omitted():
    assert weekly_local_routes([]) == {} and weekly_available_time([]) == {}
    assert build_weekly_report([]) == []


def _random_corpus(rng, n):
    cats = list(CATEGORIES)
    out = []
    for _ in range(n):
        day = rng.randrange(21)
        t = make_trace(["200.87.1.1", f"200.87.9.{rng.randint(1, 8)}"],
                       src=rng.choice(["200.87.0.10", "200.87.0.20"]), ts=TS + day * 86400)
        cat = rng.choice(cats)
        ttl = 1 if cat in (Category.IXP, Category.MISBEHAVIOR) else None
        out.append(ClassifiedTrace(t, cat, ttl, WeekBucket.of(t.ts)))
    return out


@given(st.integers(0, 2**32), st.integers(1, 80))
def test_available_time_sums_to_100(seed, n):
    for pct in weekly_available_time(_random_corpus(random.Random(seed), n)).values():
        assert abs(sum(pct.values()) - 100) <= 0.01


@given(st.integers(0, 2**32), st.integers(1, 80))
def test_local_routes_bounds(seed, n):
    cs = _random_corpus(random.Random(seed), n)
    per_week = weekly_local_routes(cs)
    for week, pct in per_week.items():
        assert all(0 <= v <= 100 for v in pct.values())
        routes = {}
        for c in cs:
            if c.week == week:
                routes.setdefault((c.trace.src, c.trace.dst), set()).add(c.category)
        multi = any(len(v) > 1 for v in routes.values())
        total = sum(pct.values())
        assert total >= 100 - 1e-9
        assert (total > 100 + 1e-9) == multi


# inter-hop series --------------------------------------------------------

def test_interhop_ixp_fixture():
    t = make_trace(["200.87.1.1", "200.87.2.1", "203.0.113.1", "200.87.3.1"],
                   rtts=[1000, 3000, 2000, 6000])
    c = ClassifiedTrace(t, Category.IXP, 3, WeekBucket.of(t.ts))
    got = {(s.offset, s.diff_us) for s in interhop_samples(c, make_scope())}
    assert got == {(-1, 2000), (1, 4000)}


def test_interhop_international_fixture():
    t = make_trace(["200.87.1.1", "200.87.2.1", "64.86.1.1", "64.86.2.1", "200.87.3.1"],
                   rtts=[2000, 3000, 105000, 130000, 131000])
    c = classify(t, make_scope())
    assert c.category is Category.INTERNATIONAL
    got = sorted((s.offset, s.diff_us) for s in interhop_samples(c, make_scope()))
    assert got == [(-1, 1000), (0, 127000), (1, 1000)]


def test_interhop_stars_skipped():
    t = make_trace(["200.87.1.1", None, "203.0.113.1", "200.87.3.1"], rtts=[1000, None, 4000, 5000])
    c = classify(t, make_scope())
    got = sorted((s.offset, s.diff_us) for s in interhop_samples(c, make_scope()))
    assert got == [(0, 3000), (1, 1000)]


def test_interhop_degenerate():
    t = make_trace(["203.0.113.1"])
    c = ClassifiedTrace(t, Category.IXP, 1, WeekBucket.of(t.ts))
    assert interhop_samples(c, make_scope()) == []
    p2p = classify(make_trace(["200.87.1.1", "200.87.2.1"]), make_scope())
    assert interhop_samples(p2p, make_scope()) == []


@given(st.lists(st.tuples(st.sampled_from(["200.87.1.1", "203.0.113.1", "8.8.8.8", "10.0.0.1"]),
                          st.integers(0, 200_000)), min_size=1, max_size=10))
def test_interhop_nonnegative_and_bounded(hops):
    scope = make_scope()
    t = make_trace([a for a, _ in hops], rtts=[r for _, r in hops])
    c = classify(t, scope)
    samples = interhop_samples(c, scope)
    assert all(s.diff_us >= 0 for s in samples)
    assert len(samples) <= len(t.responding()) - 1


def test_interhop_by_probe_keys():
    scope = make_scope()
    cs = [classify(make_trace(["200.87.1.1", "203.0.113.1", "200.87.3.1"], probe_id=p), scope)
          for p in ("a", "b")]
    assert set(interhop_series(cs, scope, by_probe=True)) == {
        (p, Category.IXP, o) for p in ("a", "b") for o in (0, 1)}
    assert set(interhop_series(cs, scope)) == {(Category.IXP, 0), (Category.IXP, 1)}


# reports -----------------------------------------------------------------

def test_report_permutation_invariant():
    cs = _random_corpus(random.Random(5), 300)
    a = build_weekly_report(cs)
    shuffled = list(cs)
    random.Random(9).shuffle(shuffled)
    assert build_weekly_report(shuffled) == a
    assert build_weekly_report(list(reversed(cs))) == a


def test_report_route_count_at_observed_average():
    from ixpmeter.simnet import SimBackend, scenario
    from ixpmeter.targets import split_to_slash24
    from ixpmeter.core import parse_prefix
    from ixpmeter.tracer import ListSink, TraceConfig, run_sweep

    s = scenario("bolivia-like")
    nets = [n for p in s.country_prefixes for n in split_to_slash24(parse_prefix(p))]
    addrs = [f"{n.base >> 24}.{(n.base >> 16) & 255}.{(n.base >> 8) & 255}.1" for n in nets[:4000]]
    sink = ListSink()
    run_sweep(addrs, TraceConfig(), None, sink, SimBackend(s, "lapaz", start_us=1_704_067_200 * 10**6))
    scope = make_scope_from(s)
    cs = [classify(t, scope) for t in sink.records if t.reached][:1753]
    reports = build_weekly_report(cs)
    assert len(reports) == 1
    assert reports[0].route_count == len(cs) == 1753


def make_scope_from(spec):
    from ixpmeter.core import AddressScope, parse_prefix
    return AddressScope([parse_prefix(p) for p in spec.country_prefixes],
                        [parse_prefix(p) for p in spec.ixp_prefixes])


def test_csv_columns(tmp_path):
    scope = make_scope()
    cs = [classify(make_trace(["200.87.1.1", "203.0.113.1", "200.87.3.1"]), scope),
          classify(make_trace(["200.87.1.1", "8.8.8.8", "200.87.3.1"]), scope)]
    write_report_csvs(build_weekly_report(cs), interhop_series(cs, scope), tmp_path)
    heads = {}
    for name in ("hops_weekly", "rtt_weekly", "local_routes", "available_time", "interhop"):
        with open(tmp_path / f"{name}.csv") as fh:
            heads[name] = next(csv.reader(fh))
    box = ["p5", "q1", "median", "q3", "p95", "mean", "count"]
    assert heads["hops_weekly"] == ["week", "category"] + box
    assert heads["rtt_weekly"] == ["week", "category"] + box
    assert heads["local_routes"] == heads["available_time"] == ["week", "category", "pct"]
    assert heads["interhop"] == ["category", "offset", "p5", "q1", "median", "q3", "p95", "count"]
    rows = list(csv.reader(open(tmp_path / "available_time.csv")))[1:]
    assert [r[1] for r in rows] == [c.value for c in CATEGORIES]

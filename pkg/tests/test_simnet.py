import json

import pytest

from ixpmeter.simnet import (SimBackend, SimError, TopologySpec, answer_probe, compile_spec,
                            scenario)
from ixpmeter.tracer import ReplyKind


def test_linear_ttl_expiry():
    s = scenario("linear")
    r = answer_probe(s, "200.87.0.1", "200.87.3.1", 2, 1)
    assert (r.kind, r.responder) == (ReplyKind.TTL_EXCEEDED, "200.87.2.1")
    assert r.rtt_us == 4000  # 2 x (1 ms + 1 ms), no jitter


@pytest.mark.parametrize("ttl", [3, 4, 30])
def test_destination_reply_when_ttl_covers_path(ttl):
    r = answer_probe(scenario("linear"), "200.87.0.1", "200.87.3.1", ttl, 1)
    assert (r.kind, r.responder, r.rtt_us) == (ReplyKind.ECHO_REPLY, "200.87.3.1", 6000)


def test_connected_host_behind_last_router():
    s = scenario("linear")
    r = answer_probe(s, "200.87.0.1", "200.87.77.5", 4, 1)
    assert (r.kind, r.responder, r.rtt_us) == (ReplyKind.ECHO_REPLY, "200.87.77.5", 8000)


def test_unroutable():
    s = scenario("misbehavior")
    with pytest.raises(SimError, match="unroutable"):
        answer_probe(s, "200.87.0.10", "8.8.8.8", 5, 1)


def test_rtt_monotone_without_jitter():
    s = scenario("linear")
    rtts = [answer_probe(s, "200.87.0.1", "200.87.9.9", t, 1).rtt_us for t in range(1, 5)]
    assert rtts == sorted(rtts)


def test_deterministic_across_specs():
    a, b = scenario("bolivia-like", seed=3), scenario("bolivia-like", seed=3)
    src = a.probes["santacruz"]
    for ttl in range(1, 15):
        assert answer_probe(a, src, "181.114.9.20", ttl, 7, epoch=2) == \
            answer_probe(b, src, "181.114.9.20", ttl, 7, epoch=2)


def test_ecmp_paths_depend_on_flow_only():
    s = scenario("ecmp")
    net = compile_spec(s)
    src = s.probes["ecmp"]
    p = {net.path(src, "200.87.99.9", f) for f in range(8)}
    assert len(p) == 2
    assert net.path(src, "200.87.99.9", 4) == net.path(src, "200.87.99.9", 6)


def test_spec_json_roundtrip(tmp_path):
    s = scenario("ecmp")
    f = tmp_path / "topo.json"
    f.write_text(s.dumps())
    loaded = TopologySpec.load(f)
    assert loaded.to_json() == s.to_json()
    assert answer_probe(loaded, "200.87.0.1", "200.87.99.9", 3, 5) == \
        answer_probe(s, "200.87.0.1", "200.87.99.9", 3, 5)
    assert set(json.loads(f.read_text())) >= {"nodes", "links", "ecmp_groups", "ixp_node",
                                              "foreign_segment", "routes", "seed"}


def test_unknown_fields_and_scenarios():
    with pytest.raises(SimError):
        TopologySpec.from_json({"nodes": [], "bogus": 1})
    with pytest.raises(SimError, match="unknown scenario"):
        scenario("atlantis")


def test_routing_loop_detected():
    s = TopologySpec(
        nodes=[{"addr": "10.0.0.1"}, {"addr": "10.0.0.2"}, {"addr": "10.0.0.3"}],
        links=[{"a": "10.0.0.1", "b": "10.0.0.2", "one_way_delay_us": 1},
               {"a": "10.0.0.2", "b": "10.0.0.3", "one_way_delay_us": 1}],
        routes={"10.0.0.1": {"0.0.0.0/0": "10.0.0.2"}, "10.0.0.2": {"0.0.0.0/0": "10.0.0.3"},
                "10.0.0.3": {"0.0.0.0/0": "10.0.0.2"}})
    with pytest.raises(SimError, match="loop"):
        answer_probe(s, "10.0.0.1", "1.2.3.4", 5, 1)


def test_silent_router_and_host():
    s = scenario("linear")
    s.nodes[2]["labels"].append("silent")
    s.silent_prefixes = ["200.87.50.0/24"]
    assert answer_probe(s, "200.87.0.1", "200.87.9.9", 2, 1).kind is ReplyKind.TIMEOUT
    assert answer_probe(s, "200.87.0.1", "200.87.50.9", 9, 1).kind is ReplyKind.TIMEOUT
    assert answer_probe(s, "200.87.0.1", "200.87.9.9", 9, 1).kind is ReplyKind.ECHO_REPLY


def test_backend_advances_virtual_clock():
    be = SimBackend(scenario("linear"), "linear", start_us=10, timeout_ms=2000)
    be.send(2, 1, "200.87.9.9")
    assert be.clock.now_us() == 10 + 4000
    s = scenario("linear")
    s.silent_prefixes = ["200.87.9.0/24"]
    be = SimBackend(s, "200.87.0.1")
    be.send(9, 1, "200.87.9.9")
    assert be.clock.now_us() == 2_000_000


def test_bolivia_like_shape():
    s = scenario("bolivia-like")
    assert len({l for n in s.nodes for l in n["labels"] if l.startswith("as")}) == 6
    assert s.ixp_node == "203.0.113.1"
    assert len(s.foreign_segment) >= 2
    assert set(s.probes) == {"lapaz", "santacruz"}
    net = compile_spec(s)
    access = [net.links[(s.probes[p], net.path(s.probes[p], "131.0.1.1", 1)[0][0])] for p in s.probes]
    assert max(j for _, j in access) >= 10_000  # 4G-like leg

"""Deterministic synthetic network answering TTL-limited probes.

A topology is a set of routers joined by links with one-way delays, plus a
per-router routing table mapping destination prefixes to a next hop. A next
hop of ``"connected"`` means destination hosts hang directly off that router.
ECMP groups override a route with several equal-cost next hops; the branch
is picked as ``flow_id mod len(next_hops)``.

Replies depend only on (spec, src, dst, ttl, flow_id, epoch), so sweeps are
reproducible across runs and thread schedules.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

from .core import IpPrefix, PrefixSet, format_prefix, int_to_ip, ip_to_int, parse_prefix
from .tracer import ProbeReply, ReplyKind, VirtualClock

CONNECTED = "connected"
DEFAULT_ACCESS_DELAY_US = 500


class SimError(ValueError):
    pass


@dataclass
class TopologySpec:
    nodes: list = field(default_factory=list)
    links: list = field(default_factory=list)
    ecmp_groups: list = field(default_factory=list)
    ixp_node: Optional[str] = None
    foreign_segment: list = field(default_factory=list)
    routes: dict = field(default_factory=dict)
    seed: int = 0
    # scenario metadata and optional behaviours
    name: str = ""
    probes: dict = field(default_factory=dict)
    country_prefixes: list = field(default_factory=list)
    ixp_prefixes: list = field(default_factory=list)
    last_hop_penalty_us: int = 0
    host_reply_rate: float = 1.0
    silent_prefixes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "TopologySpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise SimError(f"unknown topology fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TopologySpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


class _Table:
    def __init__(self):
        self.prefixes = PrefixSet()
        self.next_hops: dict[IpPrefix, tuple] = {}

    def add(self, prefix: IpPrefix, hops: tuple):
        self.prefixes.add(prefix)
        self.next_hops[prefix] = hops

    def lookup(self, addr: int) -> Optional[tuple]:
        p = self.prefixes.longest_match(addr)
        return None if p is None else self.next_hops[p]


def _uniforms(key: bytes, n: int) -> list[float]:
    out: list[float] = []
    counter = 0
    while len(out) < n:
        h = hashlib.blake2b(key + struct.pack("!I", counter), digest_size=64).digest()
        out.extend(v / 2**32 for v in struct.unpack("!16I", h))
        counter += 1
    return out[:n]


class SimNetwork:
    """Compiled, immutable form of a TopologySpec."""

    def __init__(self, spec: TopologySpec):
        self.spec = spec
        self.nodes: dict[str, dict] = {}
        for n in spec.nodes:
            addr = n["addr"]
            ip_to_int(addr)
            if addr in self.nodes:
                raise SimError(f"duplicate node {addr}")
            self.nodes[addr] = n
        self.labels = {a: frozenset(n.get("labels", ())) for a, n in self.nodes.items()}
        self.links: dict[tuple[str, str], tuple[int, int]] = {}
        for ln in spec.links:
            a, b = ln["a"], ln["b"]
            for x in (a, b):
                if x not in self.nodes:
                    raise SimError(f"link endpoint {x} is not a node")
            v = (int(ln["one_way_delay_us"]), int(ln.get("jitter_us", 0)))
            self.links[(a, b)] = v
            self.links[(b, a)] = v
        self.tables: dict[str, _Table] = {a: _Table() for a in self.nodes}
        for node, table in spec.routes.items():
            if node not in self.nodes:
                raise SimError(f"routes for unknown node {node}")
            for pfx, nh in table.items():
                hops = tuple(nh) if isinstance(nh, list) else (nh,)
                self.tables[node].add(parse_prefix(pfx), hops)
        for g in spec.ecmp_groups:
            if g["node"] not in self.nodes:
                raise SimError(f"ECMP group on unknown node {g['node']}")
            if len(g["next_hops"]) < 1:
                raise SimError("ECMP group without next hops")
            self.tables[g["node"]].add(parse_prefix(g["prefix"]), tuple(g["next_hops"]))
        self.silent = PrefixSet(parse_prefix(p) for p in spec.silent_prefixes)
        self._seed = struct.pack("!q", int(spec.seed))
        self._paths: dict[tuple, tuple] = {}

    def path(self, src: str, dst: str, flow_id: int) -> tuple:
        """Routers after ``src`` up to the destination, as ``(addr, delay, jitter)``."""
        key = (src, dst, flow_id)
        cached = self._paths.get(key)
        if cached is not None:
            return cached
        if src not in self.nodes:
            raise SimError(f"source {src} is not a node")
        d = ip_to_int(dst)
        out = []
        cur = src
        seen = {src}
        while cur != dst:
            hops = self.tables[cur].lookup(d)
            if hops is None:
                raise SimError(f"{dst} unroutable at {cur}")
            nxt = hops[flow_id % len(hops)]
            if nxt == CONNECTED:
                node = self.nodes[cur]
                out.append((dst, int(node.get("access_delay_us", DEFAULT_ACCESS_DELAY_US)),
                            int(node.get("access_jitter_us", 0))))
                break
            link = self.links.get((cur, nxt))
            if link is None:
                raise SimError(f"no link {cur} -> {nxt}")
            if nxt in seen:
                raise SimError(f"routing loop towards {dst} at {nxt}")
            seen.add(nxt)
            out.append((nxt, link[0], link[1]))
            cur = nxt
        result = tuple(out)
        if len(self._paths) < 500_000:
            self._paths[key] = result
        return result

    def host_replies(self, dst: str) -> bool:
        labels = self.labels.get(dst)
        if labels is not None and ("silent" in labels or "unresponsive" in labels):
            return False
        if dst in self.silent:
            return False
        rate = self.spec.host_reply_rate
        if rate >= 1.0:
            return True
        u = _uniforms(self._seed + b"host" + dst.encode(), 1)[0]
        return u < rate

    def answer(self, src: str, dst: str, ttl: int, flow_id: int, epoch: int = 0) -> ProbeReply:
        if ttl < 1:
            raise SimError("ttl must be >= 1")
        p = self.path(src, dst, flow_id)
        if ttl < len(p):
            responder = p[ttl - 1][0]
            if "silent" in self.labels.get(responder, ()):
                return ProbeReply(None, None, ReplyKind.TIMEOUT)
            kind = ReplyKind.TTL_EXCEEDED
            used = p[:ttl]
        else:
            responder = dst
            if not self.host_replies(dst):
                return ProbeReply(None, None, ReplyKind.TIMEOUT)
            kind = ReplyKind.ECHO_REPLY
            used = p
        base = 2 * sum(h[1] for h in used)
        jitter = 0.0
        if any(h[2] for h in used):
            key = self._seed + struct.pack("!qI", epoch, ttl) + f"{src}|{dst}|{flow_id}".encode()
            us = _uniforms(key, len(used))
            jitter = sum(u * h[2] for u, h in zip(us, used))
        rtt = base + int(jitter)
        if kind is ReplyKind.ECHO_REPLY:
            rtt += self.spec.last_hop_penalty_us
        return ProbeReply(responder, rtt, kind)


def compile_spec(spec: TopologySpec) -> SimNetwork:
    net = getattr(spec, "_compiled", None)
    if net is None:
        net = SimNetwork(spec)
        object.__setattr__(spec, "_compiled", net)
    return net


def answer_probe(spec: TopologySpec, src: str, dst: str, ttl: int, flow_id: int,
                 epoch: int = 0) -> ProbeReply:
    return compile_spec(spec).answer(src, dst, ttl, flow_id, epoch)


class SimBackend:
    """Probing backend over a simulated network, driven by a virtual clock."""

    def __init__(self, spec: TopologySpec, src: str, start_us: int = 0,
                 timeout_ms: int = 2000, record_sends: bool = False):
        self.net = compile_spec(spec)
        if src in spec.probes:
            src = spec.probes[src]
        if src not in self.net.nodes:
            raise SimError(f"probe source {src} is not a node of {spec.name or 'topology'}")
        self.src = src
        self.clock = VirtualClock(start_us)
        self.timeout_us = timeout_ms * 1000
        self.epoch = 0
        self.sends: Optional[list[int]] = [] if record_sends else None

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def send(self, ttl: int, flow_id: int, dst: str) -> ProbeReply:
        if self.sends is not None:
            self.sends.append(self.clock.now_us())
        reply = self.net.answer(self.src, dst, ttl, flow_id, self.epoch)
        if reply.kind is ReplyKind.TIMEOUT:
            self.clock.sleep_us(self.timeout_us)
        else:
            self.clock.sleep_us(max(reply.rtt_us, 1))
        return reply


# --- canned scenarios ----------------------------------------------------------

class _Builder:
    def __init__(self, name: str, seed: int):
        self.spec = TopologySpec(name=name, seed=seed)

    def node(self, addr, *labels, **extra):
        self.spec.nodes.append({"addr": addr, "labels": list(labels), **extra})
        return addr

    def link(self, a, b, delay_us, jitter_us=0):
        self.spec.links.append({"a": a, "b": b, "one_way_delay_us": int(delay_us),
                                "jitter_us": int(jitter_us)})

    def route(self, node, prefix, next_hop):
        self.spec.routes.setdefault(node, {})[prefix] = next_hop


def _linear(seed: int) -> TopologySpec:
    b = _Builder("linear", seed)
    src = b.node("200.87.0.1", "probe")
    r = [b.node(f"200.87.{i}.1", "domestic") for i in (1, 2, 3)]
    b.spec.nodes[-1]["access_delay_us"] = 1000
    chain = [src] + r
    for x, y in zip(chain, chain[1:]):
        b.link(x, y, 1000)
    for x, y in zip(chain, chain[1:]):
        b.route(x, "0.0.0.0/0", y)
    b.route(r[-1], "0.0.0.0/0", CONNECTED)
    b.spec.probes = {"linear": src}
    b.spec.country_prefixes = ["200.87.0.0/16"]
    b.spec.ixp_prefixes = ["203.0.113.0/24"]
    return b.spec


def _ecmp(seed: int) -> TopologySpec:
    b = _Builder("ecmp", seed)
    src = b.node("200.87.0.1", "probe")
    r1 = b.node("200.87.1.1")
    branches = [[b.node("200.87.10.1"), b.node("200.87.11.1")],
                [b.node("200.87.20.1"), b.node("200.87.21.1"), b.node("200.87.22.1")]]
    r3 = b.node("200.87.3.1", access_delay_us=1000)
    b.link(src, r1, 1000, 100)
    b.route(src, "0.0.0.0/0", r1)
    for br in branches:
        hops = [r1] + br + [r3]
        for x, y in zip(hops, hops[1:]):
            b.link(x, y, 1000, 100)
        for x, y in zip(br, br[1:] + [r3]):
            b.route(x, "0.0.0.0/0", y)
    b.spec.ecmp_groups.append({"node": r1, "prefix": "0.0.0.0/0",
                               "next_hops": [br[0] for br in branches]})
    b.route(r3, "0.0.0.0/0", CONNECTED)
    b.spec.probes = {"ecmp": src}
    b.spec.country_prefixes = ["200.87.0.0/16"]
    b.spec.ixp_prefixes = ["203.0.113.0/24"]
    return b.spec


def _misbehavior(seed: int) -> TopologySpec:
    b = _Builder("misbehavior", seed)
    src = b.node("200.87.0.10", "probe")
    gw = b.node("200.87.0.1")
    border_a = b.node("200.87.0.2")
    ixp = b.node("203.0.113.1", "ixp")
    border_b = b.node("190.129.0.1")
    foreign = [b.node("64.86.1.1", "foreign"), b.node("64.86.2.1", "foreign")]
    edge_b = b.node("190.129.1.1", access_delay_us=1000)
    b.link(src, gw, 500)
    b.link(gw, border_a, 2000)
    b.link(border_a, ixp, 300)
    b.link(ixp, border_b, 300)
    b.link(ixp, foreign[0], 20000)
    b.link(foreign[0], foreign[1], 25000)
    b.link(foreign[1], border_b, 5000)
    b.link(border_b, edge_b, 3000)
    b.route(src, "0.0.0.0/0", gw)
    b.route(gw, "0.0.0.0/0", border_a)
    b.route(border_a, "0.0.0.0/0", ixp)
    b.route(border_a, "200.87.0.0/16", CONNECTED)
    b.route(ixp, "190.129.0.0/17", border_b)
    b.route(ixp, "190.129.128.0/17", foreign[0])
    b.route(foreign[0], "0.0.0.0/0", foreign[1])
    b.route(foreign[1], "0.0.0.0/0", border_b)
    b.route(border_b, "0.0.0.0/0", edge_b)
    b.route(edge_b, "0.0.0.0/0", CONNECTED)
    b.spec.ixp_node = ixp
    b.spec.foreign_segment = foreign
    b.spec.probes = {"misbehavior": src}
    b.spec.country_prefixes = ["200.87.0.0/16", "190.129.0.0/16"]
    b.spec.ixp_prefixes = ["203.0.113.0/24"]
    return b.spec


# Twenty /16 blocks (~1.3M addresses) shared by six domestic ASes; the first
# two host the probe sites.
BOLIVIA_LIKE_BLOCKS = [
    "200.87.0.0/16", "200.105.0.0/16",
    "190.129.0.0/16", "190.104.0.0/16",
    "190.181.0.0/16", "190.186.0.0/16", "186.27.0.0/16", "181.114.0.0/16", "181.115.0.0/16",
    "181.188.0.0/16", "161.56.0.0/16", "166.114.0.0/16", "179.58.0.0/16",
    "177.222.0.0/16", "131.0.0.0/16", "138.0.0.0/16", "170.0.0.0/16",
    "143.255.0.0/16", "152.231.0.0/16", "168.226.0.0/16",
]
_AS_BLOCKS = [1, 1, 6, 5, 4, 3]
_P2P_LINKS = {(0, 2), (0, 3), (1, 4), (1, 5), (2, 3)}


def _bolivia_like(seed: int) -> TopologySpec:
    """Six domestic ASes meshed through one IXP switch, sparse P2P links and
    a ~40 ms one-way international transit segment."""
    rng = random.Random(seed)
    b = _Builder("bolivia-like", seed)
    b.spec.country_prefixes = list(BOLIVIA_LIKE_BLOCKS)
    b.spec.ixp_prefixes = ["203.0.113.0/24"]
    b.spec.host_reply_rate = 0.5

    ixp = b.node("203.0.113.1", "ixp")
    b.spec.ixp_node = ixp
    foreign = [b.node(f"64.86.{i}.1", "foreign") for i in range(1, 5)]
    b.spec.foreign_segment = foreign
    for x, y, d in zip(foreign, foreign[1:], (25000, 8000, 5000)):
        b.link(x, y, d, d // 10)

    blocks = [parse_prefix(p) for p in BOLIVIA_LIKE_BLOCKS]
    as_blocks: list[list[IpPrefix]] = []
    i = 0
    for n in _AS_BLOCKS:
        as_blocks.append(blocks[i:i + n])
        i += n

    borders = []
    for k, owned in enumerate(as_blocks):
        border = b.node(int_to_ip(owned[0].base + 1), "border", f"as{k}")
        peer = b.node(int_to_ip(owned[0].base + 2), "peering", f"as{k}")
        borders.append(border)
        b.link(border, ixp, 300, 50)
        b.link(ixp, peer, 300, 50)
        b.link(peer, border, 1000, 100)
        # edge chains: each block reached through 1-3 internal routers
        for j, blk in enumerate(owned):
            depth = 1 + rng.randrange(3)
            prev = border
            for d in range(depth):
                labels = ["edge", f"as{k}"]
                if d == 0 and k == 3:
                    # provider using RFC-1918 space inside its core
                    e = b.node(f"10.{k}.{j}.{d + 1}", *labels)
                else:
                    e = b.node(int_to_ip(blk.base + (1 << 8) * (d + 1) + 1), *labels)
                b.link(prev, e, rng.choice((2000, 3000, 4000)), 300)
                b.route(prev, format_prefix(blk), e)
                prev = e
            b.spec.nodes[-1]["access_delay_us"] = 1500
            b.spec.nodes[-1]["access_jitter_us"] = 1000
            b.route(prev, format_prefix(blk), CONNECTED)
            b.route(ixp, format_prefix(blk), peer)
            b.route(peer, format_prefix(blk), border)
            b.route(foreign[-1], format_prefix(blk), border)
        b.link(foreign[-1], border, 5000, 500)
        b.link(border, foreign[0], 4000, 4000)
    for x, y in zip(foreign, foreign[1:]):
        b.route(x, "0.0.0.0/0", y)

    for (p, q) in sorted(_P2P_LINKS):
        b.link(borders[p], borders[q], 8000, 800)

    # inter-AS policy per /18: IXP, P2P (when a direct link exists) or transit
    for k, border in enumerate(borders):
        for j, owned in enumerate(as_blocks):
            if j == k:
                continue
            has_p2p = (min(j, k), max(j, k)) in _P2P_LINKS
            for blk in owned:
                for quarter in range(4):
                    sub = format_prefix(IpPrefix(blk.base + (quarter << 14), 18))
                    u = rng.random()
                    if has_p2p and u < 0.2:
                        nh = borders[j]
                    elif u < 0.78:
                        nh = ixp
                    else:
                        nh = foreign[0]
                    b.route(border, sub, nh)

    # probe sites: La Paz-like (wired) in AS0, Santa Cruz-like (4G access) in AS1
    sites = [("lapaz", 0, 1000, 200, 3), ("santacruz", 1, 1500, 12000, 2)]
    for probe_id, k, delay, jitter, core_len in sites:
        infra = as_blocks[k][0].base
        src = b.node(int_to_ip(infra + (200 << 8) + 10), "probe")
        chain = [src] + [b.node(int_to_ip(infra + (200 << 8) + 1 + c), "core", f"as{k}")
                         for c in range(core_len)]
        b.link(chain[0], chain[1], delay, jitter)
        for x, y in zip(chain[1:], chain[2:]):
            b.link(x, y, 2000, 200)
        b.link(chain[-1], borders[k], 2000, 200)
        hops = chain + [borders[k]]
        for x, y in zip(hops, hops[1:]):
            b.route(x, "0.0.0.0/0", y)
        b.spec.probes[probe_id] = src
    for border in borders:
        b.route(border, "0.0.0.0/0", foreign[0])
    return b.spec


SCENARIOS = {
    "linear": _linear,
    "ecmp": _ecmp,
    "bolivia-like": _bolivia_like,
    "misbehavior": _misbehavior,
}


def scenario(name: str, seed: int = 0) -> TopologySpec:
    try:
        build = SCENARIOS[name]
    except KeyError:
        raise SimError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return build(seed)

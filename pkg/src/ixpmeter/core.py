"""Domain types shared by every module: prefixes, address scope, traces."""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import json
import socket
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union


_UNPACK = struct.Struct("!I").unpack
_PACK = struct.Struct("!I").pack


class PrefixError(ValueError):
    pass


class RecordError(ValueError):
    pass


def ip_to_int(addr: Union[str, int]) -> int:
    if isinstance(addr, int):
        if not 0 <= addr <= 0xFFFFFFFF:
            raise ValueError(f"address out of range: {addr}")
        return addr
    try:
        return _UNPACK(socket.inet_pton(socket.AF_INET, addr))[0]
    except (OSError, TypeError):
        raise ValueError(f"bad IPv4 address {addr!r}") from None


def int_to_ip(value: int) -> str:
    return socket.inet_ntop(socket.AF_INET, _PACK(value))


@dataclass(frozen=True, order=True)
class IpPrefix:
    base: int
    length: int

    def __post_init__(self):
        if not 0 <= self.length <= 32:
            raise PrefixError(f"prefix length out of range: {self.length}")
        if not 0 <= self.base <= 0xFFFFFFFF:
            raise PrefixError(f"base address out of range: {self.base}")
        if self.base & ~self.netmask & 0xFFFFFFFF:
            raise PrefixError(
                f"nonzero host bits in {int_to_ip(self.base)}/{self.length}")

    @property
    def netmask(self) -> int:
        return (0xFFFFFFFF << (32 - self.length)) & 0xFFFFFFFF

    @property
    def size(self) -> int:
        return 1 << (32 - self.length)

    @property
    def last(self) -> int:
        return self.base + self.size - 1

    def __contains__(self, addr) -> bool:
        a = ip_to_int(addr)
        return (a & self.netmask) == self.base

    def covers(self, other: "IpPrefix") -> bool:
        return self.length <= other.length and (other.base & self.netmask) == self.base

    def __str__(self) -> str:
        return format_prefix(self)


def parse_prefix(text: str) -> IpPrefix:
    """Parse ``a.b.c.d/len``. Host bits set below the length are an error."""
    text = text.strip()
    if text.count("/") != 1:
        raise PrefixError(f"malformed prefix {text!r}: expected addr/len")
    addr_s, len_s = text.split("/")
    if not len_s.isdigit():
        raise PrefixError(f"malformed prefix length in {text!r}")
    length = int(len_s)
    if length > 32:
        raise PrefixError(f"prefix length out of range in {text!r}")
    try:
        base = int(ipaddress.IPv4Address(addr_s))
    except ipaddress.AddressValueError:
        raise PrefixError(f"malformed address in {text!r}") from None
    return IpPrefix(base, length)


def format_prefix(prefix: IpPrefix) -> str:
    return f"{int_to_ip(prefix.base)}/{prefix.length}"


def read_netblocks(path: Union[str, Path]) -> list[IpPrefix]:
    """Read a netblock file: one CIDR per line, ``#`` comments, blanks ignored."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                out.append(parse_prefix(line))
            except PrefixError as e:
                raise PrefixError(f"{path}:{lineno}: {e}") from None
    return out


class PrefixSet:
    """Set of prefixes with union-semantics membership.

    Lookups hash the address once per distinct prefix length present, which
    keeps membership tests at a handful of dict probes regardless of how many
    prefixes are loaded.
    """

    def __init__(self, prefixes: Iterable[IpPrefix] = ()):
        self._by_len: dict[int, set[int]] = {}
        self._prefixes: set[IpPrefix] = set()
        self._lengths: list[int] = []
        for p in prefixes:
            self.add(p)

    def add(self, prefix: IpPrefix) -> None:
        self._prefixes.add(prefix)
        self._by_len.setdefault(prefix.length, set()).add(prefix.base)
        self._lengths = sorted(self._by_len, reverse=True)

    def __len__(self) -> int:
        return len(self._prefixes)

    def __iter__(self) -> Iterator[IpPrefix]:
        return iter(sorted(self._prefixes))

    def __contains__(self, addr) -> bool:
        return self.longest_match(addr) is not None

    def longest_match(self, addr) -> Optional[IpPrefix]:
        a = ip_to_int(addr)
        for length in self._lengths:
            base = a & ((0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF)
            if base in self._by_len[length]:
                return IpPrefix(base, length)
        return None


PRIVATE_PREFIXES = tuple(
    parse_prefix(p) for p in ("10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16"))


class Membership(enum.Enum):
    IXP = "Ixp"
    DOMESTIC = "Domestic"
    PRIVATE = "Private"
    FOREIGN = "Foreign"

    @property
    def in_country(self) -> bool:
        return self is not Membership.FOREIGN


class AddressScope:
    """Country allocation, IXP subnet and RFC-1918 space.

    Precedence when sets overlap: Ixp > Private > Domestic > Foreign.
    """

    def __init__(self, country_prefixes: Iterable[IpPrefix],
                 ixp_prefixes: Iterable[IpPrefix]):
        self.country_prefixes = frozenset(country_prefixes)
        self.ixp_prefixes = frozenset(ixp_prefixes)
        self.private_prefixes = frozenset(PRIVATE_PREFIXES)
        if not self.country_prefixes:
            raise ValueError("address scope needs at least one country prefix")
        if not self.ixp_prefixes:
            raise ValueError("address scope needs at least one IXP prefix")
        self._country = PrefixSet(self.country_prefixes)
        self._ixp = PrefixSet(self.ixp_prefixes)
        self._private = PrefixSet(self.private_prefixes)

    @classmethod
    def from_files(cls, country_file, ixp_file) -> "AddressScope":
        return cls(read_netblocks(country_file), read_netblocks(ixp_file))

    def membership(self, addr) -> Membership:
        a = ip_to_int(addr)
        if a in self._ixp:
            return Membership.IXP
        if a in self._private:
            return Membership.PRIVATE
        if a in self._country:
            return Membership.DOMESTIC
        return Membership.FOREIGN


def scope_membership(scope: AddressScope, addr) -> Membership:
    return scope.membership(addr)


@dataclass(frozen=True)
class Hop:
    ttl: int
    addr: Optional[str] = None
    rtt_us: Optional[int] = None

    def __post_init__(self):
        if self.ttl < 1:
            raise RecordError(f"hop ttl must be >= 1, got {self.ttl}")
        if (self.addr is None) != (self.rtt_us is None):
            raise RecordError(f"hop {self.ttl}: addr and rtt_us must both be set or both null")
        if self.rtt_us is not None and self.rtt_us < 0:
            raise RecordError(f"hop {self.ttl}: negative rtt")

    @property
    def is_star(self) -> bool:
        return self.addr is None

    def to_json(self) -> dict:
        return {"ttl": self.ttl, "addr": self.addr, "rtt_us": self.rtt_us}


@dataclass(frozen=True)
class TraceRecord:
    trace_id: str
    probe_id: str
    ts: int
    src: str
    dst: str
    flow_id: int
    hops: tuple[Hop, ...] = field(default_factory=tuple)
    reached: bool = False

    def __post_init__(self):
        if not isinstance(self.hops, tuple):
            object.__setattr__(self, "hops", tuple(self.hops))
        prev = 0
        for h in self.hops:
            if h.ttl <= prev:
                raise RecordError(f"trace {self.trace_id}: hops not strictly ascending by ttl")
            prev = h.ttl
        last = self.last_responding()
        hit = last is not None and last.addr == self.dst
        if self.reached != hit:
            raise RecordError(
                f"trace {self.trace_id}: reached={self.reached} but last responding hop "
                f"is {last.addr if last else None}")

    def responding(self) -> list[Hop]:
        return [h for h in self.hops if h.addr is not None]

    def last_responding(self) -> Optional[Hop]:
        for h in reversed(self.hops):
            if h.addr is not None:
                return h
        return None

    def to_json(self) -> dict:
        return {
            "trace_id": self.trace_id,
            "probe_id": self.probe_id,
            "ts": self.ts,
            "src": self.src,
            "dst": self.dst,
            "flow_id": self.flow_id,
            "reached": self.reached,
            "hops": [h.to_json() for h in self.hops],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TraceRecord":
        try:
            hops = tuple(Hop(int(h["ttl"]), h.get("addr"),
                             None if h.get("rtt_us") is None else int(h["rtt_us"]))
                         for h in obj["hops"])
            for h in hops:
                if h.addr is not None:
                    ip_to_int(h.addr)
            ip_to_int(obj["src"])
            ip_to_int(obj["dst"])
            return cls(
                trace_id=str(obj["trace_id"]),
                probe_id=str(obj["probe_id"]),
                ts=int(obj["ts"]),
                src=obj["src"],
                dst=obj["dst"],
                flow_id=int(obj["flow_id"]),
                hops=hops,
                reached=bool(obj["reached"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, RecordError):
                raise
            raise RecordError(f"malformed trace record: {e!r}") from None


def make_trace_id(probe_id: str, ts: int, dst: str, flow_id: int) -> str:
    key = f"{probe_id}|{ts}|{dst}|{flow_id}".encode()
    return hashlib.sha1(key).hexdigest()[:16]


def dumps_record(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_records(records: Iterable[TraceRecord], fh) -> int:
    n = 0
    for r in records:
        fh.write(dumps_record(r.to_json()) + "\n")
        n += 1
    return n


def iter_jsonl(lines: Iterable[str], errors: Optional[list] = None,
               source: str = "<stream>") -> Iterator[TraceRecord]:
    """Parse trace records from JSON lines.

    Bad lines raise unless ``errors`` is given, in which case a
    ``(source, lineno, message)`` tuple is appended and parsing continues.
    """
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise RecordError("record is not a JSON object")
            yield TraceRecord.from_json(obj)
        except (json.JSONDecodeError, RecordError) as e:
            if errors is None:
                raise RecordError(f"{source}:{lineno}: {e}") from None
            errors.append((source, lineno, str(e)))


def read_traces(path, errors: Optional[list] = None) -> Iterator[TraceRecord]:
    with open(path) as fh:
        yield from iter_jsonl(fh, errors=errors, source=str(path))

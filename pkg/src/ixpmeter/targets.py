"""Split country netblocks into /24 networks and pick one target per network."""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import IpPrefix, PrefixError, format_prefix, int_to_ip, ip_to_int, parse_prefix, read_netblocks


class TargetMode(enum.Enum):
    SERVICE = "Service"
    RANDOM = "Random"


@dataclass(frozen=True)
class Target:
    network: IpPrefix
    addr: str
    mode: TargetMode

    def __post_init__(self):
        if self.network.length != 24:
            raise ValueError(f"target network must be a /24, got {self.network}")
        a = ip_to_int(self.addr)
        if a not in self.network:
            raise ValueError(f"{self.addr} outside {self.network}")
        if a in (self.network.base, self.network.last):
            raise ValueError(f"{self.addr} is a network or broadcast address")

    def to_json(self) -> dict:
        return {"network": format_prefix(self.network), "addr": self.addr,
                "mode": self.mode.value}

    @classmethod
    def from_json(cls, obj: dict) -> "Target":
        return cls(parse_prefix(obj["network"]), obj["addr"], TargetMode(obj["mode"]))


def split_to_slash24(prefix: IpPrefix) -> list[IpPrefix]:
    if prefix.length > 24:
        raise PrefixError(f"{prefix} is longer than /24")
    return [IpPrefix(prefix.base + (i << 8), 24)
            for i in range(1 << (24 - prefix.length))]


def _seed_for(network: IpPrefix, seed: int) -> int:
    # per-network stream: output does not depend on iteration order
    return (seed & 0xFFFFFFFFFFFF) << 32 | network.base


def choose_target(network: IpPrefix, active: Iterable, seed: int) -> Target:
    """Lowest active-service address in ``network``, else a seeded random host.

    ``active`` holds addresses or ``(addr, port)`` pairs.
    """
    if network.length != 24:
        raise PrefixError(f"choose_target needs a /24, got {network}")
    best: Optional[int] = None
    for item in active:
        addr = item[0] if isinstance(item, tuple) else item
        a = ip_to_int(addr)
        if a in network and a not in (network.base, network.last):
            if best is None or a < best:
                best = a
    if best is not None:
        return Target(network, int_to_ip(best), TargetMode.SERVICE)
    rng = random.Random(_seed_for(network, seed))
    return Target(network, int_to_ip(network.base + rng.randint(1, 254)), TargetMode.RANDOM)


def _index_active(active: Iterable) -> dict[int, list]:
    by_net: dict[int, list] = {}
    for item in active:
        addr = item[0] if isinstance(item, tuple) else item
        by_net.setdefault(ip_to_int(addr) & 0xFFFFFF00, []).append(addr)
    return by_net


def build_targets(prefixes: Iterable[IpPrefix], active: Iterable = (),
                  seed: int = 0) -> list[Target]:
    nets: set[IpPrefix] = set()
    for p in prefixes:
        if p.length > 24:
            # a sub-/24 allocation still lives in exactly one /24
            nets.add(IpPrefix(p.base & 0xFFFFFF00, 24))
        else:
            nets.update(split_to_slash24(p))
    by_net = _index_active(active)
    return [choose_target(n, by_net.get(n.base, ()), seed) for n in sorted(nets)]


def build_target_list(country_file, active: Iterable = (), seed: int = 0) -> list[Target]:
    return build_targets(read_netblocks(country_file), active, seed)


def write_targets_jsonl(targets: Iterable[Target], fh) -> None:
    for t in targets:
        fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")


def write_targets_text(targets: Iterable[Target], fh) -> None:
    for t in targets:
        fh.write(t.addr + "\n")


def read_targets(path) -> list[Target]:
    """Read targets from JSON lines or a plain one-address-per-line file."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                if line.startswith("{"):
                    out.append(Target.from_json(json.loads(line)))
                else:
                    a = ip_to_int(line)
                    out.append(Target(IpPrefix(a & 0xFFFFFF00, 24), line, TargetMode.RANDOM))
            except (ValueError, KeyError) as e:
                raise ValueError(f"{path}:{lineno}: bad target: {e}") from None
    return out

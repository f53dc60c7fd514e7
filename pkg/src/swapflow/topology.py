"""Hierarchical communication fabric: uniform tiers, innermost first."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Any, Sequence


class TopologyError(ValueError):
    pass


class BadArity(TopologyError):
    pass


class NonPositive(TopologyError):
    pass


class SameRank(TopologyError):
    pass


@dataclass(frozen=True)
class Tier:
    name: str
    group_size: int
    bandwidth: float  # bytes/s, per link
    latency: float  # s


@dataclass(frozen=True)
class Topology:
    ranks: int
    tiers: tuple[Tier, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiers", tuple(self.tiers))
        if not self.tiers:
            raise BadArity("topology needs at least one tier")
        for t in self.tiers:
            if t.group_size < 1:
                raise BadArity(f"tier {t.name!r}: group_size must be >= 1")
            if not t.bandwidth > 0:
                raise NonPositive(f"tier {t.name!r}: bandwidth must be positive")
            if t.latency < 0 or math.isnan(t.latency):
                raise NonPositive(f"tier {t.name!r}: latency must be non-negative")
        prod = math.prod(t.group_size for t in self.tiers)
        if prod != self.ranks:
            raise BadArity(f"group sizes multiply to {prod}, not {self.ranks} ranks")
        active = [t for t in self.tiers if t.group_size > 1]
        if any(a.bandwidth < b.bandwidth for a, b in zip(active, active[1:])):
            warnings.warn("inner tier is slower than an outer tier", stacklevel=3)

    @property
    def radices(self) -> tuple[int, ...]:
        return tuple(t.group_size for t in self.tiers)

    def ranks_below(self, tier: int) -> int:
        """Ranks behind one endpoint of ``tier``: product of the inner group sizes."""
        return math.prod(self.radices[:tier])

    def decode(self, rank: int) -> tuple[int, ...]:
        if not 0 <= rank < self.ranks:
            raise IndexError(f"rank {rank} out of range")
        coord = []
        for g in self.radices:
            rank, digit = divmod(rank, g)
            coord.append(digit)
        return tuple(coord)

    def encode(self, coord: Sequence[int]) -> int:
        rank = 0
        for digit, g in zip(reversed(coord), reversed(self.radices)):
            rank = rank * g + digit
        return rank

    def groups(self, tier: int) -> list[list[int]]:
        """Rank groups communicating at ``tier``: equal coordinates everywhere except ``tier``."""
        g = self.radices[tier]
        seen: dict[tuple[int, ...], list[int]] = {}
        for r in range(self.ranks):
            c = list(self.decode(r))
            c[tier] = 0
            seen.setdefault(tuple(c), []).append(r)
        groups = list(seen.values())
        assert all(len(m) == g for m in groups)
        return groups

    def to_dict(self) -> dict[str, Any]:
        return {
            "ranks": self.ranks,
            "tiers": [
                {"name": t.name, "group_size": t.group_size, "bandwidth_bytes_per_s": t.bandwidth, "latency_s": t.latency}
                for t in self.tiers
            ],
        }


_TIER_KEYS = {"name", "group_size", "bandwidth_bytes_per_s", "latency_s"}


def parse_topology(config: str | dict[str, Any]) -> Topology:
    doc = json.loads(config) if isinstance(config, str) else config
    if not isinstance(doc, dict) or set(doc) != {"ranks", "tiers"}:
        raise TopologyError("topology needs exactly the keys 'ranks' and 'tiers'")
    tiers = []
    for i, t in enumerate(doc["tiers"]):
        if not isinstance(t, dict) or set(t) != _TIER_KEYS:
            raise TopologyError(f"tiers[{i}] needs exactly the keys {sorted(_TIER_KEYS)}")
        tiers.append(Tier(str(t["name"]), int(t["group_size"]), float(t["bandwidth_bytes_per_s"]), float(t["latency_s"])))
    return Topology(int(doc["ranks"]), tuple(tiers))


def tier_between(t: Topology, a: int, b: int) -> int:
    """Tier whose link a message from ``a`` to ``b`` must cross.

    That is the outermost coordinate where the two ranks differ, i.e. the tier
    of the smallest group holding both.
    """
    if a == b:
        raise SameRank(f"ranks {a} and {b} are the same")
    ca, cb = t.decode(a), t.decode(b)
    return max(i for i, (x, y) in enumerate(zip(ca, cb)) if x != y)


def two_level(nodes: int, per_node: int, intra: tuple[float, float], inter: tuple[float, float]) -> Topology:
    """``nodes`` x ``per_node`` fabric; ``intra``/``inter`` are (bandwidth, latency)."""
    return Topology(
        nodes * per_node,
        (Tier("intra", per_node, *intra), Tier("inter", nodes, *inter)),
    )


def ibm_minsky(nodes: int = 2) -> Topology:
    """4 NVLink-connected GPUs per node, 100 Gb/s InfiniBand between nodes."""
    return two_level(nodes, 4, (150e9, 5e-6), (12.5e9, 2e-6))


def intel_pcie(nodes: int = 2) -> Topology:
    """4 PCIe gen3 GPUs per node, 10 Gb/s Ethernet between nodes."""
    return two_level(nodes, 4, (12e9, 5e-6), (1.25e9, 20e-6))


def family(ranks: int, per_node: int, intra: tuple[float, float], inter: tuple[float, float]) -> Topology:
    """Fill nodes of ``per_node`` GPUs; fewer ranks than that stay on one node."""
    if ranks <= per_node:
        return two_level(1, ranks, intra, inter)
    if ranks % per_node:
        raise BadArity(f"{ranks} ranks do not fill nodes of {per_node}")
    return two_level(ranks // per_node, per_node, intra, inter)

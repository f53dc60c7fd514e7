"""Flat-ring and topology-aware hierarchical all-reduce.

Both variants compute an exact elementwise sum over simulated per-rank
buffers and report an alpha-beta modelled time. Byte counts assume FP32
elements (4 bytes) while payloads are held as float64.

The hierarchical schedule reduce-scatters from the innermost tier outwards,
then all-gathers back inwards. A tier's link is owned by its group endpoint
(e.g. a node's network adapter), so when every rank behind that endpoint
talks at once they split its bandwidth. The flat ring has exactly one flow
leaving each group per step, so it never splits a link.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .topology import Topology, tier_between

ELEM_BYTES = 4


class CollectiveError(ValueError):
    pass


class EmptyBuffers(CollectiveError):
    pass


class LengthMismatch(CollectiveError):
    pass


@dataclass(frozen=True)
class Phase:
    kind: str  # "ReduceScatter" | "AllGather"
    tier: int
    group_size: int
    # one entry per group: (rank, start, stop) for each member, ascending rank
    chunks: tuple[tuple[tuple[int, int, int], ...], ...]
    active_elems: int
    modeled_time: float
    link_share: int

    @property
    def chunk_bytes(self) -> float:
        return self.active_elems * ELEM_BYTES / self.group_size

    @property
    def bytes_per_rank(self) -> float:
        """Bytes each rank pushes through this tier during the phase."""
        return (self.group_size - 1) * self.chunk_bytes


@dataclass(frozen=True)
class ReduceSchedule:
    n_elems: int
    padded_elems: int
    phases: tuple[Phase, ...]

    @property
    def total_time(self) -> float:
        return sum(p.modeled_time for p in self.phases)

    def tier_bytes(self, tier: int) -> float:
        return sum(p.bytes_per_rank for p in self.phases if p.tier == tier)


def _as_matrix(bufs: Sequence[Sequence[float]] | np.ndarray, t: Topology) -> np.ndarray:
    if len(bufs) == 0:
        raise EmptyBuffers("no rank buffers")
    lengths = {len(b) for b in bufs}
    if len(lengths) != 1:
        raise LengthMismatch(f"rank buffers have lengths {sorted(lengths)}")
    if len(bufs) != t.ranks:
        raise LengthMismatch(f"{len(bufs)} buffers for {t.ranks} ranks")
    if lengths == {0}:
        raise EmptyBuffers("rank buffers are empty")
    return np.array(bufs, dtype=np.float64)


def ring_step_time(t: Topology, n_elems: int) -> float:
    """One ring step: every hop moves N/p bytes, the slowest hop sets the pace."""
    p = t.ranks
    chunk = n_elems * ELEM_BYTES / p
    worst = 0.0
    for tier in {tier_between(t, r, (r + 1) % p) for r in range(p)}:
        spec = t.tiers[tier]
        worst = max(worst, spec.latency + chunk / spec.bandwidth)
    return worst


def ring_cost(t: Topology, n_elems: int) -> float:
    if t.ranks == 1:
        return 0.0
    return 2 * (t.ranks - 1) * ring_step_time(t, n_elems)


def ring_allreduce(bufs, t: Topology) -> tuple[np.ndarray, float]:
    """Topology-oblivious ring in rank-id order: reduce-scatter then all-gather."""
    work = _as_matrix(bufs, t)
    p, n = work.shape
    if p == 1:
        return work, 0.0
    bounds = np.linspace(0, n, p + 1).astype(int)
    sl = [slice(bounds[i], bounds[i + 1]) for i in range(p)]
    for s in range(p - 1):
        for r in range(p):
            c = (r - s) % p
            work[(r + 1) % p, sl[c]] += work[r, sl[c]]
    for s in range(p - 1):
        for r in range(p):
            c = (r + 1 - s) % p
            work[(r + 1) % p, sl[c]] = work[r, sl[c]]
    return work, ring_cost(t, n)


def build_schedule(t: Topology, n_elems: int) -> ReduceSchedule:
    if n_elems < 1:
        raise ValueError("n_elems must be >= 1")
    padded = -(-n_elems // t.ranks) * t.ranks
    owned = {r: (0, padded) for r in range(t.ranks)}
    rs: list[Phase] = []
    for k, tier in enumerate(t.tiers):
        g = tier.group_size
        if g == 1:
            continue
        groups = []
        active = None
        for members in t.groups(k):
            lo, hi = owned[members[0]]
            active = hi - lo
            step = active // g
            entry = tuple((m, lo + j * step, lo + (j + 1) * step) for j, m in enumerate(members))
            for m, a, b in entry:
                owned[m] = (a, b)
            groups.append(entry)
        share = t.ranks_below(k)
        chunk_bytes = active * ELEM_BYTES / g
        time = (g - 1) * (tier.latency + chunk_bytes * share / tier.bandwidth)
        rs.append(Phase("ReduceScatter", k, g, tuple(groups), active, time, share))
    ag = [
        Phase("AllGather", p.tier, p.group_size, p.chunks, p.active_elems, p.modeled_time, p.link_share)
        for p in reversed(rs)
    ]
    return ReduceSchedule(n_elems, padded, tuple(rs + ag))


def hierarchical_allreduce(bufs, t: Topology) -> tuple[np.ndarray, ReduceSchedule]:
    """Run the schedule over simulated buffers; each chunk is summed in ascending rank order."""
    mat = _as_matrix(bufs, t)
    p, n = mat.shape
    sched = build_schedule(t, n)
    work = np.zeros((p, sched.padded_elems))
    work[:, :n] = mat
    for phase in sched.phases:
        for group in phase.chunks:
            members = [m for m, _, _ in group]
            for owner, a, b in group:
                if phase.kind == "ReduceScatter":
                    acc = work[members[0], a:b].copy()
                    for m in members[1:]:
                        acc += work[m, a:b]
                    work[owner, a:b] = acc
                else:
                    for m in members:
                        if m != owner:
                            work[m, a:b] = work[owner, a:b]
    return work[:, :n].copy(), sched


@dataclass(frozen=True)
class SweepRow:
    n_elems: int
    ring_time_s: float
    hier_time_s: float
    verified: bool

    @property
    def ratio(self) -> float:
        if self.hier_time_s == 0:
            return 1.0
        return self.ring_time_s / self.hier_time_s


def sweep_sizes(t: Topology, sizes: Sequence[int], verify_limit: int = 1 << 16, seed: int = 0) -> list[SweepRow]:
    """Cost of both algorithms per size; numerics cross-checked up to ``verify_limit`` elements."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        verified = False
        if n <= verify_limit:
            bufs = rng.integers(-1000, 1000, size=(t.ranks, n)).astype(np.float64)
            ring_out, ring_t = ring_allreduce(bufs, t)
            hier_out, sched = hierarchical_allreduce(bufs, t)
            if not np.array_equal(ring_out, hier_out):
                raise AssertionError(f"ring and hierarchical all-reduce disagree at n={n}")
            hier_t, verified = sched.total_time, True
        else:
            ring_t, hier_t = ring_cost(t, n), build_schedule(t, n).total_time
        rows.append(SweepRow(n, ring_t, hier_t, verified))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["n_elems,ring_time_s,hier_time_s,ratio"]
    for r in rows:
        lines.append(f"{r.n_elems},{r.ring_time_s!r},{r.hier_time_s!r},{r.ratio!r}")
    return "\n".join(lines) + "\n"


def inter_tier_traffic(t: Topology, n_elems: int) -> float:
    """Closed form for outermost-tier bytes per rank: 2 (g_o - 1)/g_o * padded_bytes / inner ranks."""
    outer = len(t.tiers) - 1
    g_o = t.tiers[outer].group_size
    padded = -(-n_elems // t.ranks) * t.ranks
    return 2 * (g_o - 1) / g_o * padded * ELEM_BYTES / t.ranks_below(outer)


def log2_sizes(lo: int, hi: int) -> list[int]:
    return [1 << k for k in range(int(math.log2(lo)), int(math.log2(hi)) + 1)]

"""Speedup, scaling efficiency, resolution and overhead arithmetic."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence


class NonPositiveTime(ValueError):
    pass


class NonPositive(ValueError):
    pass


def _positive(*times: float) -> None:
    for t in times:
        if not t > 0:
            raise NonPositiveTime(f"times must be positive, got {t!r}")


def round_half_up(x: float, places: int) -> float:
    """Round at ``places`` decimals with ties away from zero, on the shortest decimal repr of ``x``."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def speedup(t_base: float, t_new: float) -> float:
    _positive(t_base, t_new)
    return t_base / t_new


def efficiency(t1: float, tp: float, p: int) -> float:
    """Percent of ideal linear scaling; superlinear results are not clamped."""
    _positive(t1, tp, p)
    return 100.0 * t1 / (tp * p)


def resolution_ratio(r_new: float, r_base: float) -> float:
    """Voxel-count growth between two cubic inputs."""
    if not (r_new > 0 and r_base > 0):
        raise NonPositive("resolutions must be positive")
    return (r_new / r_base) ** 3


def overhead_pct(t_with: float, t_without: float) -> float:
    _positive(t_with, t_without)
    return 100.0 * (t_with - t_without) / t_without


@dataclass(frozen=True)
class ScalingRow:
    ranks: int
    nodes: int
    time_s: float
    speedup_prev: float | None
    efficiency_pct: float | None


def scaling_table(ranks: Sequence[int], times: Sequence[float], nodes: Sequence[int] | None = None) -> list[ScalingRow]:
    """Rows in the order given. The first row is the baseline: no speedup, 100% efficiency."""
    if len(ranks) != len(times):
        raise ValueError("ranks and times differ in length")
    nodes = list(nodes) if nodes is not None else [1] * len(ranks)
    rows = []
    for i, (p, t) in enumerate(zip(ranks, times)):
        # a baseline on more than one rank is assumed to scale ideally down to 1
        eff = efficiency(times[0] * ranks[0], t, p)
        prev = None if i == 0 else speedup(times[i - 1], t)
        rows.append(ScalingRow(p, nodes[i], t, prev, eff))
    return rows


def scaling_csv(rows: Sequence[ScalingRow]) -> str:
    lines = ["ranks,epoch_s,speedup_prev,efficiency_pct"]
    for r in rows:
        sp = "" if r.speedup_prev is None else f"{round_half_up(r.speedup_prev, 2):.2f}"
        eff = "" if r.efficiency_pct is None else f"{round_half_up(r.efficiency_pct, 1):.1f}"
        lines.append(f"{r.ranks},{r.time_s!r},{sp},{eff}")
    return "\n".join(lines) + "\n"

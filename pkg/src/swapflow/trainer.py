"""Synchronous data-parallel SGD over simulated ranks.

Each rank sums its shard's per-sample gradients, the sums meet in a
hierarchical all-reduce, and every rank applies the same update. Gradients
travel as exact limb sums (see ``exactsum``) so the result is the correctly
rounded full-batch sum, bit for bit, whatever the rank count or topology.
With an LMS capacity set, each rank's accumulation runs as a graph through
the capacity-bounded executor, rewritten with swap nodes so it fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import exactsum
from .collectives import hierarchical_allreduce
from .executor import NVLINK2, DeviceConfig, execute
from .graph import Graph, GraphBuilder
from .metrics import ScalingRow, scaling_table
from .planner import insert_swaps, plan_for_capacity
from .topology import Topology


class TrainingError(RuntimeError):
    pass


class Diverged(TrainingError):
    pass


class ReplicaDivergence(TrainingError):
    pass


@dataclass
class ToyModel:
    """Least squares: loss = sum_i (x_i . w - y_i)**2."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.array(self.weights, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.weights.size


def residuals(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    # column-by-column so each sample's arithmetic is independent of the batch it sits in
    r = x[:, 0] * w[0]
    for j in range(1, w.size):
        r = r + x[:, j] * w[j]
    return r - y


def sample_terms(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-sample [gradient..., loss] rows: 2 x_i (x_i . w - y_i) and its squared residual."""
    r = residuals(x, y, w)
    return np.column_stack([2.0 * x * r[:, None], r * r])


def gradient_flops(n_samples: int, dim: int) -> int:
    return n_samples * (4 * dim + 2)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def shard(self, lo: int, hi: int) -> Dataset:
        return Dataset(self.x[lo:hi], self.y[lo:hi])


def synthetic_dataset(n_samples: int, dim: int, seed: int = 0) -> Dataset:
    """Small integer features and targets from a noisy integer linear model."""
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 4, size=(n_samples, dim)).astype(np.float64)
    true_w = rng.integers(-2, 3, size=dim).astype(np.float64)
    y = x @ true_w + rng.integers(-1, 2, size=n_samples)
    return Dataset(x, y.astype(np.float64))


def partition(n_samples: int, ranks: int) -> list[tuple[int, int]]:
    """Contiguous ranges; the first ``n % ranks`` ranks take one extra sample."""
    if ranks < 1:
        raise ValueError("ranks must be >= 1")
    base, extra = divmod(n_samples, ranks)
    out, lo = [], 0
    for r in range(ranks):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass(frozen=True)
class LMSSettings:
    capacity: int
    threshold: int = 1
    prefetch_distance: int = 0
    micro_batches: int = 8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 0.1
    flop_rate: float = 1e9
    device: DeviceConfig = NVLINK2
    lms: LMSSettings | None = None

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    compute_s: tuple[float, ...]
    allreduce_s: float
    wall_s: float
    loss: float

    def to_dict(self, ranks: int | None = None) -> dict:
        doc = {"epoch": self.epoch, "wall_s": self.wall_s, "allreduce_s": self.allreduce_s, "loss": self.loss}
        if ranks is not None:
            doc["ranks"] = ranks
        return doc


@dataclass
class TrainResult:
    weights: np.ndarray
    reports: list[EpochReport] = field(default_factory=list)
    peak_device_bytes: int = 0


def accumulation_graph(limb_parts: Sequence[np.ndarray], costs: Sequence[float]) -> tuple[Graph, dict[str, np.ndarray]]:
    """Forward/backward-shaped graph summing micro-batch partials.

    Forward op k stashes micro-batch k's partial as an activation that the
    backward sweep consumes in reverse order, so early activations stay live
    across the whole step and become swap candidates.
    """
    k_total = len(limb_parts)
    nbytes = limb_parts[0].size * 8
    b = GraphBuilder(dtype_width=8)
    inputs = {}
    for k, part in enumerate(limb_parts):
        src = f"f{k:03d}_in"
        b.source(src, (f"mb{k:03d}", nbytes))
        inputs[f"mb{k:03d}"] = part
        b.compute(f"f{k:03d}", [f"mb{k:03d}"], [(f"act{k:03d}", nbytes)], costs[k] / 3, fn="identity")
    for k in reversed(range(k_total)):
        ins = [f"act{k:03d}"] if k == k_total - 1 else [f"acc{k + 1:03d}", f"act{k:03d}"]
        b.compute(f"g{k:03d}", ins, [(f"acc{k:03d}", nbytes)], 2 * costs[k] / 3)
    b.sink("z_sink", "acc000")
    return b.build(), inputs


def _limbs(shard: Dataset, w: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
        terms = sample_terms(shard.x, shard.y, w)
    if not np.all(np.isfinite(terms)):
        raise Diverged("non-finite gradient")
    return exactsum.encode_sum(terms).ravel()


def _shard_limbs_lms(shard: Dataset, w: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, float, int]:
    lms = cfg.lms
    assert lms is not None
    bounds = partition(len(shard), min(lms.micro_batches, max(len(shard), 1)))
    parts, costs = [], []
    for lo, hi in bounds:
        sub = shard.shard(lo, hi)
        parts.append(_limbs(sub, w))
        costs.append(gradient_flops(hi - lo, w.size) / cfg.flop_rate)
    graph, inputs = accumulation_graph(parts, costs)
    plan = plan_for_capacity(graph, lms.capacity, lms.threshold, lms.prefetch_distance)
    rewritten = insert_swaps(graph, plan)
    device = DeviceConfig(lms.capacity, max(lms.capacity, cfg.device.host_capacity), cfg.device.h2d_bandwidth,
                          cfg.device.d2h_bandwidth, cfg.device.link_latency)
    outputs, trace = execute(rewritten, device, inputs)
    return outputs["acc000"].payload, trace.makespan, trace.peak_device_bytes


def _decode(limbs: np.ndarray, dim: int) -> np.ndarray:
    return exactsum.decode(limbs.reshape(dim + 1, exactsum.N_LIMBS))


def train(model: ToyModel, data: Dataset, topology: Topology, config: TrainConfig) -> TrainResult:
    """Run ``config.epochs`` full-batch steps; returns the (shared) final weights and per-epoch reports."""
    p, d, n = topology.ranks, model.dim, len(data)
    if not 1 <= n <= exactsum.MAX_TERMS:
        raise ValueError(f"dataset size must be in [1, {exactsum.MAX_TERMS}]")
    shards = [data.shard(lo, hi) for lo, hi in partition(n, p)]
    replicas = [model.weights.copy() for _ in range(p)]
    result = TrainResult(model.weights.copy())
    for epoch in range(config.epochs):
        bufs, times = [], []
        for r, shard in enumerate(shards):
            if config.lms is not None:
                limbs, seconds, peak = _shard_limbs_lms(shard, replicas[r], config)
                result.peak_device_bytes = max(result.peak_device_bytes, peak)
            else:
                limbs = _limbs(shard, replicas[r])
                seconds = gradient_flops(len(shard), d) / config.flop_rate
            bufs.append(limbs)
            times.append(seconds)
        reduced, sched = hierarchical_allreduce(np.stack(bufs), topology)
        loss = math.nan
        for r in range(p):
            totals = _decode(reduced[r], d)
            replicas[r] = replicas[r] - config.lr * (totals[:d] / n)
            loss = totals[d] / n
        first = replicas[0]
        for r in range(1, p):
            if replicas[r].tobytes() != first.tobytes():
                raise ReplicaDivergence(f"rank {r} weights differ from rank 0 after epoch {epoch}")
        if not (math.isfinite(loss) and np.all(np.isfinite(first))):
            raise Diverged(f"non-finite loss or weights after epoch {epoch}")
        allreduce = sched.total_time
        result.reports.append(EpochReport(epoch, tuple(times), allreduce, max(times) + allreduce, loss))
    result.weights = replicas[0].copy()
    return result


def reference_full_batch(model: ToyModel, data: Dataset, epochs: int, lr: float) -> np.ndarray:
    """Single-process full-batch gradient descent with plain ``math.fsum`` accumulation."""
    w = model.weights.copy()
    n = len(data)
    for _ in range(epochs):
        terms = sample_terms(data.x, data.y, w)
        g = np.array([math.fsum(terms[:, j]) for j in range(w.size)])
        w = w - lr * (g / n)
    return w


def scaling_run(
    model: ToyModel,
    data: Dataset,
    rank_counts: Sequence[int],
    topology_for: Callable[[int], Topology],
    config: TrainConfig,
    gpus_per_node: int = 4,
) -> tuple[list[ScalingRow], dict[int, TrainResult]]:
    """Train once per rank count; tabulate epoch wall time (mean over epochs) against the first count."""
    results = {}
    times = []
    for p in rank_counts:
        res = train(model, data, topology_for(p), config)
        results[p] = res
        times.append(sum(r.wall_s for r in res.reports) / len(res.reports))
    nodes = [max(1, -(-p // gpus_per_node)) for p in rank_counts]
    return scaling_table(list(rank_counts), times, nodes), results

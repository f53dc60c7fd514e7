"""Deterministic, capacity-bounded graph execution.

Memory is accounted per step of the topological order: an op's outputs are
allocated before it runs, and a tensor is released right after its last
consumer (immediately, if it has none). Time is modelled with one device
compute stream and one transfer stream per direction; ops are issued in
order, so an op never starts before its predecessor in the order, but a
transfer may overlap device compute.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .graph import Graph, OpKind, OpNode, liveness, topo_order, validate


class ExecutionError(RuntimeError):
    pass


class DeviceOOM(ExecutionError):
    def __init__(self, op_id: str, needed: int, capacity: int):
        super().__init__(f"device OOM at {op_id!r}: needs {needed} bytes, capacity {capacity}")
        self.op_id, self.needed, self.capacity = op_id, needed, capacity


class HostOOM(ExecutionError):
    def __init__(self, op_id: str, needed: int, capacity: int):
        super().__init__(f"host OOM at {op_id!r}: needs {needed} bytes, capacity {capacity}")
        self.op_id, self.needed, self.capacity = op_id, needed, capacity


class MissingInput(ExecutionError):
    def __init__(self, tensor_id: str, reason: str = "not bound"):
        super().__init__(f"source tensor {tensor_id!r} {reason}")
        self.tensor_id = tensor_id


@dataclass(frozen=True)
class DeviceConfig:
    capacity: int
    host_capacity: int
    h2d_bandwidth: float
    d2h_bandwidth: float
    link_latency: float

    def __post_init__(self) -> None:
        for name in ("capacity", "host_capacity", "h2d_bandwidth", "d2h_bandwidth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"DeviceConfig.{name} must be positive")
        if self.link_latency < 0:
            raise ValueError("DeviceConfig.link_latency must be non-negative")
        if self.capacity > self.host_capacity:
            raise ValueError("device capacity may not exceed host capacity")

    @classmethod
    def from_dict(cls, doc: Mapping) -> DeviceConfig:
        return cls(
            capacity=int(doc["capacity"]),
            host_capacity=int(doc["host_capacity"]),
            h2d_bandwidth=float(doc["h2d_bandwidth"]),
            d2h_bandwidth=float(doc["d2h_bandwidth"]),
            link_latency=float(doc["link_latency"]),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def unbounded(self) -> DeviceConfig:
        """Same links, memory large enough for anything."""
        return replace(self, capacity=UNBOUNDED_BYTES, host_capacity=UNBOUNDED_BYTES)


UNBOUNDED_BYTES = 1 << 62

# Reference links: NVLink 2.0-class vs PCIe gen3-class CPU<->GPU, 16 GB device, 1 TB host.
NVLINK2 = DeviceConfig(16 * 2**30, 2**40, 75e9, 75e9, 5e-6)
PCIE3 = DeviceConfig(16 * 2**30, 2**40, 16e9, 16e9, 5e-6)
UNBOUNDED = DeviceConfig(UNBOUNDED_BYTES, UNBOUNDED_BYTES, 1e12, 1e12, 0.0)


@dataclass(frozen=True, eq=False)
class Value:
    tensor_id: str
    payload: np.ndarray

    def same_bits(self, other: Value) -> bool:
        a = np.ascontiguousarray(self.payload, dtype=np.float64)
        b = np.ascontiguousarray(other.payload, dtype=np.float64)
        return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class TraceEvent:
    op_id: str
    kind: str
    t_start: float
    t_end: float
    bytes_moved: int
    device_mem_after: int


@dataclass(frozen=True)
class ExecTrace:
    events: tuple[TraceEvent, ...]
    peak_device_bytes: int
    peak_host_bytes: int
    makespan: float

    def compute_durations(self) -> dict[str, float]:
        return {e.op_id: e.t_end - e.t_start for e in self.events if e.kind == OpKind.COMPUTE.value}


def _transfer_time(nbytes: int, bandwidth: float, latency: float) -> float:
    return latency + nbytes / bandwidth


def simulate(
    graph: Graph,
    cfg: DeviceConfig,
    *,
    check_capacity: bool = True,
    order: Sequence[str] | None = None,
) -> ExecTrace:
    """Memory and timing trace without evaluating payloads."""
    validate(graph)
    order = list(order) if order is not None else topo_order(graph)
    life = liveness(graph, order)
    frees: list[list[str]] = [[] for _ in order]
    for tid, lt in life.items():
        frees[lt.last_step].append(tid)

    dev = host = peak_dev = peak_host = 0
    compute_free = h2d_free = d2h_free = host_free = 0.0
    prev_start = 0.0
    end: dict[str, float] = {}
    events = []
    for step, op_id in enumerate(order):
        o = graph.op[op_id]
        out_bytes = sum(graph.tensor[t].nbytes for t in o.outputs)
        if o.placement.on_host:
            host += out_bytes
            if check_capacity and host > cfg.host_capacity:
                raise HostOOM(op_id, host, cfg.host_capacity)
        else:
            dev += out_bytes
            if check_capacity and dev > cfg.capacity:
                raise DeviceOOM(op_id, dev, cfg.capacity)
        peak_dev, peak_host = max(peak_dev, dev), max(peak_host, host)
        for tid in frees[step]:
            if graph.on_device(tid):
                dev -= graph.tensor[tid].nbytes
            else:
                host -= graph.tensor[tid].nbytes

        ready = max((end[p] for p in graph.predecessors(op_id)), default=0.0)
        start = max(ready, prev_start)
        moved = 0
        if o.kind is OpKind.SWAP_OUT:
            moved = graph.tensor[o.inputs[0]].nbytes
            start = max(start, d2h_free)
            finish = d2h_free = start + _transfer_time(moved, cfg.d2h_bandwidth, cfg.link_latency)
        elif o.kind is OpKind.SWAP_IN:
            moved = graph.tensor[o.inputs[0]].nbytes
            start = max(start, h2d_free)
            finish = h2d_free = start + _transfer_time(moved, cfg.h2d_bandwidth, cfg.link_latency)
        elif o.kind is OpKind.COMPUTE and o.placement.on_host:
            start = max(start, host_free)
            finish = host_free = start + o.compute_cost
        elif o.kind is OpKind.COMPUTE:
            start = max(start, compute_free)
            finish = compute_free = start + o.compute_cost
        else:
            finish = start
        end[op_id] = finish
        prev_start = start
        events.append(TraceEvent(op_id, o.kind.value, start, finish, moved, dev))

    makespan = max((e.t_end for e in events), default=0.0)
    return ExecTrace(tuple(events), peak_dev, peak_host, makespan)


def peak_device_bytes(graph: Graph, order: Sequence[str] | None = None) -> int:
    return simulate(graph, UNBOUNDED, check_capacity=False, order=order).peak_device_bytes


def _fit(x: np.ndarray, n: int) -> np.ndarray:
    """Cyclically repeat or truncate ``x`` to length ``n``; may return ``x`` itself."""
    if n == 0:
        return np.zeros(0)
    if x.size == 0:
        return np.zeros(n)
    if x.size >= n:
        return x[:n]
    out = np.empty(n)
    out[: x.size] = x
    filled = x.size
    while filled < n:  # doubling copies: log2(n / size) block moves
        step = min(filled, n - filled)
        out[filled : filled + step] = out[:step]
        filled += step
    return out


def _apply(o: OpNode, args: list[np.ndarray], n: int) -> np.ndarray:
    # values are never written after creation, so results may share memory with inputs
    if not args:
        return np.zeros(n)
    if o.kind in (OpKind.SWAP_OUT, OpKind.SWAP_IN) or o.fn == "identity":
        return _fit(args[0], n)
    if o.fn == "add":
        acc = np.array(_fit(args[0], n))
        for a in args[1:]:
            acc += _fit(a, n)
        return acc
    if o.fn == "sum":
        total = 0.0
        for a in args:
            total += float(np.sum(a))
        return np.full(n, total)
    if o.fn.startswith("scale:"):
        factor = float(o.fn.split(":", 1)[1])
        return factor * _fit(args[0], n)
    raise ExecutionError(f"op {o.id!r}: unsupported fn {o.fn!r}")


def evaluate(graph: Graph, inputs: Mapping[str, object], order: Sequence[str] | None = None) -> dict[str, Value]:
    """Payload semantics only; returns the values reaching Sink ops, keyed by tensor id."""
    order = list(order) if order is not None else topo_order(graph)
    vals: dict[str, np.ndarray] = {}
    for o in graph.sources():
        for tid in o.outputs:
            if tid not in inputs:
                raise MissingInput(tid)
            raw = inputs[tid]
            arr = np.array(raw.payload if isinstance(raw, Value) else raw, dtype=np.float64).ravel()
            if arr.size != graph.tensor[tid].n_elems:
                raise MissingInput(tid, f"has {arr.size} elements, expected {graph.tensor[tid].n_elems}")
            vals[tid] = arr
    result: dict[str, Value] = {}
    for op_id in order:
        o = graph.op[op_id]
        if o.kind is OpKind.SOURCE:
            continue
        args = [vals[t] for t in o.inputs]
        if o.kind is OpKind.SINK:
            for t in o.inputs:
                result[t] = Value(t, vals[t].copy())
            continue
        for t in o.outputs:
            vals[t] = _apply(o, args, graph.tensor[t].n_elems)
    return result


def execute(
    graph: Graph, cfg: DeviceConfig, inputs: Mapping[str, object]
) -> tuple[dict[str, Value], ExecTrace]:
    """Run ``graph`` under ``cfg``; raises DeviceOOM/HostOOM before touching payloads."""
    order = topo_order(graph)
    trace = simulate(graph, cfg, order=order)
    return evaluate(graph, inputs, order), trace


def same_outputs(a: Mapping[str, Value], b: Mapping[str, Value]) -> bool:
    return a.keys() == b.keys() and all(a[k].same_bits(b[k]) for k in a)


def shared_bus(cfg: DeviceConfig, n_sharers: int) -> DeviceConfig:
    """Contention model: ``n_sharers`` devices split one host link evenly."""
    if n_sharers < 1:
        raise ValueError("n_sharers must be >= 1")
    return replace(cfg, h2d_bandwidth=cfg.h2d_bandwidth / n_sharers, d2h_bandwidth=cfg.d2h_bandwidth / n_sharers)


def compare_links(
    graph: Graph,
    fast: DeviceConfig,
    slow: DeviceConfig,
    inputs: Mapping[str, object] | None = None,
) -> float:
    """makespan(slow) / makespan(fast); 1.0 when nothing takes time."""
    if inputs is not None:
        _, t_fast = execute(graph, fast, inputs)
        _, t_slow = execute(graph, slow, inputs)
    else:
        t_fast, t_slow = simulate(graph, fast), simulate(graph, slow)
    d_fast, d_slow = t_fast.compute_durations(), t_slow.compute_durations()
    # durations come from different start offsets, so allow last-bit rounding
    if d_fast.keys() != d_slow.keys() or not all(
        math.isclose(d_fast[k], d_slow[k], rel_tol=1e-9, abs_tol=1e-15) for k in d_fast
    ):
        raise ExecutionError("compute durations differ between link configurations")
    if t_fast.makespan == 0:
        return 1.0
    return t_slow.makespan / t_fast.makespan


TRACE_FIELDS = ("op_id", "kind", "t_start", "t_end", "bytes_moved", "device_mem_after")


def _fmt_time(t: float) -> str:
    return f"{t:.12f}"


def trace_to_csv(trace: ExecTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for e in trace.events:
        w.writerow([e.op_id, e.kind, _fmt_time(e.t_start), _fmt_time(e.t_end), e.bytes_moved, e.device_mem_after])
    return buf.getvalue()


def trace_summary(trace: ExecTrace) -> dict:
    return {
        "peak_device_bytes": trace.peak_device_bytes,
        "peak_host_bytes": trace.peak_host_bytes,
        "makespan": trace.makespan,
    }


def trace_to_json(trace: ExecTrace) -> str:
    doc = {
        "events": [asdict(e) for e in trace.events],
        "summary": trace_summary(trace),
    }
    return json.dumps(doc, indent=2) + "\n"

"""Static swap planning: pick long-lived device tensors and reroute their
distant consumers through host memory.

Inserted swap ops get ids starting with ``!``. That character sorts ahead of
every ordinary id, so under the lexicographic tie-break a swap-out runs right
after its producer and a swap-in right after its trigger op, leaving the
relative order of the original ops untouched.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from .executor import evaluate, peak_device_bytes, same_outputs
from .graph import (
    HOST,
    Graph,
    GraphError,
    OpKind,
    OpNode,
    TensorSpec,
    liveness,
    topo_order,
    validate,
)

SWAP_PREFIX = "!"


class PlanError(GraphError):
    pass


class PlanTargetMissing(PlanError):
    pass


class WouldCreateCycle(PlanError):
    pass


class CannotFit(RuntimeError):
    def __init__(self, capacity: int, peak: int, reason: str = ""):
        msg = f"cannot fit into {capacity} bytes (best peak {peak})"
        super().__init__(f"{msg}: {reason}" if reason else msg)
        self.capacity, self.peak = capacity, peak


@dataclass(frozen=True)
class SwapCandidate:
    tensor_id: str
    nbytes: int
    producer_step: int
    distant_consumers: tuple[tuple[str, int], ...]
    span: int

    @property
    def priority(self) -> int:
        return self.nbytes * self.span


@dataclass(frozen=True)
class SwapEntry:
    tensor: str
    consumer: str
    prefetch_distance: int = 0


@dataclass(frozen=True)
class SwapPlan:
    entries: tuple[SwapEntry, ...] = ()
    threshold: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        pairs = [(e.tensor, e.consumer) for e in self.entries]
        if len(set(pairs)) != len(pairs):
            raise PlanError("duplicate (tensor, consumer) entry in plan")
        if self.threshold < 1:
            raise PlanError("threshold must be >= 1")
        for e in self.entries:
            if e.prefetch_distance < 0:
                raise PlanError("prefetch_distance must be non-negative")

    @property
    def tensors(self) -> list[str]:
        return list(dict.fromkeys(e.tensor for e in self.entries))

    def to_json(self) -> str:
        doc = [
            {"tensor": e.tensor, "consumer": e.consumer, "prefetch_distance": e.prefetch_distance}
            for e in self.entries
        ]
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, threshold: int = 1) -> SwapPlan:
        doc = json.loads(text)
        if not isinstance(doc, list):
            raise PlanError("plan must be a JSON array")
        entries = []
        for item in doc:
            if set(item) != {"tensor", "consumer", "prefetch_distance"}:
                raise PlanError(f"bad plan entry keys {sorted(item)}")
            entries.append(SwapEntry(item["tensor"], item["consumer"], int(item["prefetch_distance"])))
        return cls(tuple(entries), threshold)


def _swappable_consumer(graph: Graph, op_id: str) -> bool:
    o = graph.op[op_id]
    return o.kind is OpKind.COMPUTE and not o.placement.on_host


def find_swap_candidates(graph: Graph, order: Sequence[str], threshold: int) -> list[SwapCandidate]:
    """Device tensors with a device-compute consumer more than ``threshold`` steps after the producer."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    life = liveness(graph, order)
    pos = {op_id: i for i, op_id in enumerate(order)}
    found = []
    for t in graph.tensors:
        if not graph.on_device(t.id):
            continue
        first = life[t.id].first_step
        distant = sorted(
            ((c, pos[c]) for c in graph.consumers[t.id] if pos[c] - first > threshold and _swappable_consumer(graph, c)),
            key=lambda item: item[1],
        )
        if distant:
            span = life[t.id].last_step - first
            found.append(SwapCandidate(t.id, t.nbytes, first, tuple(distant), span))
    found.sort(key=lambda c: (-c.nbytes, c.tensor_id))
    return found


def swap_out_id(tensor_id: str) -> str:
    return f"{SWAP_PREFIX}swap_out/{tensor_id}"


def swap_in_id(tensor_id: str, consumer: str) -> str:
    return f"{SWAP_PREFIX}swap_in/{tensor_id}/{consumer}"


def insert_swaps(graph: Graph, plan: SwapPlan) -> Graph:
    """Rewrite ``graph`` so each planned consumer reads a swapped-in copy.

    One swap-out per tensor (shared by all its planned consumers), one swap-in
    per planned consumer. The swap-in is held back by a control edge from the
    op ``prefetch_distance + 1`` steps before the consumer.
    """
    if not plan.entries:
        return graph
    validate(graph)
    order = topo_order(graph)
    pos = {op_id: i for i, op_id in enumerate(order)}

    by_tensor: dict[str, list[SwapEntry]] = defaultdict(list)
    for e in plan.entries:
        if e.tensor not in graph.tensor:
            raise PlanTargetMissing(f"tensor {e.tensor!r} not in graph")
        if e.consumer not in graph.op or e.consumer not in graph.consumers[e.tensor]:
            raise PlanTargetMissing(f"{e.consumer!r} does not consume {e.tensor!r}")
        if not _swappable_consumer(graph, e.consumer):
            raise PlanTargetMissing(f"{e.consumer!r} is not a device compute op")
        if not graph.on_device(e.tensor):
            raise PlanTargetMissing(f"tensor {e.tensor!r} is not device resident")
        distance = pos[e.consumer] - pos[graph.producer[e.tensor]]
        if e.prefetch_distance >= distance:
            raise WouldCreateCycle(
                f"prefetch_distance {e.prefetch_distance} reaches past the producer of {e.tensor!r}"
            )
        by_tensor[e.tensor].append(e)

    new_tensors = list(graph.tensors)
    new_ops: list[OpNode] = []
    remap: dict[str, dict[str, str]] = defaultdict(dict)  # consumer -> {old tensor: new tensor}
    for tid, entries in by_tensor.items():
        spec = graph.tensor[tid]
        device = graph.op[graph.producer[tid]].placement
        host_copy = f"{tid}:host"
        new_tensors.append(TensorSpec(host_copy, spec.nbytes, spec.dtype_width))
        new_ops.append(OpNode(swap_out_id(tid), OpKind.SWAP_OUT, (tid,), (host_copy,), HOST))
        for e in entries:
            fresh = f"{tid}:in:{e.consumer}"
            new_tensors.append(TensorSpec(fresh, spec.nbytes, spec.dtype_width))
            trigger = order[pos[e.consumer] - 1 - e.prefetch_distance]
            new_ops.append(
                OpNode(swap_in_id(tid, e.consumer), OpKind.SWAP_IN, (host_copy,), (fresh,), device,
                       control_deps=frozenset({trigger}))
            )
            remap[e.consumer][tid] = fresh

    taken = set(graph.op) | {t.id for t in graph.tensors}
    clashes = ({o.id for o in new_ops} | {t.id for t in new_tensors[len(graph.tensors):]}) & taken
    if clashes:
        raise PlanError(f"generated ids already in use: {sorted(clashes)}")

    ops = []
    for o in graph.ops:
        if o.id in remap:
            m = remap[o.id]
            o = OpNode(o.id, o.kind, tuple(m.get(t, t) for t in o.inputs), o.outputs, o.placement,
                       o.compute_cost, o.control_deps, o.fn)
        ops.append(o)
    rewritten = Graph(tuple(ops + new_ops), tuple(new_tensors))
    validate(rewritten)
    return rewritten


def plan_entries(candidate: SwapCandidate, prefetch_distance: int = 0) -> list[SwapEntry]:
    """Entries for every distant consumer, clamping prefetch so the trigger stays after the producer."""
    return [
        SwapEntry(candidate.tensor_id, c, min(prefetch_distance, step - candidate.producer_step - 1))
        for c, step in candidate.distant_consumers
    ]


def max_working_set(graph: Graph) -> int:
    """Largest device footprint any single op needs at once (its device inputs plus outputs)."""
    best = 0
    for o in graph.ops:
        if o.placement.on_host:
            continue
        ins = sum(graph.tensor[t].nbytes for t in dict.fromkeys(o.inputs) if graph.on_device(t))
        outs = sum(graph.tensor[t].nbytes for t in o.outputs)
        best = max(best, ins + outs)
    return best


def plan_for_capacity(
    graph: Graph,
    capacity: int,
    threshold: int = 1,
    prefetch_distance: int = 0,
) -> SwapPlan:
    """Greedy: swap the candidate with the largest nbytes*span until the peak fits."""
    validate(graph)
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    ws = max_working_set(graph)
    if ws > capacity:
        raise CannotFit(capacity, ws, "a single op's working set exceeds capacity")
    order = topo_order(graph)
    plan = SwapPlan((), threshold)
    peak = peak_device_bytes(graph, order)
    if peak <= capacity:
        return plan
    queue = sorted(find_swap_candidates(graph, order, threshold), key=lambda c: (-c.priority, c.tensor_id))
    entries: list[SwapEntry] = []
    for cand in queue:
        entries.extend(plan_entries(cand, prefetch_distance))
        plan = SwapPlan(tuple(entries), threshold)
        peak = peak_device_bytes(insert_swaps(graph, plan))
        if peak <= capacity:
            return plan
    raise CannotFit(capacity, peak, "all candidates swapped")


def verify_equivalence(original: Graph, rewritten: Graph, inputs: Mapping[str, Any]) -> bool:
    """True iff both graphs deliver bit-identical values to their sinks."""
    validate(original)
    validate(rewritten)
    return same_outputs(evaluate(original, inputs), evaluate(rewritten, inputs))


@dataclass(frozen=True)
class RewriteResult:
    graph: Graph
    plan: SwapPlan
    original_peak: int
    rewritten_peak: int
    nodes_added: int

    def summary(self) -> str:
        return (
            f"original peak {self.original_peak} B, rewritten peak {self.rewritten_peak} B, "
            f"nodes added {self.nodes_added}"
        )


def rewrite_for_capacity(
    graph: Graph, capacity: int, threshold: int = 1, prefetch_distance: int = 0
) -> RewriteResult:
    plan = plan_for_capacity(graph, capacity, threshold, prefetch_distance)
    rewritten = insert_swaps(graph, plan)
    return RewriteResult(
        rewritten, plan, peak_device_bytes(graph), peak_device_bytes(rewritten),
        len(rewritten.ops) - len(graph.ops),
    )


__all__ = [
    "CannotFit",
    "PlanError",
    "PlanTargetMissing",
    "RewriteResult",
    "SwapCandidate",
    "SwapEntry",
    "SwapPlan",
    "WouldCreateCycle",
    "find_swap_candidates",
    "insert_swaps",
    "max_working_set",
    "plan_for_capacity",
    "rewrite_for_capacity",
    "verify_equivalence",
]

"""Computation graph IR, deterministic ordering and tensor liveness.

Edges are implicit: an op depends on the producers of its input tensors and
on every op named in its ``control_deps``. Tensors carry only a byte count and
an element width; geometry is irrelevant to swapping decisions.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence


class GraphError(ValueError):
    """Base class for malformed graphs."""


class CycleDetected(GraphError):
    def __init__(self, op_id: str):
        super().__init__(f"cycle detected through op {op_id!r}")
        self.op_id = op_id


class DanglingTensor(GraphError):
    def __init__(self, tensor_id: str):
        super().__init__(f"dangling tensor {tensor_id!r}")
        self.tensor_id = tensor_id


class UnknownOp(GraphError):
    def __init__(self, op_id: str):
        super().__init__(f"unknown op {op_id!r}")
        self.op_id = op_id


class OrderMismatch(GraphError):
    pass


class GraphFormatError(GraphError):
    """Raised by the JSON loader; ``key`` names the offending field when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class OpKind(str, Enum):
    COMPUTE = "Compute"
    SWAP_OUT = "SwapOut"
    SWAP_IN = "SwapIn"
    SOURCE = "Source"
    SINK = "Sink"


@dataclass(frozen=True, order=True)
class Placement:
    """``device`` is the device index, or None for host memory."""

    device: int | None = 0

    @property
    def on_host(self) -> bool:
        return self.device is None

    @classmethod
    def parse(cls, text: str) -> Placement:
        if text == "host":
            return HOST
        if text.startswith("device:"):
            try:
                index = int(text.split(":", 1)[1])
            except ValueError:
                raise GraphFormatError(f"bad placement {text!r}", "placement") from None
            if index < 0:
                raise GraphFormatError(f"bad placement {text!r}", "placement")
            return cls(index)
        raise GraphFormatError(f"bad placement {text!r}", "placement")

    def __str__(self) -> str:
        return "host" if self.device is None else f"device:{self.device}"


HOST = Placement(None)
DEVICE0 = Placement(0)

COMPUTE_FNS = ("add", "identity", "sum")


def check_fn(fn: str) -> None:
    """Validate a Compute operator name: add, identity, sum or scale:<float>."""
    if fn in COMPUTE_FNS:
        return
    if fn.startswith("scale:"):
        try:
            float(fn.split(":", 1)[1])
            return
        except ValueError:
            pass
    raise GraphFormatError(f"unknown compute fn {fn!r}", "fn")


@dataclass(frozen=True)
class TensorSpec:
    id: str
    nbytes: int
    dtype_width: int = 4

    @property
    def n_elems(self) -> int:
        return self.nbytes // self.dtype_width


@dataclass(frozen=True)
class OpNode:
    id: str
    kind: OpKind
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    placement: Placement = DEVICE0
    compute_cost: float = 0.0
    control_deps: frozenset[str] = frozenset()
    fn: str = "add"

    def __post_init__(self) -> None:
        # accept lists/sets from callers; store immutable forms
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "control_deps", frozenset(self.control_deps))


@dataclass(frozen=True)
class Graph:
    ops: tuple[OpNode, ...]
    tensors: tuple[TensorSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(self.ops))
        object.__setattr__(self, "tensors", tuple(self.tensors))

    @cached_property
    def op(self) -> dict[str, OpNode]:
        return {o.id: o for o in self.ops}

    @cached_property
    def tensor(self) -> dict[str, TensorSpec]:
        return {t.id: t for t in self.tensors}

    @cached_property
    def producer(self) -> dict[str, str]:
        """tensor id -> producing op id."""
        return {t: o.id for o in self.ops for t in o.outputs}

    @cached_property
    def consumers(self) -> dict[str, tuple[str, ...]]:
        """tensor id -> consuming op ids (one entry per op, in op declaration order)."""
        out: dict[str, list[str]] = {t.id: [] for t in self.tensors}
        for o in self.ops:
            for t in dict.fromkeys(o.inputs):
                out.setdefault(t, []).append(o.id)
        return {k: tuple(v) for k, v in out.items()}

    def predecessors(self, op_id: str) -> set[str]:
        o = self.op[op_id]
        preds = {self.producer[t] for t in o.inputs if t in self.producer}
        return preds | set(o.control_deps)

    def on_device(self, tensor_id: str) -> bool:
        return not self.op[self.producer[tensor_id]].placement.on_host

    def sources(self) -> list[OpNode]:
        return [o for o in self.ops if o.kind is OpKind.SOURCE]

    def sinks(self) -> list[OpNode]:
        return [o for o in self.ops if o.kind is OpKind.SINK]


def _check_references(graph: Graph) -> None:
    seen_ops: set[str] = set()
    for o in graph.ops:
        if o.id in seen_ops:
            raise GraphError(f"duplicate op id {o.id!r}")
        seen_ops.add(o.id)
    seen_tensors: set[str] = set()
    for t in graph.tensors:
        if t.id in seen_tensors:
            raise GraphError(f"duplicate tensor id {t.id!r}")
        seen_tensors.add(t.id)
        if t.nbytes < 0 or t.dtype_width <= 0 or t.nbytes % t.dtype_width:
            raise GraphError(f"tensor {t.id!r}: nbytes must be a non-negative multiple of dtype_width")

    produced: set[str] = set()
    for o in graph.ops:
        for t in o.outputs:
            if t not in seen_tensors:
                raise DanglingTensor(t)
            if t in produced:
                raise GraphError(f"tensor {t!r} has more than one producer")
            produced.add(t)
        for t in o.inputs:
            if t not in seen_tensors:
                raise DanglingTensor(t)
        for d in sorted(o.control_deps):
            if d not in seen_ops:
                raise UnknownOp(d)
        if o.compute_cost < 0:
            raise GraphError(f"op {o.id!r}: negative compute_cost")
    for t in sorted(seen_tensors - produced):
        raise DanglingTensor(t)


def _check_kinds(graph: Graph) -> None:
    for o in graph.ops:
        if o.kind is OpKind.SOURCE and o.inputs:
            raise GraphError(f"Source {o.id!r} has inputs")
        if o.kind is OpKind.SINK and o.outputs:
            raise GraphError(f"Sink {o.id!r} has outputs")
        if o.kind in (OpKind.SWAP_OUT, OpKind.SWAP_IN):
            if len(o.inputs) != 1 or len(o.outputs) != 1:
                raise GraphError(f"{o.kind.value} {o.id!r} needs exactly one input and one output")
            src, dst = (graph.tensor[o.inputs[0]], graph.tensor[o.outputs[0]])
            if src.nbytes != dst.nbytes:
                raise GraphError(f"{o.kind.value} {o.id!r} changes tensor size")
            wants_host = o.kind is OpKind.SWAP_OUT
            if o.placement.on_host is not wants_host:
                raise GraphError(f"{o.kind.value} {o.id!r} has wrong placement {o.placement}")
            if graph.on_device(o.inputs[0]) is not wants_host:
                raise GraphError(f"{o.kind.value} {o.id!r} reads a tensor from the wrong memory")
        if o.kind is OpKind.COMPUTE:
            check_fn(o.fn)
            if not o.placement.on_host:
                for t in o.inputs:
                    if not graph.on_device(t):
                        raise GraphError(f"device op {o.id!r} reads host tensor {t!r}")


def find_cycle_op(graph: Graph) -> str | None:
    """Iterative DFS; returns an op id lying on a cycle, or None."""
    succ: dict[str, list[str]] = {o.id: [] for o in graph.ops}
    for o in graph.ops:
        for p in graph.predecessors(o.id):
            if p in succ:
                succ[p].append(o.id)
    color = dict.fromkeys(succ, 0)  # 0 new, 1 on stack, 2 done
    for root in sorted(succ):
        if color[root]:
            continue
        stack = [(root, iter(sorted(succ[root])))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
            elif color[nxt] == 1:
                return nxt
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(sorted(succ[nxt]))))
    return None


def validate(graph: Graph) -> None:
    """Raise a GraphError subclass unless every structural invariant holds."""
    _check_references(graph)
    _check_kinds(graph)
    bad = find_cycle_op(graph)
    if bad is not None:
        raise CycleDetected(bad)


def topo_order(graph: Graph) -> list[str]:
    """Kahn's algorithm; ready ops leave the queue in lexicographic id order."""
    indeg = {o.id: 0 for o in graph.ops}
    succ: dict[str, list[str]] = {o.id: [] for o in graph.ops}
    for o in graph.ops:
        for p in graph.predecessors(o.id):
            succ[p].append(o.id)
            indeg[o.id] += 1
    ready = [k for k, v in indeg.items() if v == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        cur = heapq.heappop(ready)
        order.append(cur)
        for nxt in succ[cur]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(indeg):
        raise CycleDetected(find_cycle_op(graph) or min(k for k, v in indeg.items() if v))
    return order


@dataclass(frozen=True)
class Lifetime:
    first_step: int
    last_step: int


LivenessTable = Mapping[str, Lifetime]


def liveness(graph: Graph, order: Sequence[str]) -> dict[str, Lifetime]:
    """Step interval per tensor: producer position to last consumer position."""
    if len(order) != len(graph.ops) or set(order) != set(graph.op):
        raise OrderMismatch("order must list every op exactly once")
    pos = {op_id: i for i, op_id in enumerate(order)}
    table: dict[str, Lifetime] = {}
    for t in graph.tensors:
        first = pos[graph.producer[t.id]]
        last = max((pos[c] for c in graph.consumers[t.id]), default=first)
        table[t.id] = Lifetime(first, max(first, last))
    return table


# --- JSON ------------------------------------------------------------------

_OP_KEYS = ("id", "kind", "inputs", "outputs", "placement", "compute_cost", "control_deps")
_OPTIONAL_OP_KEYS = ("fn",)
_TENSOR_KEYS = ("id", "nbytes", "dtype_width")


def _check_keys(obj: Any, required: Iterable[str], optional: Iterable[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise GraphFormatError(f"{where}: expected an object")
    allowed = set(required) | set(optional)
    for k in obj:
        if k not in allowed:
            raise GraphFormatError(f"{where}: unknown key {k!r}", k)
    for k in required:
        if k not in obj:
            raise GraphFormatError(f"{where}: missing key {k!r}", k)


def graph_from_dict(doc: Any) -> Graph:
    _check_keys(doc, ("ops", "tensors"), (), "graph")
    tensors = []
    for i, t in enumerate(doc["tensors"]):
        _check_keys(t, _TENSOR_KEYS, (), f"tensors[{i}]")
        if not isinstance(t["nbytes"], int) or not isinstance(t["dtype_width"], int):
            raise GraphFormatError(f"tensors[{i}]: nbytes and dtype_width must be integers", "nbytes")
        tensors.append(TensorSpec(str(t["id"]), t["nbytes"], t["dtype_width"]))
    ops = []
    for i, o in enumerate(doc["ops"]):
        _check_keys(o, _OP_KEYS, _OPTIONAL_OP_KEYS, f"ops[{i}]")
        try:
            kind = OpKind(o["kind"])
        except ValueError:
            raise GraphFormatError(f"ops[{i}]: bad kind {o['kind']!r}", "kind") from None
        ops.append(
            OpNode(
                id=str(o["id"]),
                kind=kind,
                inputs=tuple(o["inputs"]),
                outputs=tuple(o["outputs"]),
                placement=Placement.parse(o["placement"]),
                compute_cost=float(o["compute_cost"]),
                control_deps=frozenset(o["control_deps"]),
                fn=o.get("fn", "add"),
            )
        )
    graph = Graph(tuple(ops), tuple(tensors))
    validate(graph)
    return graph


def graph_to_dict(graph: Graph) -> dict[str, Any]:
    ops = []
    for o in graph.ops:
        entry: dict[str, Any] = {
            "id": o.id,
            "kind": o.kind.value,
            "inputs": list(o.inputs),
            "outputs": list(o.outputs),
            "placement": str(o.placement),
            "compute_cost": o.compute_cost,
            "control_deps": sorted(o.control_deps),
        }
        if o.kind is OpKind.COMPUTE and o.fn != "add":
            entry["fn"] = o.fn
        ops.append(entry)
    tensors = [{"id": t.id, "nbytes": t.nbytes, "dtype_width": t.dtype_width} for t in graph.tensors]
    return {"ops": ops, "tensors": tensors}


def loads(text: str) -> Graph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc}") from exc
    return graph_from_dict(doc)


def dumps(graph: Graph) -> str:
    return json.dumps(graph_to_dict(graph), indent=2) + "\n"


@dataclass
class GraphBuilder:
    """Small helper for assembling graphs in code and tests."""

    ops: list[OpNode] = field(default_factory=list)
    tensors: list[TensorSpec] = field(default_factory=list)
    dtype_width: int = 4

    def tensor(self, tid: str, nbytes: int, dtype_width: int | None = None) -> str:
        self.tensors.append(TensorSpec(tid, nbytes, dtype_width or self.dtype_width))
        return tid

    def source(self, op_id: str, *outputs: tuple[str, int], placement: Placement = DEVICE0) -> OpNode:
        for tid, nbytes in outputs:
            self.tensor(tid, nbytes)
        node = OpNode(op_id, OpKind.SOURCE, (), tuple(t for t, _ in outputs), placement)
        self.ops.append(node)
        return node

    def compute(
        self,
        op_id: str,
        inputs: Sequence[str],
        outputs: Sequence[tuple[str, int]],
        cost: float = 0.0,
        fn: str = "add",
        control_deps: Iterable[str] = (),
    ) -> OpNode:
        for tid, nbytes in outputs:
            self.tensor(tid, nbytes)
        node = OpNode(
            op_id, OpKind.COMPUTE, tuple(inputs), tuple(t for t, _ in outputs), DEVICE0, cost,
            frozenset(control_deps), fn,
        )
        self.ops.append(node)
        return node

    def sink(self, op_id: str, *inputs: str) -> OpNode:
        node = OpNode(op_id, OpKind.SINK, tuple(inputs), ())
        self.ops.append(node)
        return node

    def build(self, check: bool = True) -> Graph:
        graph = Graph(tuple(self.ops), tuple(self.tensors))
        if check:
            validate(graph)
        return graph

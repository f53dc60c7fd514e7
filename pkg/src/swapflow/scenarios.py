"""Graph generators: random DAGs for property tests, and a U-shaped training
step whose forward activations stay live until the backward sweep reaches
them, the shape that makes host swapping pay off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .graph import Graph, GraphBuilder, OpKind

MAX_RANDOM_BYTES = 10 * 1000 * 1000


def _round_bytes(x: float, width: int = 4) -> int:
    return max(width, int(round(x / width)) * width)


def random_dag(rng: np.random.Generator, max_ops: int = 40, max_bytes: int = MAX_RANDOM_BYTES) -> Graph:
    """Random well-formed graph with at most ``max_ops`` ops (sinks included).

    Tensor sizes are log-uniform between 4 bytes and ``max_bytes``. Every op
    reads one to three earlier tensors, biased towards recent ones so chains
    with a few long skip edges dominate.
    """
    if max_ops < 3:
        raise ValueError("max_ops must be >= 3")
    b = GraphBuilder()
    n_ops = int(rng.integers(3, max_ops + 1))
    n_sources = int(rng.integers(1, min(3, n_ops - 2) + 1))
    n_compute = n_ops - n_sources - 1  # one sink collects the loose ends
    lo, hi = math.log(4), math.log(max_bytes)

    def size() -> int:
        return _round_bytes(math.exp(rng.uniform(lo, hi)))

    live: list[str] = []
    for s in range(n_sources):
        tid = f"t_src{s}"
        b.source(f"src{s}", (tid, size()))
        live.append(tid)
    consumed: set[str] = set()
    fns = ["add", "add", "identity", "sum", "scale:0.5", "scale:-3"]
    for k in range(n_compute):
        n_in = int(rng.integers(1, min(3, len(live)) + 1))
        # recent tensors are likelier, but any earlier one can be picked
        weights = np.arange(1, len(live) + 1, dtype=float) ** 2
        picks = rng.choice(len(live), size=n_in, replace=False, p=weights / weights.sum())
        ins = [live[i] for i in sorted(picks)]
        fn = fns[int(rng.integers(len(fns)))]
        tid = f"t{k:02d}"
        out_bytes = 4 if fn == "sum" else size()
        b.compute(f"op{k:02d}", ins, [(tid, out_bytes)], float(rng.uniform(0, 1e-3)), fn=fn)
        consumed.update(ins)
        live.append(tid)
    loose = [t for t in live if t not in consumed]
    b.sink("sink", *loose)
    return b.build()


def random_inputs(graph: Graph, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Integer-valued payloads for every Source tensor."""
    out = {}
    for o in graph.ops:
        if o.kind is OpKind.SOURCE:
            for tid in o.outputs:
                n = graph.tensor[tid].n_elems
                out[tid] = rng.integers(-8, 9, size=n).astype(np.float64)
    return out


@dataclass(frozen=True)
class UNetSpec:
    """Training step of a U-shaped network: a forward chain whose saved
    activations are consumed again, in reverse, by the backward chain.

    Layer ``i`` sits at depth ``min(i, layers - 1 - i)``. Its activation holds
    ``base_bytes / shrink**depth`` bytes and its forward op costs
    ``base_cost / cost_shrink**depth`` seconds (backward costs twice that).
    ``scale`` multiplies both, standing in for growth of the input volume.
    """

    layers: int = 12
    base_bytes: int = 4 << 20
    base_cost: float = 1e-4
    shrink: float = 2.0
    cost_shrink: float = 1.0
    scale: float = 1.0

    def depth(self, layer: int) -> int:
        return min(layer, self.layers - 1 - layer)

    def nbytes(self, layer: int) -> int:
        return _round_bytes(self.scale * self.base_bytes / self.shrink ** self.depth(layer))

    def cost(self, layer: int) -> float:
        return self.scale * self.base_cost / self.cost_shrink ** self.depth(layer)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "unet", "layers": self.layers, "base_bytes": self.base_bytes, "base_cost": self.base_cost,
                "shrink": self.shrink, "cost_shrink": self.cost_shrink, "scale": self.scale}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> UNetSpec:
        keys = {"kind", "layers", "base_bytes", "base_cost", "shrink", "cost_shrink", "scale"}
        extra = set(doc) - keys
        if extra:
            raise ValueError(f"unknown generator key {sorted(extra)[0]!r}")
        if doc.get("kind", "unet") != "unet":
            raise ValueError(f"unknown generator kind {doc['kind']!r}")
        return cls(**{k: v for k, v in doc.items() if k != "kind"})


def unet(spec: UNetSpec = UNetSpec()) -> Graph:
    """Forward ops ``f{i}`` produce activations ``act{i}``; backward ops
    ``m{k}_g{i}`` combine the incoming gradient with ``act{i}`` into ``grad{i}``."""
    if spec.layers < 2:
        raise ValueError("layers must be >= 2")
    n = spec.layers
    b = GraphBuilder()
    b.source("a_input", ("x", spec.nbytes(0)))
    prev = "x"
    for i in range(n):
        b.compute(f"f{i:03d}", [prev], [(f"act{i:03d}", spec.nbytes(i))], spec.cost(i), fn="scale:0.5")
        prev = f"act{i:03d}"
    b.compute("l_loss", [prev], [("dloss", spec.nbytes(n - 1))], spec.cost(n - 1) / 4, fn="identity")
    prev = "dloss"
    for i in reversed(range(n)):
        # backward ids count down from the top so they sort in execution order
        b.compute(f"m{n - 1 - i:03d}_g{i:03d}", [prev, f"act{i:03d}"], [(f"grad{i:03d}", spec.nbytes(i))],
                  2 * spec.cost(i))
        prev = f"grad{i:03d}"
    b.compute("z_reduce", [prev], [("z_out", 4)], spec.cost(0) / 8, fn="sum")
    b.sink("zz_sink", "z_out")
    return b.build()

"""Deterministic simulation of host/device tensor swapping and
topology-aware all-reduce, composed into data-parallel training."""

from .collectives import build_schedule, hierarchical_allreduce, ring_allreduce, sweep_sizes
from .executor import DeviceConfig, DeviceOOM, ExecTrace, compare_links, execute, shared_bus, simulate
from .graph import Graph, GraphBuilder, OpKind, OpNode, TensorSpec, liveness, topo_order, validate
from .metrics import efficiency, overhead_pct, resolution_ratio, scaling_table, speedup
from .planner import CannotFit, SwapPlan, find_swap_candidates, insert_swaps, plan_for_capacity, verify_equivalence
from .topology import Topology, parse_topology, tier_between
from .trainer import ToyModel, TrainConfig, partition, scaling_run, train

__version__ = "0.1.0"

__all__ = [
    "CannotFit", "DeviceConfig", "DeviceOOM", "ExecTrace", "Graph", "GraphBuilder", "OpKind", "OpNode",
    "SwapPlan", "TensorSpec", "Topology", "ToyModel", "TrainConfig",
    "build_schedule", "compare_links", "efficiency", "execute", "find_swap_candidates", "hierarchical_allreduce",
    "insert_swaps", "liveness", "overhead_pct", "parse_topology", "partition", "plan_for_capacity",
    "resolution_ratio", "ring_allreduce", "scaling_run", "scaling_table", "shared_bus", "simulate", "speedup",
    "sweep_sizes", "tier_between", "topo_order", "train", "validate", "verify_equivalence",
]

"""Command-line front end: rewrite, run, allreduce-bench, train.

Exit codes: 0 success, 1 usage or parse error, 2 capacity/OOM,
3 invariant violation (replica divergence).
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import graph as graph_mod
from .collectives import log2_sizes, sweep_csv, sweep_sizes
from .executor import (
    DeviceConfig,
    DeviceOOM,
    ExecutionError,
    HostOOM,
    compare_links,
    execute,
    shared_bus,
    trace_summary,
    trace_to_csv,
)
from .graph import GraphError
from .metrics import scaling_csv
from .planner import CannotFit, rewrite_for_capacity
from .scenarios import UNetSpec, random_dag, random_inputs, unet
from .topology import Topology, TopologyError, family, parse_topology
from .trainer import (
    LMSSettings,
    ReplicaDivergence,
    ToyModel,
    TrainConfig,
    TrainingError,
    scaling_run,
    synthetic_dataset,
)

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_INVARIANT = 0, 1, 2, 3
SEED_ENV = "SWAPFLOW_SEED"


class UsageError(Exception):
    """Bad flags or scenario contents; ``key`` names the offending field when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


# ---------------------------------------------------------------- scenarios

SCENARIO_KEYS = {"name", "graph", "generator", "device", "topology", "lms", "train", "seed", "outputs"}
LMS_KEYS = {"capacity", "threshold", "prefetch_distance", "micro_batches"}
TRAIN_KEYS = {"epochs", "lr", "ranks", "seed", "n_samples", "dim", "flop_rate", "gpus_per_node"}
OUTPUT_KEYS = {"trace", "summary", "epochs", "scaling", "weights"}
DEVICE_KEYS = {"capacity", "host_capacity", "h2d_bandwidth", "d2h_bandwidth", "link_latency"}

DEFAULT_OUTPUTS = {
    "trace": "trace.csv",
    "summary": "summary.json",
    "epochs": "epochs.jsonl",
    "scaling": "scaling.csv",
    "weights": "weights.json",
}


def _load_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None


def _check_keys(doc: Any, allowed: set[str], where: str, required: set[str] = frozenset()) -> None:
    if not isinstance(doc, dict):
        raise UsageError(f"{where} must be a JSON object")
    for k in sorted(doc):
        if k not in allowed:
            raise UsageError(f"{where}: unknown key {k!r}", k)
    for k in sorted(required):
        if k not in doc:
            raise UsageError(f"{where}: missing key {k!r}", k)


def load_device(doc_or_path: Any, base: Path) -> DeviceConfig:
    doc = _load_json(base / doc_or_path) if isinstance(doc_or_path, str) else doc_or_path
    _check_keys(doc, DEVICE_KEYS, "device", DEVICE_KEYS)
    try:
        return DeviceConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise UsageError(f"device: {e}") from None


def load_topology(doc_or_path: Any, base: Path) -> Topology:
    doc = _load_json(base / doc_or_path) if isinstance(doc_or_path, str) else doc_or_path
    return parse_topology(doc)


@dataclass
class Scenario:
    doc: dict[str, Any]
    base: Path

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        path = Path(path)
        doc = _load_json(path)
        _check_keys(doc, SCENARIO_KEYS, "scenario")
        if "graph" in doc and "generator" in doc:
            raise UsageError("scenario: give exactly one of 'graph' and 'generator'", "generator")
        for key, allowed in (("lms", LMS_KEYS), ("train", TRAIN_KEYS), ("outputs", OUTPUT_KEYS)):
            if key in doc:
                _check_keys(doc[key], allowed, key)
        return cls(doc, path.parent)

    @property
    def seed(self) -> int:
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}", SEED_ENV) from None
        return int(self.doc.get("train", {}).get("seed", self.doc.get("seed", 0)))

    def graph(self) -> graph_mod.Graph:
        if "graph" in self.doc:
            path = self.base / self.doc["graph"]
            try:
                return graph_mod.loads(path.read_text())
            except FileNotFoundError:
                raise UsageError(f"graph file not found: {path}", "graph") from None
        if "generator" in self.doc:
            gen = dict(self.doc["generator"])
            if gen.get("kind") == "random":
                _check_keys(gen, {"kind", "seed", "max_ops"}, "generator")
                rng = np.random.default_rng(int(gen.get("seed", self.seed)))
                return random_dag(rng, int(gen.get("max_ops", 40)))
            try:
                return unet(UNetSpec.from_dict(gen))
            except (TypeError, ValueError) as e:
                raise UsageError(f"generator: {e}", "generator") from None
        raise UsageError("scenario needs 'graph' or 'generator'", "graph")

    def device(self) -> DeviceConfig:
        if "device" not in self.doc:
            raise UsageError("scenario: missing key 'device'", "device")
        return load_device(self.doc["device"], self.base)

    def lms(self) -> LMSSettings | None:
        doc = self.doc.get("lms")
        if doc is None:
            return None
        if "capacity" not in doc:
            raise UsageError("lms: missing key 'capacity'", "capacity")
        return LMSSettings(
            int(doc["capacity"]),
            int(doc.get("threshold", 1)),
            int(doc.get("prefetch_distance", 0)),
            int(doc.get("micro_batches", 8)),
        )

    def output(self, key: str, out_dir: Path) -> Path:
        name = self.doc.get("outputs", {}).get(key, DEFAULT_OUTPUTS[key])
        return out_dir / name


# ---------------------------------------------------------------- commands


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_rewrite(args: argparse.Namespace) -> int:
    src = Path(args.graph)
    try:
        raw = src.read_text()
    except FileNotFoundError:
        raise UsageError(f"graph file not found: {src}") from None
    g = graph_mod.loads(raw)
    res = rewrite_for_capacity(g, args.capacity, args.threshold, args.prefetch)
    out_dir = Path(args.out_dir)
    graph_path = Path(args.out_graph) if args.out_graph else out_dir / f"{src.stem}.rewritten.json"
    plan_path = Path(args.out_plan) if args.out_plan else out_dir / f"{src.stem}.plan.json"
    # nothing to swap: hand back the input untouched, byte for byte
    _write(graph_path, raw if not res.plan.entries else graph_mod.dumps(res.graph))
    _write(plan_path, res.plan.to_json())
    print(res.summary())
    return EXIT_OK


def _configs_for_compare(args: argparse.Namespace) -> tuple[DeviceConfig, DeviceConfig] | None:
    if not args.compare:
        return None
    fast = load_device(args.compare[0], Path.cwd())
    slow = load_device(args.compare[1], Path.cwd())
    if args.shared_bus > 1:
        slow = shared_bus(slow, args.shared_bus)
    return fast, slow


def cmd_run(args: argparse.Namespace) -> int:
    sc = Scenario.load(args.scenario)
    g = sc.graph()
    cfg = sc.device()
    lms = sc.lms()
    summary: dict[str, Any] = {"ops": len(g.ops)}
    if lms is not None:
        res = rewrite_for_capacity(g, lms.capacity, lms.threshold, lms.prefetch_distance)
        summary.update(original_peak=res.original_peak, rewritten_peak=res.rewritten_peak,
                       nodes_added=res.nodes_added, swapped_tensors=len(res.plan.tensors))
        print(res.summary())
        g = res.graph
    inputs = random_inputs(g, np.random.default_rng(sc.seed))
    _, trace = execute(g, cfg, inputs)
    summary.update(trace_summary(trace))
    pair = _configs_for_compare(args)
    if pair is not None:
        ratio = compare_links(g, pair[0], pair[1])
        summary["slowdown"] = ratio
        print(f"slowdown {ratio:.4f}")
    out_dir = Path(args.out_dir)
    _write(sc.output("trace", out_dir), trace_to_csv(trace))
    _write(sc.output("summary", out_dir), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"peak_device_bytes {trace.peak_device_bytes} makespan {trace.makespan:.9f}")
    return EXIT_OK


_POW = re.compile(r"^\s*2\^(\d+)\s*$")


def parse_size(text: str) -> int:
    m = _POW.match(text)
    try:
        n = 1 << int(m.group(1)) if m else int(text)
    except ValueError:
        raise UsageError(f"bad size {text!r}", "sizes") from None
    if n < 1:
        raise UsageError(f"size must be >= 1, got {text!r}", "sizes")
    return n


def parse_sizes(text: str) -> list[int]:
    """Comma list of counts; ``2^k`` powers and ``a..b`` power-of-two ranges allowed."""
    sizes: list[int] = []
    for part in text.split(","):
        if ".." in part:
            lo, hi = (parse_size(x) for x in part.split("..", 1))
            sizes.extend(log2_sizes(lo, hi))
        else:
            sizes.append(parse_size(part))
    return sizes


def cmd_allreduce_bench(args: argparse.Namespace) -> int:
    t = load_topology(args.topology, Path.cwd())
    rows = sweep_sizes(t, parse_sizes(args.sizes), args.verify_limit)
    text = sweep_csv(rows)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _topology_family(sc: Scenario, per_node: int):
    if "topology" not in sc.doc:
        raise UsageError("scenario: missing key 'topology'", "topology")
    t = load_topology(sc.doc["topology"], sc.base)
    if len(t.tiers) != 2:
        raise UsageError("train needs a two-tier (intra, inter) topology", "topology")
    intra = (t.tiers[0].bandwidth, t.tiers[0].latency)
    inter = (t.tiers[1].bandwidth, t.tiers[1].latency)
    return lambda p: family(p, per_node, intra, inter)


def cmd_train(args: argparse.Namespace) -> int:
    sc = Scenario.load(args.scenario)
    tr = sc.doc.get("train")
    if tr is None:
        raise UsageError("scenario: missing key 'train'", "train")
    ranks = tr.get("ranks", [1])
    ranks = [int(r) for r in (ranks if isinstance(ranks, list) else [ranks])]
    per_node = int(tr.get("gpus_per_node", 4))
    data = synthetic_dataset(int(tr.get("n_samples", 1024)), int(tr.get("dim", 16)), sc.seed)
    model = ToyModel(np.zeros(int(tr.get("dim", 16))))
    device = sc.device() if "device" in sc.doc else TrainConfig().device
    try:
        config = TrainConfig(int(tr.get("epochs", 1)), float(tr.get("lr", 0.01)), float(tr.get("flop_rate", 1e9)),
                             device, sc.lms())
    except ValueError as e:
        raise UsageError(f"train: {e}", "train") from None
    rows, results = scaling_run(model, data, ranks, _topology_family(sc, per_node), config, per_node)
    final = results[ranks[0]].weights
    for p in ranks[1:]:
        if results[p].weights.tobytes() != final.tobytes():
            raise ReplicaDivergence(f"{p}-rank weights differ from the {ranks[0]}-rank run")
    out_dir = Path(args.out_dir)
    lines = [json.dumps(rep.to_dict(ranks=p)) for p in ranks for rep in results[p].reports]
    _write(sc.output("epochs", out_dir), "\n".join(lines) + "\n")
    _write(sc.output("scaling", out_dir), scaling_csv(rows))
    weights = {"weights": [float(w).hex() for w in final]}
    _write(sc.output("weights", out_dir), json.dumps(weights, indent=2) + "\n")
    sys.stdout.write(scaling_csv(rows))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swapflow", description="Tensor swapping and hierarchical all-reduce simulator.")
    p.add_argument("--json-errors", action="store_true", help="print errors as one JSON object on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    rw = sub.add_parser("rewrite", help="insert swap nodes so a graph fits a device capacity")
    rw.add_argument("graph")
    rw.add_argument("--capacity", type=int, required=True, help="device bytes")
    rw.add_argument("--threshold", type=int, default=1, help="min producer-consumer distance in steps")
    rw.add_argument("--prefetch", type=int, default=0, help="swap-in lead, in steps")
    rw.add_argument("--out-dir", default=".")
    rw.add_argument("--out-graph")
    rw.add_argument("--out-plan")
    rw.set_defaults(func=cmd_rewrite)

    run = sub.add_parser("run", help="execute a scenario and write its trace")
    run.add_argument("scenario")
    run.add_argument("--compare", nargs=2, metavar=("FAST", "SLOW"), help="device configs to compare")
    run.add_argument("--shared-bus", type=int, default=1, metavar="N", help="split SLOW's link among N devices")
    run.add_argument("--out-dir", default=".")
    run.set_defaults(func=cmd_run)

    ab = sub.add_parser("allreduce-bench", help="ring vs hierarchical all-reduce cost sweep")
    ab.add_argument("topology")
    ab.add_argument("--sizes", default="2^10..2^27", help="e.g. 1024,4096 or 2^10..2^27")
    ab.add_argument("--verify-limit", type=int, default=1 << 16, help="largest size checked numerically")
    ab.add_argument("--out")
    ab.set_defaults(func=cmd_allreduce_bench)

    tr = sub.add_parser("train", help="data-parallel training and scaling table")
    tr.add_argument("scenario")
    tr.add_argument("--out-dir", default=".")
    tr.set_defaults(func=cmd_train)

    for sp in (rw, run, ab, tr):
        sp.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS,
                        help="print errors as one JSON object on stderr")
    return p


def _report(args: argparse.Namespace, code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("key", "op_id", "needed", "capacity", "tensor_id"):
        val = getattr(exc, attr, None)
        if val is not None:
            err[attr] = val
    if getattr(args, "json_errors", False):
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
    else:
        print(f"error: {err['error']}: {err['message']}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (CannotFit, DeviceOOM, HostOOM) as e:
        return _report(args, EXIT_CAPACITY, e)
    except ReplicaDivergence as e:
        return _report(args, EXIT_INVARIANT, e)
    except (UsageError, GraphError, TopologyError, ExecutionError, TrainingError, ValueError, KeyError) as e:
        return _report(args, EXIT_USAGE, e)


if __name__ == "__main__":
    sys.exit(main())

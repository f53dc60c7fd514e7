import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swapflow.executor import (
    NVLINK2,
    PCIE3,
    TRACE_FIELDS,
    UNBOUNDED,
    DeviceConfig,
    DeviceOOM,
    ExecutionError,
    HostOOM,
    MissingInput,
    compare_links,
    evaluate,
    execute,
    same_outputs,
    shared_bus,
    simulate,
    trace_to_csv,
    trace_to_json,
)
from swapflow.graph import HOST, GraphBuilder, GraphError, OpKind, liveness, topo_order
from swapflow.planner import CannotFit, SwapEntry, SwapPlan, find_swap_candidates, insert_swaps, plan_for_capacity
from swapflow.scenarios import random_dag, random_inputs


def device(capacity, bw=1e12, latency=0.0, host=UNBOUNDED.host_capacity):
    return DeviceConfig(capacity, host, bw, bw, latency)


def abc_chain():
    """a(100 B) -> b(50 B) -> c(25 B), one byte per element."""
    b = GraphBuilder(dtype_width=1)
    b.source("a", ("ta", 100))
    b.compute("b", ["ta"], [("tb", 50)], fn="scale:0.5")
    b.compute("c", ["tb"], [("tc", 25)], fn="identity")
    b.sink("d", "tc")
    return b.build()


def abc_inputs():
    return {"ta": np.arange(100, dtype=float)}


def random_swapped(seed, max_ops=25, max_bytes=10_000_000):
    rng = np.random.default_rng(seed)
    g = random_dag(rng, max_ops=max_ops, max_bytes=max_bytes)
    cands = find_swap_candidates(g, topo_order(g), 1)
    entries = [
        SwapEntry(c.tensor_id, op, int(rng.integers(0, step - c.producer_step)))
        for c in cands
        for op, step in c.distant_consumers
        if rng.random() < 0.5
    ]
    return g, insert_swaps(g, SwapPlan(entries)), rng


# chain examples -------------------------------------------------------------


def test_chain_fits_in_200():
    out, trace = execute(abc_chain(), device(200), abc_inputs())
    assert trace.peak_device_bytes == 150
    assert [e.device_mem_after for e in trace.events] == [100, 50, 25, 0]
    assert np.array_equal(out["tc"].payload, np.arange(25) * 0.5)


def test_chain_ooms_at_b():
    with pytest.raises(DeviceOOM) as err:
        execute(abc_chain(), device(100), abc_inputs())
    assert (err.value.op_id, err.value.needed, err.value.capacity) == ("b", 150, 100)


def test_chain_cannot_be_planned_into_100():
    # b reads 100 B and writes 50 B, so no swap plan gets it under 100 B
    with pytest.raises(CannotFit) as err:
        plan_for_capacity(abc_chain(), 100)
    assert err.value.capacity == 100


def test_host_oom():
    b = GraphBuilder()
    b.source("a", ("t", 64), placement=HOST)
    b.sink("z", "t")
    with pytest.raises(HostOOM):
        simulate(b.build(), DeviceConfig(32, 32, 1.0, 1.0, 0.0))


def test_missing_and_misshapen_inputs():
    with pytest.raises(MissingInput):
        execute(abc_chain(), device(200), {})
    with pytest.raises(MissingInput):
        execute(abc_chain(), device(200), {"ta": np.zeros(3)})


# operator set -----------------------------------------------------------------


def test_operator_semantics():
    b = GraphBuilder(dtype_width=8)
    b.source("a", ("x", 24), ("y", 24))
    b.compute("b_add", ["x", "y"], [("s", 24)])
    b.compute("c_scale", ["s"], [("k", 24)], fn="scale:-3")
    b.compute("d_sum", ["k", "x"], [("r", 8)], fn="sum")
    b.compute("e_id", ["r"], [("i", 8)], fn="identity")
    b.sink("z", "i", "k")
    out = evaluate(b.build(), {"x": [1.0, 2.0, 3.0], "y": [0.5, 0.25, 0.125]})
    k = -3 * np.array([1.5, 2.25, 3.125])
    assert np.array_equal(out["k"].payload, k)
    assert out["i"].payload.tolist() == [float(k.sum()) + 6.0]


def test_unknown_fn_rejected():
    b = GraphBuilder()
    b.source("a", ("x", 4))
    b.compute("b", ["x"], [("y", 4)], fn="sqrt")
    b.sink("z", "y")
    with pytest.raises(GraphError, match="sqrt"):
        b.build()
    with pytest.raises(ExecutionError, match="unsupported"):
        evaluate(b.build(check=False), {"x": [4.0]})


# timing -----------------------------------------------------------------------


def far_chain(nbytes=1 << 26, cost=1e-3, far=9):
    """Big tensor ``t`` made at step 0 and read again at step ``far``."""
    b = GraphBuilder()
    b.source("s00", ("t", nbytes))
    prev = "t"
    for k in range(1, far + 1):
        ins = [prev] + (["t"] if k == far else [])
        b.compute(f"s{k:02d}", ins, [(f"u{k:02d}", 4)], cost)
        prev = f"u{k:02d}"
    b.sink("s_end", prev)
    return b.build()


def one_swap_chain(nbytes=1 << 26, cost=1e-3, far=9):
    return insert_swaps(far_chain(nbytes, cost, far), SwapPlan([SwapEntry("t", f"s{far:02d}")]))


def closed_form_makespan(cfg, nbytes=1 << 26, cost=1e-3, far=9):
    out = cfg.link_latency + nbytes / cfg.d2h_bandwidth
    back = cfg.link_latency + nbytes / cfg.h2d_bandwidth
    # the swap-in waits for both the swap-out and the op right before the consumer
    return max(out, (far - 1) * cost) + back + cost


@pytest.mark.parametrize("cost", [1e-4, 1e-3, 1e-2])
def test_compare_links_matches_closed_form(cost):
    g = one_swap_chain(cost=cost)
    fast, slow = simulate(g, NVLINK2).makespan, simulate(g, PCIE3).makespan
    assert fast == pytest.approx(closed_form_makespan(NVLINK2, cost=cost), rel=1e-12)
    assert slow == pytest.approx(closed_form_makespan(PCIE3, cost=cost), rel=1e-12)
    ratio = compare_links(g, NVLINK2, PCIE3)
    assert ratio > 1
    assert ratio == pytest.approx(closed_form_makespan(PCIE3, cost=cost) / closed_form_makespan(NVLINK2, cost=cost))


def test_compare_links_trivial_cases():
    g = one_swap_chain()
    assert compare_links(g, PCIE3, PCIE3) == 1.0
    from conftest import chain

    plain = chain([64, 64, 64], costs=[1e-3, 2e-3])
    assert compare_links(plain, NVLINK2, PCIE3) == 1.0
    assert compare_links(chain([4, 4]), NVLINK2, PCIE3) == 1.0  # nothing takes time


def test_shared_bus():
    assert shared_bus(PCIE3, 1) == PCIE3
    half = shared_bus(PCIE3, 2)
    assert (half.h2d_bandwidth, half.d2h_bandwidth) == (8e9, 8e9)
    with pytest.raises(ValueError):
        shared_bus(PCIE3, 0)
    g = one_swap_chain()
    assert compare_links(g, NVLINK2, half) > compare_links(g, NVLINK2, PCIE3)


def test_transfers_overlap_compute():
    g = one_swap_chain(nbytes=75_000_000, cost=1e-3)
    ev = {e.op_id: e for e in simulate(g, replace(NVLINK2, link_latency=0.0)).events}
    out, first = ev["!swap_out/t"], ev["s01"]
    assert out.t_start == first.t_start == 0.0
    assert out.t_end == pytest.approx(1e-3)
    assert out.bytes_moved == 75_000_000


def test_device_config_validation():
    with pytest.raises(ValueError):
        DeviceConfig(0, 10, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        DeviceConfig(20, 10, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        DeviceConfig(10, 10, 1.0, 1.0, -1.0)
    assert DeviceConfig.from_dict(NVLINK2.to_dict()) == NVLINK2


# trace output -------------------------------------------------------------------


def test_csv_and_json_traces():
    _, trace = execute(abc_chain(), device(200), abc_inputs())
    rows = list(csv.reader(io.StringIO(trace_to_csv(trace))))
    assert tuple(rows[0]) == TRACE_FIELDS == ("op_id", "kind", "t_start", "t_end", "bytes_moved", "device_mem_after")
    assert [r[0] for r in rows[1:]] == ["a", "b", "c", "d"]
    doc = json.loads(trace_to_json(trace))
    assert doc["summary"] == {"peak_device_bytes": 150, "peak_host_bytes": 0, "makespan": 0.0}
    assert set(doc["events"][0]) == set(TRACE_FIELDS)


# properties -----------------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_memory_conservation(seed):
    _, g, _ = random_swapped(seed)
    order = topo_order(g)
    life = liveness(g, order)
    trace = simulate(g, UNBOUNDED)
    assert [e.op_id for e in trace.events] == order
    for step, ev in enumerate(trace.events):
        live = sum(
            g.tensor[t].nbytes
            for t, lt in life.items()
            if g.on_device(t) and lt.first_step <= step < lt.last_step
        )
        assert ev.device_mem_after == live >= 0
    assert trace.makespan == max(e.t_end for e in trace.events)
    starts = [e.t_start for e in trace.events]
    assert starts == sorted(starts)


@given(st.integers(0, 2**32 - 1))
def test_determinism(seed):
    orig, g, rng = random_swapped(seed, max_bytes=100_000)
    inputs = random_inputs(orig, rng)
    out1, t1 = execute(g, NVLINK2, inputs)
    out2, t2 = execute(g, NVLINK2, inputs)
    assert t1 == t2 and same_outputs(out1, out2)
    assert trace_to_csv(t1) == trace_to_csv(t2)


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.5))
def test_capacity_safety(seed, frac):
    _, g, _ = random_swapped(seed)
    peak = simulate(g, UNBOUNDED).peak_device_bytes
    cap = max(1, int(peak * frac))
    try:
        trace = simulate(g, device(cap))
    except DeviceOOM as err:
        assert err.needed > cap and peak > cap
    else:
        assert trace.peak_device_bytes <= cap
        assert all(0 <= e.device_mem_after <= cap for e in trace.events)


@given(st.integers(0, 2**32 - 1), st.floats(1e8, 1e11), st.floats(0.01, 1.0), st.booleans())
def test_lower_bandwidth_never_faster(seed, bw, factor, which):
    _, g, _ = random_swapped(seed)
    cfg = device(UNBOUNDED.capacity, bw=bw, latency=5e-6)
    slower = replace(cfg, **{("h2d_bandwidth" if which else "d2h_bandwidth"): bw * factor})
    assert simulate(g, slower).makespan >= simulate(g, cfg).makespan


@given(st.integers(0, 2**32 - 1), st.sampled_from([NVLINK2, PCIE3]))
def test_swapping_never_speeds_up(seed, cfg):
    orig, g, _ = random_swapped(seed)
    base = simulate(orig, cfg.unbounded()).makespan
    assert simulate(g, cfg.unbounded()).makespan >= base
    if any(o.kind is OpKind.SWAP_IN for o in g.ops):
        assert compare_links(g, NVLINK2.unbounded(), PCIE3.unbounded()) >= 1.0

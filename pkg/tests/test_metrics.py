import pytest
from hypothesis import given
from hypothesis import strategies as st

from swapflow.executor import NVLINK2, simulate
from swapflow.metrics import (
    NonPositive,
    NonPositiveTime,
    efficiency,
    overhead_pct,
    resolution_ratio,
    round_half_up,
    scaling_csv,
    scaling_table,
    speedup,
)

from test_executor import far_chain, one_swap_chain

MEASURED_RANKS = [1, 2, 4, 8, 16]
MEASURED_NODES = [1, 1, 1, 2, 4]
MEASURED_TIMES = [6439.93, 3268.65, 1694.73, 843.92, 461.23]
MEASURED_SPEEDUPS = [1.97, 1.93, 2.01, 1.83]
MEASURED_EFFICIENCY = [98.5, 95.0, 95.4, 87.3]


def test_speedup_examples():
    assert round_half_up(speedup(6439.93, 3268.65), 2) == 1.97
    assert round_half_up(speedup(843.92, 461.23), 2) == 1.83
    assert speedup(7.5, 7.5) == 1.0


def test_efficiency_examples():
    assert round_half_up(efficiency(6439.93, 461.23, 16), 1) == 87.3
    assert round_half_up(efficiency(6439.93, 1694.73, 4), 1) == 95.0
    assert efficiency(3.0, 3.0, 1) == 100.0


def test_resolution_ratio():
    assert resolution_ratio(192, 144) == pytest.approx(2.370370, abs=1e-6)
    assert resolution_ratio(144, 144) == 1.0
    assert resolution_ratio(96, 64) == 3.375
    with pytest.raises(NonPositive):
        resolution_ratio(0, 64)


def test_overhead_examples():
    assert overhead_pct(590.0, 590.0) == 0.0
    assert round_half_up(overhead_pct(590 * 1.137, 590), 1) == 13.7


def test_overhead_from_traces():
    swapped = simulate(one_swap_chain(), NVLINK2)
    plain = simulate(far_chain(), NVLINK2.unbounded())
    pct = overhead_pct(swapped.makespan, plain.makespan)
    assert pct > 0
    assert pct == 100 * (swapped.makespan - plain.makespan) / plain.makespan


@pytest.mark.parametrize("fn,args", [(speedup, (0, 1)), (speedup, (1, -1)), (efficiency, (1, 0, 2)),
                                     (overhead_pct, (1, 0))])
def test_non_positive_times(fn, args):
    with pytest.raises(NonPositiveTime):
        fn(*args)


def test_measured_scaling_cells_reproduced():
    rows = scaling_table(MEASURED_RANKS, MEASURED_TIMES, MEASURED_NODES)
    assert rows[0].speedup_prev is None and rows[0].efficiency_pct == 100.0
    assert [round_half_up(r.speedup_prev, 2) for r in rows[1:]] == MEASURED_SPEEDUPS
    assert [round_half_up(r.efficiency_pct, 1) for r in rows[1:]] == MEASURED_EFFICIENCY
    lines = scaling_csv(rows).splitlines()
    assert lines[0] == "ranks,epoch_s,speedup_prev,efficiency_pct"
    assert lines[1] == "1,6439.93,,100.0"
    assert lines[5] == "16,461.23,1.83,87.3"


def test_epoch_time_speedups_vs_one_gpu():
    assert [round_half_up(speedup(590, t), 2) for t in (150, 76, 40)] == [3.93, 7.76, 14.75]


def test_round_half_up_ties():
    assert round_half_up(0.125, 2) == 0.13
    assert round_half_up(2.675, 2) == 2.68  # the float is slightly below; its shortest repr is not
    assert round_half_up(-0.5, 0) == -1.0


positive = st.floats(1e-6, 1e6)


@given(positive, positive, positive)
def test_speedup_composes(a, b, c):
    assert speedup(a, b) * speedup(b, c) == pytest.approx(speedup(a, c), rel=1e-12)


@given(positive, positive, st.integers(1, 64))
def test_efficiency_not_clamped(t1, tp, p):
    e = efficiency(t1, tp, p)
    if tp * p >= t1:
        assert e <= 100 * (1 + 1e-12)
    assert e == pytest.approx(100 * t1 / (tp * p))

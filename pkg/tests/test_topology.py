import itertools
import json
import math
import warnings

import pytest
from hypothesis import given
from hypothesis import strategies as st

from swapflow.topology import (
    BadArity,
    NonPositive,
    SameRank,
    Tier,
    Topology,
    TopologyError,
    family,
    ibm_minsky,
    intel_pcie,
    parse_topology,
    tier_between,
)

IBM_DOC = {
    "ranks": 8,
    "tiers": [
        {"name": "intra", "group_size": 4, "bandwidth_bytes_per_s": 150e9, "latency_s": 5e-6},
        {"name": "inter", "group_size": 2, "bandwidth_bytes_per_s": 12.5e9, "latency_s": 2e-6},
    ],
}


@st.composite
def topologies(draw, max_ranks=32):
    sizes = draw(st.lists(st.integers(1, 4), min_size=1, max_size=4))
    while len(sizes) > 1 and math.prod(sizes) > max_ranks:
        sizes.pop()
    bws = sorted((draw(st.floats(1e8, 1e12)) for _ in sizes), reverse=True)
    tiers = tuple(Tier(f"t{i}", g, bw, draw(st.floats(0, 1e-4))) for i, (g, bw) in enumerate(zip(sizes, bws)))
    return Topology(math.prod(sizes), tiers)


def test_ibm_shape():
    t = parse_topology(json.dumps(IBM_DOC))
    assert t == ibm_minsky()
    assert t.radices == (4, 2)
    assert t.to_dict() == IBM_DOC


def test_trivial_topology():
    t = parse_topology({"ranks": 1, "tiers": [{"name": "solo", "group_size": 1, "bandwidth_bytes_per_s": 1e9, "latency_s": 0}]})
    assert t.ranks == 1 and t.decode(0) == (0,)


def test_bad_arity():
    doc = json.loads(json.dumps(IBM_DOC))
    doc["tiers"][0]["group_size"], doc["tiers"][1]["group_size"] = 3, 2
    with pytest.raises(BadArity):
        parse_topology(doc)


@pytest.mark.parametrize("bw", [0, -1e9])
def test_non_positive_bandwidth(bw):
    doc = json.loads(json.dumps(IBM_DOC))
    doc["tiers"][1]["bandwidth_bytes_per_s"] = bw
    with pytest.raises(NonPositive):
        parse_topology(doc)


def test_field_names_are_exact():
    doc = json.loads(json.dumps(IBM_DOC))
    doc["tiers"][0]["bandwidth"] = doc["tiers"][0].pop("bandwidth_bytes_per_s")
    with pytest.raises(TopologyError):
        parse_topology(doc)


def test_slow_inner_tier_warns():
    with pytest.warns(UserWarning):
        Topology(8, (Tier("intra", 4, 1e9, 0.0), Tier("inter", 2, 1e10, 0.0)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        intel_pcie()


def test_tier_between_examples():
    t = ibm_minsky()
    assert tier_between(t, 0, 1) == 0
    assert tier_between(t, 0, 4) == 1
    assert tier_between(t, 3, 4) == 1
    with pytest.raises(SameRank):
        tier_between(t, 2, 2)


def test_family_fills_nodes():
    intra, inter = (150e9, 5e-6), (12.5e9, 2e-6)
    assert family(2, 4, intra, inter).radices == (2, 1)
    assert family(16, 4, intra, inter).radices == (4, 4)
    with pytest.raises(BadArity):
        family(6, 4, intra, inter)


@given(topologies())
def test_mixed_radix_round_trip(t):
    coords = [t.decode(r) for r in range(t.ranks)]
    assert [t.encode(c) for c in coords] == list(range(t.ranks))
    assert sorted(coords) == sorted(itertools.product(*(range(g) for g in t.radices)))
    if t.ranks > 1:
        assert t.decode(1)[0] == 1 or t.radices[0] == 1  # innermost digit varies fastest


@given(topologies(max_ranks=16))
def test_tier_between_brute_force(t):
    for a, b in itertools.permutations(range(t.ranks), 2):
        ca, cb = t.decode(a), t.decode(b)
        diff = [i for i in range(len(ca)) if ca[i] != cb[i]]
        assert tier_between(t, a, b) == diff[-1] == tier_between(t, b, a)

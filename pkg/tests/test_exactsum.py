import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swapflow import exactsum

finite = st.floats(allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=1, max_size=40))
def test_split_is_exact(values):
    limbs = exactsum.split(np.array(values))
    for v, row in zip(values, limbs):
        assert math.fsum(math.ldexp(float(q), int(e)) for q, e in zip(row, exactsum.EXPONENTS)) == v
        assert np.all(np.abs(row) < 2.0**exactsum.LIMB_BITS)


def rounded_exact_sum(values):
    total = sum(map(Fraction, values), Fraction(0))
    try:
        return float(total)  # correctly rounded
    except OverflowError:
        return math.inf if total > 0 else -math.inf


@given(st.lists(finite, min_size=1, max_size=40))
def test_sum_is_correctly_rounded(values):
    got = exactsum.decode(exactsum.encode_sum(np.array(values)[:, None]))[0]
    assert got == rounded_exact_sum(values)


@given(st.lists(st.floats(-1e300, 1e300), min_size=2, max_size=30), st.integers(1, 29))
def test_grouping_does_not_matter(values, cut):
    arr = np.array(values)[:, None]
    cut = min(cut, len(values) - 1)
    whole = exactsum.encode_sum(arr)
    parts = exactsum.encode_sum(arr[:cut]) + exactsum.encode_sum(arr[cut:])
    assert exactsum.decode(whole).tobytes() == exactsum.decode(parts).tobytes()


def test_subnormals_and_signed_zero():
    tiny = 5e-324
    assert exactsum.decode(exactsum.encode_sum(np.array([[tiny], [tiny]])))[0] == 2 * tiny
    assert exactsum.decode(exactsum.encode_sum(np.array([[-0.0], [0.0]])))[0] == 0.0


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        exactsum.split(np.array([1.0, math.nan]))


def test_term_limit():
    with pytest.raises(ValueError):
        exactsum.encode_sum(np.zeros((exactsum.MAX_TERMS + 1, 1)))

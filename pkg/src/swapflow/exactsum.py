"""Order-independent float64 summation via fixed-exponent limbs.

Every float64 splits exactly into integer-valued limbs aligned to a fixed
grid of exponents. Adding limbs is exact (integers below 2**53) no matter how
the additions are grouped, so per-rank partial sums can be combined by any
reduction tree. Decoding rounds once, giving the correctly rounded sum, i.e.
the same bits as ``math.fsum`` over all the original terms.
"""

from __future__ import annotations

import math

import numpy as np

LIMB_BITS = 32
TOP_EXP = 1024 - LIMB_BITS
N_LIMBS = 66  # lowest limb exponent sits below the smallest subnormal, 2**-1074
EXPONENTS = np.array([TOP_EXP - LIMB_BITS * k for k in range(N_LIMBS)])
# each limb of one term is < 2**32; 2**21 terms keep a summed limb below 2**53
MAX_TERMS = 1 << (53 - LIMB_BITS)


def split(values: np.ndarray) -> np.ndarray:
    """Limbs of each value, shape ``values.shape + (N_LIMBS,)``; sums to ``values`` exactly."""
    vals = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("cannot split non-finite values")
    out = np.zeros(vals.shape + (N_LIMBS,))
    nz = np.abs(vals[vals != 0])
    if nz.size == 0:
        return out
    hi = np.frexp(nz.max())[1]  # |v| < 2**hi
    lo = np.frexp(nz.min())[1] - 54
    rest = vals.copy()
    for k, e in enumerate(EXPONENTS):
        if e >= hi:
            continue
        if e + LIMB_BITS <= lo:
            break
        q = np.trunc(np.ldexp(rest, -int(e))) + 0.0  # +0.0 turns -0.0 into 0.0
        rest -= np.ldexp(q, int(e))
        out[..., k] = q
    return out


def encode_sum(values: np.ndarray) -> np.ndarray:
    """Limb-wise sum over the first axis: the exact sum of rows, still in limb form."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] > MAX_TERMS:
        raise ValueError(f"at most {MAX_TERMS} terms per exact sum")
    return split(values).sum(axis=0) + 0.0


def decode(limbs: np.ndarray) -> np.ndarray:
    """Round limb sums (shape ``(..., N_LIMBS)``) back to float64, once."""
    limbs = np.asarray(limbs, dtype=np.float64)
    flat = limbs.reshape(-1, N_LIMBS)
    out = np.empty(flat.shape[0])
    for i, row in enumerate(flat):
        try:
            out[i] = math.fsum(math.ldexp(float(q), int(e)) for q, e in zip(row, EXPONENTS) if q)
        except OverflowError:
            out[i] = math.copysign(math.inf, float(row[np.flatnonzero(row)[0]]))
    return out.reshape(limbs.shape[:-1])

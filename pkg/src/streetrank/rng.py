"""Counter-based RNG helpers usable inside numba kernels.

splitmix64 gives a full-period 64-bit stream from any seed, so kernels can
derive independent deterministic substreams (for example one per tree) without
sharing mutable state.
"""
from __future__ import annotations

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0


@nb.njit(nb.uint64(nb.uint64), cache=True)
def mix64(value):
    value = (value ^ (value >> np.uint64(30))) * _MIX1
    value = (value ^ (value >> np.uint64(27))) * _MIX2
    return value ^ (value >> np.uint64(31))


@nb.njit(nb.types.UniTuple(nb.uint64, 2)(nb.uint64), cache=True)
def next_u64(state):
    """Advance a splitmix64 state; returns (new_state, random_word)."""
    state = state + _GOLDEN
    return state, mix64(state)


@nb.njit(nb.float64(nb.uint64), cache=True)
def to_unit(word):
    """Map a random 64-bit word to a float in [0, 1)."""
    return np.float64(word >> np.uint64(11)) * _INV_2_53


@nb.njit(nb.uint64(nb.uint64, nb.uint64), cache=True)
def substream(seed, index):
    """Deterministic child seed for substream ``index`` of ``seed``."""
    return mix64(seed ^ mix64(index + np.uint64(1)))

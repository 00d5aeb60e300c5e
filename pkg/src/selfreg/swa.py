"""Stochastic weight averaging over cyclically sampled parameter snapshots.

Snapshots are taken at steps m, m+c, m+2c, ... and the averaged weights
are the exact arithmetic mean of all snapshots taken so far. The
accumulator never touches the live training weights; it only reads
copies handed to it at step boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class SwaState:
    """Running sum of parameter snapshots plus the snapshot count."""

    running_sum: dict[str, np.ndarray]
    count: int = 0
    m: int = 0
    c: int = 1
    n_total: Optional[int] = None

    @classmethod
    def for_shapes(cls, shapes: dict[str, tuple], m: int = 0, c: int = 1,
                   n_total: Optional[int] = None) -> "SwaState":
        if m < 0:
            raise ValueError(f"initial sampling step m must be >= 0, got {m}")
        if c < 1:
            raise ValueError(f"cyclic step length c must be >= 1, got {c}")
        if n_total is not None and n_total < m:
            raise ValueError(f"n_total={n_total} leaves no room for sampling from m={m}")
        return cls(running_sum={k: np.zeros(s) for k, s in shapes.items()},
                   m=m, c=c, n_total=n_total)


def should_sample(step: int, m: int, c: int) -> bool:
    """True iff ``step`` is one of the sampling steps m, m+c, m+2c, ..."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if c < 1:
        raise ValueError(f"cyclic step length c must be >= 1, got {c}")
    return step >= m and (step - m) % c == 0


def swa_update(state: SwaState, weights: dict[str, np.ndarray]) -> SwaState:
    """Fold one snapshot into the running sum."""
    if set(weights) != set(state.running_sum):
        raise ValueError("snapshot parameter names do not match the accumulator")
    for name, arr in weights.items():
        acc = state.running_sum[name]
        if np.shape(arr) != acc.shape:
            raise ValueError(f"snapshot parameter '{name}' has shape {np.shape(arr)}, "
                             f"expected {acc.shape}")
        acc += arr
    state.count += 1
    return state


def swa_weights(state: SwaState) -> dict[str, np.ndarray]:
    """Arithmetic mean of all snapshots taken so far."""
    if state.count == 0:
        raise ValueError("no snapshots taken; averaged weights are undefined")
    return {name: acc / state.count for name, acc in state.running_sum.items()}

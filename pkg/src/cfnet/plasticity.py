"""Weight update rules.

``stdp_update`` is the stabilized one-sided STDP rule: the offset subtracted
from the scaled pre-synaptic trace is the current weight itself, so the
change always points from ``w`` toward the trace direction. ``dop_depress``
lowers a neuron's dopaminergic weight each time it fires and rescales the
whole vector so its largest entry sits just above threshold.

The in-place variants are what the simulation kernel calls; the pure
wrappers are the public surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


class DegenerateUpdateError(ValueError):
    pass


@dataclass(frozen=True)
class StdpParams:
    alpha: float = 0.01
    alpha_dop: float = 1.0
    tau_pre: float = 200.0

    def __post_init__(self):
        if not 0 < self.alpha <= self.alpha_dop <= 1:
            raise ValueError("need 0 < alpha <= alpha_dop <= 1")
        if self.tau_pre <= 0:
            raise ValueError("tau_pre must be positive")


@dataclass(frozen=True)
class DopParams:
    beta: float = 0.5
    headroom: float = 1.05

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.headroom <= 1:
            raise ValueError("headroom must exceed 1")


@njit(cache=True)
def stdp_column_inplace(weights, j, traces, rate, tau_pre):
    """Apply the update to column ``j`` of ``weights`` (inputs x neurons)."""
    n = weights.shape[0]
    norm2 = 0.0
    for i in range(n):
        w = weights[i, j]
        w = w + rate * (traces[i] / tau_pre - w)
        if w < 0.0:
            w = 0.0
        weights[i, j] = w
        norm2 += w * w
    if norm2 == 0.0:
        raise DegenerateUpdateError("weight vector vanished after update")
    scale = 1.0 / np.sqrt(norm2)
    for i in range(n):
        weights[i, j] *= scale


@njit(cache=True)
def static_offset_column_inplace(weights, j, traces, rate, tau_pre, offset):
    """Control rule with a uniform offset; exists to show the instability."""
    n = weights.shape[0]
    norm2 = 0.0
    for i in range(n):
        w = weights[i, j] + rate * (traces[i] / tau_pre - offset)
        if w < 0.0:
            w = 0.0
        weights[i, j] = w
        norm2 += w * w
    if norm2 == 0.0:
        raise DegenerateUpdateError("weight vector vanished after update")
    scale = 1.0 / np.sqrt(norm2)
    for i in range(n):
        weights[i, j] *= scale


@njit(cache=True)
def dop_depress_inplace(dop, j, beta, target):
    dop[j] *= np.exp(-beta)
    peak = dop.max()
    scale = target / peak
    for k in range(dop.shape[0]):
        dop[k] *= scale


def stdp_update(weight, traces, rate: float, tau_pre: float = 200.0) -> np.ndarray:
    """Return ``normalize(max(0, w + rate * (traces / tau_pre - w)))``."""
    w = np.array(weight, dtype=np.float64).reshape(-1, 1)
    stdp_column_inplace(w, 0, np.asarray(traces, dtype=np.float64), float(rate), float(tau_pre))
    return w[:, 0]


def static_offset_update(weight, traces, rate: float, tau_pre: float, offset: float) -> np.ndarray:
    w = np.array(weight, dtype=np.float64).reshape(-1, 1)
    static_offset_column_inplace(w, 0, np.asarray(traces, dtype=np.float64),
                                 float(rate), float(tau_pre), float(offset))
    return w[:, 0]


def dop_depress(dop, j: int, beta: float = 0.5, target: float = 1.05 * 13.5) -> np.ndarray:
    """Depress entry ``j`` by ``exp(-beta)`` then rescale so ``max == target``."""
    d = np.array(dop, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("dopaminergic weights must be positive")
    dop_depress_inplace(d, int(j), float(beta), float(target))
    return d


def effective_rate(boosted: bool, alpha: float = 0.01, alpha_dop: float = 1.0) -> float:
    return alpha_dop if boosted else alpha

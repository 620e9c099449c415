"""Reference estimators that are given ground-truth information.

``deconv`` sees the squared distance between the true signal and every
window of the record and greedily picks the closest non-conflicting windows;
the known-support estimator averages the true occurrence windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Measurement, SupportSequence, as_signal
from .errors import DataError

CHUNK = 1 << 16


@dataclass(frozen=True)
class OracleDistances:
    """``z[i] = sum_l (x[l] - y[i + l])**2`` for every window start ``i``."""

    z: np.ndarray
    L: int

    def __post_init__(self):
        z = np.array(self.z, dtype=np.float64).ravel()
        if np.any(z < 0):
            raise ValueError("distances must be >= 0")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)


def oracle_distances(y: Measurement, x_true) -> OracleDistances:
    """Direct windowed squared distances (exact zeros on noiseless matches)."""
    x = as_signal(x_true, y.L)
    windows = sliding_window_view(y.samples, y.L)
    z = np.empty(windows.shape[0])
    for lo in range(0, z.size, CHUNK):
        d = windows[lo:lo + CHUNK] - x
        z[lo:lo + CHUNK] = np.einsum("ij,ij->i", d, d)
    return OracleDistances(z, y.L)


def greedy_picks(z, M: int, min_gap: int) -> np.ndarray:
    """Indices chosen by ascending ``z``, skipping any within ``min_gap`` of a pick.

    Ties go to the lower index.
    """
    z = np.asarray(z)
    order = np.argsort(z, kind="stable")
    blocked = np.zeros(z.size, dtype=bool)
    picks = []
    for i in order.tolist():
        if blocked[i]:
            continue
        picks.append(i)
        blocked[max(0, i - min_gap + 1): i + min_gap] = True
        if len(picks) == M:
            break
    picks = np.sort(np.array(picks, dtype=np.int64))
    if picks.size > 1:
        assert np.min(np.diff(picks)) >= min_gap
    return picks


def deconv_estimate(y: Measurement, z: OracleDistances, M: int, min_gap: int) -> np.ndarray:
    """Average of the ``M`` windows selected greedily from the oracle distances."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if min_gap < 1:
        raise ValueError("min_gap must be >= 1")
    picks = greedy_picks(z.z, M, min_gap)
    if picks.size < M:
        raise DataError(f"only {picks.size} of {M} windows can be picked with min_gap={min_gap}")
    return _window_mean(y.samples, picks, y.L)


def known_support_estimate(y: Measurement, support: SupportSequence) -> np.ndarray:
    """Average of the windows at the true occurrence starts."""
    if support.M == 0:
        raise ValueError("support is empty")
    if support.N != y.N or support.L != y.L:
        raise ValueError("support does not match the measurement")
    return _window_mean(y.samples, support.starts, y.L)


def _window_mean(samples, starts, L: int) -> np.ndarray:
    idx = np.asarray(starts)[:, None] + np.arange(L)
    return samples[idx].mean(axis=0)

"""Autocorrelations up to third order and the forward models linking them.

Autocorrelations of a length-m sequence z are

    a1 = (1/m) sum_i z[i]
    a2[l] = (1/m) sum_i z[i] z[i+l]
    a3[l1, l2] = (1/m) sum_i z[i] z[i+l1] z[i+l2]

with z zero-padded outside [0, m). Third-order tables of a measurement are
stored packed over 0 <= l1 <= l2 < L in row-major upper-triangle order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Optional

import numpy as np

from .core import DensityParams, Measurement, PairSeparationFunction, as_signal

CHUNK_SIZE = 4096


@lru_cache(maxsize=None)
def triu_pairs(L: int):
    """Row-major upper-triangle shift pairs (l1 <= l2) as two index arrays."""
    l1, l2 = np.triu_indices(L)
    l1.setflags(write=False)
    l2.setflags(write=False)
    return l1, l2


def third_order_deltas(L: int) -> np.ndarray:
    """delta[l1] + delta[l2] + delta[l1 - l2] over the packed pairs."""
    l1, l2 = triu_pairs(L)
    return (l1 == 0).astype(float) + (l2 == 0) + (l1 == l2)


def unpack_triu(packed, L: int) -> np.ndarray:
    table = np.zeros((L, L))
    l1, l2 = triu_pairs(L)
    table[l1, l2] = packed
    table[l2, l1] = packed
    return table


@dataclass(frozen=True)
class MomentStats:
    """First three autocorrelations of a measurement (or their prediction).

    ``a3`` is packed over ``l1 <= l2``; ``N = 0`` marks a model prediction
    rather than data.
    """

    a1: float
    a2: np.ndarray
    a3: np.ndarray
    N: int
    L: int
    sigma: float

    def __post_init__(self):
        a2 = np.array(self.a2, dtype=np.float64).ravel()
        a3 = np.array(self.a3, dtype=np.float64).ravel()
        if a2.size != self.L or a3.size != self.L * (self.L + 1) // 2:
            raise ValueError("moment array sizes do not match L")
        if not (np.isfinite(self.a1) and np.all(np.isfinite(a2)) and np.all(np.isfinite(a3))):
            raise ValueError("moments must be finite")
        a2.setflags(write=False)
        a3.setflags(write=False)
        object.__setattr__(self, "a1", float(self.a1))
        object.__setattr__(self, "a2", a2)
        object.__setattr__(self, "a3", a3)

    @property
    def noise_floor(self):
        """Predicted residual std scales for orders 1, 2, 3.

        Pure Gaussian noise gives per-entry std constants between 1 (distinct
        lags) and sqrt(2) at order 2, sqrt(15) at order 3 (all lags zero); the
        scales use the geometric mean of those extremes.
        """
        if self.N <= 0:
            return (np.inf, np.inf, np.inf)
        s2 = self.sigma ** 2
        root_n = np.sqrt(self.N)
        return (self.sigma / root_n,
                2 ** 0.25 * np.sqrt(s2 + s2 ** 2) / root_n,
                15 ** 0.25 * np.sqrt(s2 + s2 ** 3) / root_n)

    def a3_table(self) -> np.ndarray:
        return unpack_triu(self.a3, self.L)


# ---------------------------------------------------------------- one pass

@dataclass(frozen=True)
class MomentPartial:
    """Raw moment sums of a contiguous stretch of the record.

    Sums only include products whose indices all fall inside the stretch;
    ``head``/``tail`` keep the first/last ``L-1`` samples so that products
    straddling a boundary can be added when two neighbours are merged.
    """

    n: int
    s1: float
    s2: np.ndarray
    s3: np.ndarray
    head: np.ndarray
    tail: np.ndarray
    L: int
    sigma: float


def _shift_rows(z: np.ndarray, L: int, n: int) -> np.ndarray:
    zp = np.concatenate([z, np.zeros(L)])
    return np.stack([zp[l:l + n] for l in range(L)])


def partial_moments(chunk, L: int, sigma: float = 0.0) -> MomentPartial:
    """Moment sums of one stretch, zero-padded at both of its ends."""
    c = np.asarray(chunk, dtype=np.float64).ravel()
    n = c.size
    s2 = np.zeros(L)
    s3 = np.zeros(L * (L + 1) // 2)
    if n:
        S = _shift_rows(c, L, n)
        s2 = S @ c
        pos = 0
        for l1 in range(L):
            s3[pos:pos + L - l1] = S[l1:] @ (c * S[l1])
            pos += L - l1
    k = L - 1
    return MomentPartial(n, float(c.sum()), s2, s3, c[:k].copy(), c[max(0, n - k):].copy(),
                         L, float(sigma))


def empty_partial(L: int, sigma: float = 0.0) -> MomentPartial:
    return partial_moments(np.zeros(0), L, sigma)


def merge_partial(left: MomentPartial, right: MomentPartial) -> MomentPartial:
    """Combine the sums of two adjacent stretches (``left`` first)."""
    if left.L != right.L or left.sigma != right.sigma:
        raise ValueError("cannot merge partials with different (L, sigma)")
    L = left.L
    s2 = left.s2 + right.s2
    s3 = left.s3 + right.s3
    t = left.tail.size
    w = np.concatenate([left.tail, right.head])
    if t and right.head.size:
        # products with the base in left.tail and the farthest factor in right.head
        wp = np.concatenate([w, np.zeros(L)])
        rows = np.stack([wp[l:l + t] for l in range(L)])
        reach = (np.arange(t)[None, :] + np.arange(L)[:, None]) >= t
        crossing = rows * reach
        base = w[:t]
        s2 = s2 + crossing @ base
        cross3 = np.empty_like(s3)
        pos = 0
        for l1 in range(L):
            cross3[pos:pos + L - l1] = crossing[l1:] @ (base * rows[l1])
            pos += L - l1
        s3 = s3 + cross3
    k = L - 1
    head = np.concatenate([left.head, right.head])[:k]
    tail = np.concatenate([left.tail, right.tail])
    tail = tail[max(0, tail.size - k):]
    return MomentPartial(left.n + right.n, left.s1 + right.s1, s2, s3, head, tail, L, left.sigma)


def reduce_partials(parts) -> MomentPartial:
    """Fixed pairwise tree reduction; the grouping depends only on the count."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        merged = [merge_partial(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def finalize(partial: MomentPartial) -> MomentStats:
    N = partial.n
    return MomentStats(partial.s1 / N, partial.s2 / N, partial.s3 / N, N, partial.L, partial.sigma)


def measurement_moments(y: Measurement, chunk_size: int = CHUNK_SIZE) -> MomentStats:
    """First three autocorrelations of ``y`` in a single chunked pass."""
    samples = y.samples
    L = y.L
    if samples.size < 2 * L:
        raise ValueError("measurement must have at least 2L samples")
    parts = [partial_moments(samples[i:i + chunk_size], L, y.sigma)
             for i in range(0, samples.size, chunk_size)]
    return finalize(reduce_partials(parts))


# ---------------------------------------------------------------- signal side

@dataclass(frozen=True)
class SignalMoments:
    """Aperiodic autocorrelations of a signal over non-negative shifts.

    ``a3`` is the full symmetric table over ``[0, max_shift]**2``.
    """

    a1: float
    a2: np.ndarray
    a3: np.ndarray
    L: int


def signal_moments(x, max_shift: Optional[int] = None) -> SignalMoments:
    x = as_signal(x)
    L = x.size
    if max_shift is None:
        max_shift = L - 1
    if not 0 <= max_shift <= 2 * L - 2:
        raise ValueError("max_shift must lie in [0, 2L-2]")
    K = max_shift + 1
    xp = np.concatenate([x, np.zeros(K)])
    S = np.stack([xp[l:l + L] for l in range(K)])
    a2 = S @ x / L
    a3 = np.einsum("i,ai,bi->ab", x, S, S) / L
    return SignalMoments(float(x.sum()) / L, a2, a3, L)


def forward_ws(x, rho0: float, sigma: float, N: int = 0) -> MomentStats:
    """Expected measurement moments for well-separated occurrences."""
    return forward_asd(x, DensityParams(rho0, np.zeros(len(x) - 1)), sigma, N)


def forward_asd(x, params: DensityParams, sigma: float, N: int = 0) -> MomentStats:
    """Expected measurement moments for an arbitrary gap distribution.

    Consecutive occurrences closer than ``2L-1`` correlate with each other;
    ``params.rho1[i]`` weights the contribution of gap ``i + L``.
    """
    x = as_signal(x)
    L = x.size
    rho0 = params.rho0
    rho1 = params.rho1
    if rho1.size != L - 1:
        raise ValueError("rho1 must have length L-1")
    sm = signal_moments(x)
    ax2, ax3 = sm.a2, sm.a3
    s2 = sigma ** 2

    a1 = rho0 * sm.a1
    a2 = np.empty(L)
    for l in range(L):
        cross = sum(rho1[j - L] * ax2[j - l] for j in range(L, L + l))
        a2[l] = rho0 * ax2[l] + cross + s2 * (l == 0)

    l1s, l2s = triu_pairs(L)
    deltas = third_order_deltas(L)
    a3 = np.empty(l1s.size)
    for p, (l1, l2) in enumerate(zip(l1s.tolist(), l2s.tolist())):
        cross = sum(rho1[j - L] * ax3[j - l2, j + l1 - l2] for j in range(L, L + l2 - l1))
        cross += sum(rho1[j - L] * ax3[l2 - l1, j - l1] for j in range(L, L + l1))
        a3[p] = rho0 * ax3[l1, l2] + cross + rho0 * sm.a1 * s2 * deltas[p]
    return MomentStats(a1, a2, a3, N, L, sigma)


# ---------------------------------------------------------------- coarse graining

def round_half_away(q) -> int:
    """Nearest integer, halves rounded away from zero (exact for Fractions)."""
    q = Fraction(q)
    if q >= 0:
        return int((q + Fraction(1, 2)) // 1)
    return -int((-q + Fraction(1, 2)) // 1)


def aa_resolution(L: int, n_max: int) -> Fraction:
    """Shift step for the moment-fitting frequency-marching stage ``n_max``."""
    if 2 * n_max == L - 1:
        return Fraction(1)
    return Fraction(L, 2 * n_max)


def em_resolution(L: int, n_max: int) -> Fraction:
    """Shift step for the EM frequency-marching stage ``n_max``."""
    return max(Fraction(1), Fraction(L, 2 * n_max))


def coarse_length(L: int, delta) -> int:
    ratio = Fraction(L) / Fraction(delta)
    if ratio.denominator != 1:
        raise ValueError(f"L / delta = {ratio} is not an integer")
    return int(ratio)


def window(center: int, delta) -> tuple:
    """Fine indices ``[lo, hi]`` merged into the coarse index ``center``."""
    delta = Fraction(delta)
    lo = max(0, round_half_away((center - Fraction(1, 2)) * delta))
    hi = round_half_away((center + Fraction(1, 2)) * delta) - 1
    return lo, hi


@lru_cache(maxsize=None)
def shift_bins(L: int, delta) -> tuple:
    """Fine-shift bins of each coarse shift ``0 .. L'-1``, clamped to ``[0, L)``."""
    Lc = coarse_length(L, delta)
    bins = []
    for l in range(Lc):
        lo, hi = window(l, delta)
        hi = min(hi, L - 1)
        if lo > hi:
            raise ValueError(f"coarse shift {l} has an empty bin at delta={delta}")
        bins.append((lo, hi))
    return tuple(bins)


@dataclass(frozen=True)
class CoarseStats:
    """Bias-corrected, bin-averaged moments for one frequency-marching stage."""

    b1: float
    b2: np.ndarray
    b3: np.ndarray
    L_coarse: int
    n_max: int
    delta: Fraction
    L: int


def coarsen_measurement(stats: MomentStats, n_max: int, delta=None) -> CoarseStats:
    """Average the noise-corrected moments over bins of width ``delta``.

    ``delta`` defaults to the moment-fitting schedule for ``n_max``.
    """
    L = stats.L
    if not 1 <= n_max <= max(1, (L + 1) // 2):
        raise ValueError("n_max out of range")
    if delta is None:
        delta = aa_resolution(L, n_max)
    delta = Fraction(delta)
    bins = shift_bins(L, delta)
    Lc = len(bins)
    s2 = stats.sigma ** 2

    a2 = stats.a2.copy()
    a2[0] -= s2
    b2 = np.array([a2[lo:hi + 1].mean() for lo, hi in bins])

    a3 = stats.a3_table() - stats.a1 * s2 * unpack_triu(third_order_deltas(L), L)
    c1, c2 = triu_pairs(Lc)
    b3 = np.empty(c1.size)
    for p, (k1, k2) in enumerate(zip(c1.tolist(), c2.tolist())):
        (lo1, hi1), (lo2, hi2) = bins[k1], bins[k2]
        i1, i2 = np.meshgrid(np.arange(lo1, hi1 + 1), np.arange(lo2, hi2 + 1), indexing="ij")
        keep = i1 <= i2
        if not keep.any():
            raise ValueError(f"coarse pair ({k1}, {k2}) has an empty bin")
        b3[p] = a3[i1[keep], i2[keep]].mean()
    return CoarseStats(stats.a1, b2, b3, Lc, n_max, delta, L)


def coarsen_psf(xi: PairSeparationFunction, n_max: int, L: int, delta=None) -> PairSeparationFunction:
    """Mass-preserving rebinning of a gap distribution onto the coarse grid."""
    if delta is None:
        delta = aa_resolution(L, n_max)
    delta = Fraction(delta)
    Lc = coarse_length(L, delta)
    out = []
    i = 0
    while True:
        lo, hi = window(i, delta)
        if lo > xi.max_gap:
            break
        out.append(float(xi.mass[lo:hi + 1].sum()) if hi >= lo else 0.0)
        i += 1
    out = np.array(out)
    return PairSeparationFunction(out / out.sum(), Lc)


def coarsen_rho1(rho1, L: int, delta) -> np.ndarray:
    """Rebin fine cross weights (gaps ``L .. 2L-2``) to coarse gaps ``L' .. 2L'-2``."""
    rho1 = np.asarray(rho1, dtype=np.float64)
    delta = Fraction(delta)
    Lc = coarse_length(L, delta)
    out = np.zeros(max(Lc - 1, 0))
    for i in range(Lc - 1):
        lo, hi = window(i + Lc, delta)
        lo, hi = max(lo, L), min(hi, 2 * L - 2)
        if lo <= hi:
            out[i] = rho1[lo - L:hi - L + 1].sum()
    return out


def refine_rho1(rho1_coarse, previous, L: int, delta) -> np.ndarray:
    """Spread coarse cross weights evenly back over the fine gaps they cover.

    Fine gaps outside every retained coarse window keep ``previous`` values.
    """
    delta = Fraction(delta)
    Lc = coarse_length(L, delta)
    out = np.array(previous, dtype=np.float64, copy=True)
    for i in range(Lc - 1):
        lo, hi = window(i + Lc, delta)
        lo, hi = max(lo, L), min(hi, 2 * L - 2)
        if lo <= hi:
            out[lo - L:hi - L + 1] = rho1_coarse[i] / (hi - lo + 1)
    return out

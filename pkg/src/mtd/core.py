"""Domain types, synthetic data generation and evaluation metrics.

The measurement model is ``y = s * x + noise``: a long 1-D record containing
non-overlapping copies of a short signal ``x`` at unknown start positions,
plus white Gaussian noise of known standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, PlacementError

MAX_CONSECUTIVE_REJECTIONS = 10**6


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; accepts ints, SeedSequences or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def as_signal(values, L: Optional[int] = None) -> np.ndarray:
    """Validate and copy a signal into a read-only float64 vector."""
    x = np.array(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("signal must be non-empty")
    if L is not None and x.size != L:
        raise ValueError(f"signal has length {x.size}, expected {L}")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal entries must be finite")
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class SupportSequence:
    """Sorted start indices of the signal occurrences inside a length-N record."""

    starts: np.ndarray
    N: int
    L: int

    def __post_init__(self):
        s = np.array(self.starts, dtype=np.int64).ravel()
        if s.size:
            if s[0] < 0 or s[-1] > self.N - self.L:
                raise ValueError("occurrence starts must lie in [0, N-L]")
            if s.size > 1 and np.min(np.diff(s)) < self.L:
                raise ValueError("occurrences overlap (gap < L)")
        s.setflags(write=False)
        object.__setattr__(self, "starts", s)

    @property
    def M(self) -> int:
        return int(self.starts.size)

    @property
    def density(self) -> float:
        """Signal density rho0 = M L / N."""
        return self.M * self.L / self.N

    def min_gap(self) -> int:
        if self.M < 2:
            return self.N
        return int(np.min(np.diff(self.starts)))


@dataclass(frozen=True)
class PairSeparationFunction:
    """Distribution of the gap between consecutive occurrence starts.

    ``mass[g]`` is the probability of gap ``g``; the array length bounds the
    largest representable gap.
    """

    mass: np.ndarray
    L: int

    def __post_init__(self):
        m = np.array(self.mass, dtype=np.float64).ravel()
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("pair separation masses must be finite and >= 0")
        if abs(m.sum() - 1.0) > 1e-12:
            raise ValueError(f"pair separation masses sum to {m.sum()!r}, not 1")
        if np.any(m[: self.L] != 0):
            raise ValueError("pair separation must vanish for gaps < L")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @classmethod
    def from_pairs(cls, gaps, masses, L: int) -> "PairSeparationFunction":
        gaps = np.asarray(gaps, dtype=np.int64)
        masses = np.asarray(masses, dtype=np.float64)
        out = np.zeros(int(gaps.max()) + 1 if gaps.size else L + 1)
        np.add.at(out, gaps, masses)
        total = out.sum()
        if total <= 0:
            raise ValueError("pair separation has no mass")
        return cls(out / total, L)

    @property
    def max_gap(self) -> int:
        return self.mass.size - 1

    def __getitem__(self, gap: int) -> float:
        if 0 <= gap < self.mass.size:
            return float(self.mass[gap])
        return 0.0

    def rho1(self, rho0: float) -> np.ndarray:
        """Cross-occurrence weights rho0 * xi[i + L] for i = 0 .. L-2."""
        L = self.L
        return rho0 * np.array([self[i + L] for i in range(L - 1)])


@dataclass(frozen=True)
class DensityParams:
    """Signal density ``rho0`` and the cross-occurrence weights ``rho1``."""

    rho0: float
    rho1: np.ndarray

    def __post_init__(self):
        r1 = np.array(self.rho1, dtype=np.float64).ravel()
        if not 0 < self.rho0 <= 1:
            raise ValueError("rho0 must lie in (0, 1]")
        if np.any(r1 < 0):
            raise ValueError("rho1 entries must be >= 0")
        if r1.sum() > self.rho0 * (1 + 1e-12):
            raise ValueError("sum(rho1) must not exceed rho0")
        r1.setflags(write=False)
        object.__setattr__(self, "rho1", r1)


@dataclass(frozen=True)
class Measurement:
    """A noisy record with its known noise level and optional ground truth."""

    samples: np.ndarray
    L: int
    sigma: float
    signal: Optional[np.ndarray] = field(default=None, compare=False)
    support: Optional[SupportSequence] = field(default=None, compare=False)

    def __post_init__(self):
        y = np.array(self.samples, dtype=np.float64).ravel()
        if y.size < self.L:
            raise ValueError("measurement shorter than the signal")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        y.setflags(write=False)
        object.__setattr__(self, "samples", y)

    @property
    def N(self) -> int:
        return int(self.samples.size)


def generate_support_rejection(N: int, L: int, M: int, W: int, seed,
                               max_rejections: int = MAX_CONSECUTIVE_REJECTIONS,
                               ) -> SupportSequence:
    """Place ``M`` starts in ``[0, N-L]`` with pairwise gaps of at least ``L+W``.

    Candidates are drawn uniformly one at a time and rejected whenever they
    fall closer than ``L+W`` to an already accepted start.

    Raises
    ------
    PlacementError
        If ``max_rejections`` consecutive candidates are rejected.
    """
    if W < 0:
        raise ValueError("W must be >= 0")
    if M < 0 or N < L:
        raise ValueError("need M >= 0 and N >= L")
    rng = make_rng(seed)
    gap = L + W
    n_pos = N - L + 1
    blocked = np.zeros(n_pos, dtype=bool)
    accepted = []
    rejections = 0
    batch = max(1024, 2 * M)
    while len(accepted) < M:
        # consuming a batch in order is the same stream as one-at-a-time draws
        for c in rng.integers(0, n_pos, size=batch).tolist():
            if blocked[c]:
                rejections += 1
                if rejections > max_rejections:
                    raise PlacementError(
                        f"placed {len(accepted)} of {M} occurrences before "
                        f"{max_rejections} consecutive rejections; density too high")
                continue
            rejections = 0
            accepted.append(c)
            blocked[max(0, c - gap + 1): c + gap] = True
            if len(accepted) == M:
                break
    starts = np.sort(np.array(accepted, dtype=np.int64))
    support = SupportSequence(starts, N, L)
    assert support.M < 2 or support.min_gap() >= gap
    return support


def generate_support_from_psf(N: int, L: int, xi: PairSeparationFunction,
                              target_M: int, seed) -> SupportSequence:
    """Chain occurrences with i.i.d. gaps drawn from ``xi``.

    The first start is uniform in ``[0, L)``; the chain stops at ``target_M``
    occurrences or when the next start would pass ``N - L``.
    """
    if target_M < 2:
        raise ValueError("target_M must be >= 2")
    if xi.L != L:
        raise ValueError("pair separation built for a different L")
    rng = make_rng(seed)
    first = int(rng.integers(0, L))
    gaps = rng.choice(xi.mass.size, size=target_M - 1, p=xi.mass)
    starts = first + np.concatenate([[0], np.cumsum(gaps)])
    starts = starts[starts <= N - L]
    if starts.size < 2:
        raise PlacementError("fewer than 2 occurrences fit in the measurement")
    return SupportSequence(starts, N, L)


def convolve_support(support: SupportSequence, x) -> np.ndarray:
    """Noiseless record ``s * x`` as a dense length-N vector."""
    x = as_signal(x, support.L)
    y = np.zeros(support.N)
    if support.M:
        idx = support.starts[:, None] + np.arange(support.L)
        y[idx.ravel()] = np.tile(x, support.M)
    return y


def synthesize(support: SupportSequence, x, sigma: float, seed) -> Measurement:
    """Noisy measurement with ground truth attached."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = as_signal(x, support.L)
    y = convolve_support(support, x)
    if sigma > 0:
        y += make_rng(seed).normal(0.0, sigma, size=support.N)
    return Measurement(y, support.L, float(sigma), signal=x, support=support)


def pair_separation(support: SupportSequence) -> PairSeparationFunction:
    """Empirical gap histogram normalized by ``M - 1``."""
    if support.M < 2:
        raise ValueError("pair separation needs at least 2 occurrences")
    gaps = np.diff(support.starts)
    counts = np.bincount(gaps, minlength=support.L + 1).astype(np.float64)
    return PairSeparationFunction(counts / (support.M - 1), support.L)


def rmse(estimate, truth) -> float:
    """Relative error ||estimate - truth|| / ||truth||, no alignment."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth differ in length")
    norm = np.linalg.norm(truth)
    if norm == 0:
        raise ValueError("truth has zero norm")
    return float(np.linalg.norm(estimate - truth) / norm)


def default_signal() -> np.ndarray:
    """The bundled length-10 test signal (unit RMS, i.e. norm sqrt(L))."""
    from .io import read_signal
    from importlib.resources import files
    return read_signal(files("mtd") / "data" / "signal_L10.txt")


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = max(p.size, q.size)
    p = np.pad(p, (0, n - p.size))
    q = np.pad(q, (0, n - q.size))
    return 0.5 * float(np.abs(p - q).sum())

"""Approximate expectation-maximization over length-L segments.

The record is cut into ``N_d = N // L`` segments. Each segment holds no
occurrence, one occurrence at one of ``2L - 1`` offsets, or (asd mode) two
occurrences in one of ``L(L-1)/2`` configurations. Segments are treated as
independent; the signal and the configuration prior are re-estimated in
turn, first on coarse shift grids and then on the full grid.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional

import numpy as np

from .aa import EstimateReport
from .core import Measurement, make_rng
from .errors import NumericalError
from .moments import coarse_length, coarsen_rho1, em_resolution, refine_rho1, round_half_away

LOG_2PI = float(np.log(2 * np.pi))


# ---------------------------------------------------------------- segments

@dataclass(frozen=True)
class SegmentSet:
    """Non-overlapping length-L windows of a record; the remainder is dropped."""

    segments: np.ndarray  # (N_d, L)
    sigma: float
    L: int

    @classmethod
    def from_measurement(cls, y: Measurement, L: Optional[int] = None) -> "SegmentSet":
        L = y.L if L is None else L
        n_d = y.N // L
        if n_d < 1:
            raise ValueError("record shorter than one segment")
        seg = np.array(y.samples[: n_d * L].reshape(n_d, L))
        seg.setflags(write=False)
        return cls(seg, float(y.sigma), L)

    @property
    def count(self) -> int:
        return int(self.segments.shape[0])


def shift_template(x, l: int) -> np.ndarray:
    """First L entries of the left zero-padded ``x`` circularly shifted by ``l``."""
    x = np.asarray(x, dtype=np.float64)
    L = x.size
    if not 0 <= l < 2 * L:
        raise ValueError(f"shift {l} outside [0, {2 * L})")
    padded = np.concatenate([np.zeros(L), x])
    return padded[(np.arange(L) + l) % (2 * L)]


def _single_sources(L: int, l: int) -> np.ndarray:
    """``src[i]``: signal index shown at window position ``i`` under shift ``l``, or L."""
    k = (np.arange(L) + l) % (2 * L)
    return np.where(k >= L, k - L, L)


def _single_positions(L: int, l: int) -> np.ndarray:
    """``pos[j]``: window index holding ``x[j]`` under shift ``l``, or -1."""
    i = (np.arange(L) + L - l) % (2 * L)
    return np.where(i < L, i, -1)


# ---------------------------------------------------------------- configurations

@dataclass(frozen=True)
class ConfigSet:
    """Segment configurations on one frequency-marching grid.

    Rows ``0 .. 2L'-1`` are single shifts ``round(l' dx)``; the remaining rows
    (asd only) are pairs ``(round(l1' dx), round(l2' dx))``. ``design`` maps
    prior parameters to per-configuration prior masses and ``weights`` are the
    normalization coefficients of those parameters.
    """

    L: int
    L_coarse: int
    delta: Fraction
    mode: str
    singles: np.ndarray      # fine shift of each single row
    pairs: np.ndarray        # (P, 2) fine shifts (l1, l2)
    pos1: np.ndarray         # (C, L) window index of x[j], or -1
    pos2: np.ndarray         # (C, L) second occurrence (pairs), or -1
    src1: np.ndarray         # (C, L) signal index at window position i, or L
    src2: np.ndarray         # (C, L) same for the second occurrence
    design: np.ndarray       # (C, n_params)
    weights: np.ndarray      # (n_params,)

    @property
    def n_configs(self) -> int:
        return int(self.pos1.shape[0])

    @property
    def n_params(self) -> int:
        return int(self.design.shape[1])


@lru_cache(maxsize=None)
def config_set(L: int, delta: Fraction, mode: str) -> ConfigSet:
    _check_mode(mode)
    delta = Fraction(delta)
    Lc = coarse_length(L, delta)
    singles = np.array([round_half_away(l * delta) for l in range(2 * Lc)], dtype=np.intp)
    coarse_pairs = [(l1, l2) for l1 in range(Lc + 1, 2 * Lc) for l2 in range(1, l1 - Lc + 1)]
    if mode == "ws":
        coarse_pairs = []
    pairs = np.array([(round_half_away(a * delta), round_half_away(b * delta))
                      for a, b in coarse_pairs], dtype=np.intp).reshape(-1, 2)
    n_single, n_pair = singles.size, len(coarse_pairs)
    C = n_single + n_pair

    pos1 = np.full((C, L), -1, dtype=np.intp)
    pos2 = np.full((C, L), -1, dtype=np.intp)
    src1 = np.full((C, L), L, dtype=np.intp)
    src2 = np.full((C, L), L, dtype=np.intp)
    for c, l in enumerate(singles.tolist()):
        pos1[c] = _single_positions(L, l)
        src1[c] = _single_sources(L, l)
    for p, (l1, l2) in enumerate(pairs.tolist()):
        pos1[n_single + p] = _single_positions(L, l1)
        pos2[n_single + p] = _single_positions(L, l2)
        src1[n_single + p] = _single_sources(L, l1)
        src2[n_single + p] = _single_sources(L, l2)

    if mode == "ws":
        design = np.eye(n_single)
        weights = np.ones(n_single)
    else:
        # parameters: alpha0, alpha1, rho1[0 .. Lc-2]
        n_params = 2 + Lc - 1
        design = np.zeros((C, n_params))
        design[0, 0] = 1.0
        for l in range(1, 2 * Lc):
            lf = min(l, 2 * Lc - l)
            design[l, 1] = 1.0
            for j in range(2 * Lc - lf, 2 * Lc - 1):
                design[l, 2 + j - Lc] += 1.0 / Lc
        for p, (l1, l2) in enumerate(coarse_pairs):
            design[n_single + p, 2 + l1 - l2 - Lc] = 1.0 / Lc
        weights = np.concatenate([[1.0, 2 * Lc - 1.0],
                                  (np.arange(Lc - 1) + Lc) / Lc])
    for arr in (singles, pairs, pos1, pos2, src1, src2, design, weights):
        arr.setflags(write=False)
    return ConfigSet(L, Lc, delta, mode, singles, pairs, pos1, pos2, src1, src2, design, weights)


# ---------------------------------------------------------------- priors

@dataclass(frozen=True)
class EmPriors:
    """Configuration prior on a grid of ``L_coarse`` shifts.

    ws: ``alpha`` is a simplex vector over the ``2 L_coarse`` single shifts.
    asd: ``alpha0``, ``alpha1`` and ``rho1`` (length ``L_coarse - 1``) derive
    every single and pair prior and satisfy the normalization
    ``alpha0 + (2L'-1) alpha1 + sum_i (i+L')/L' rho1[i] = 1``.
    """

    mode: str
    L_coarse: int
    alpha: Optional[np.ndarray] = None
    alpha0: float = 0.0
    alpha1: float = 0.0
    rho1: Optional[np.ndarray] = None

    def __post_init__(self):
        _check_mode(self.mode)
        Lc = self.L_coarse
        if self.mode == "ws":
            a = np.array(self.alpha, dtype=np.float64).ravel()
            if a.size != 2 * Lc:
                raise ValueError(f"ws prior needs {2 * Lc} entries")
            if np.any(a < 0) or abs(a.sum() - 1) > 1e-12:
                raise ValueError("ws prior must lie on the simplex")
            a.setflags(write=False)
            object.__setattr__(self, "alpha", a)
        else:
            r = np.array(self.rho1 if self.rho1 is not None else np.zeros(Lc - 1),
                         dtype=np.float64).ravel()
            if r.size != Lc - 1:
                raise ValueError(f"rho1 needs {Lc - 1} entries")
            if self.alpha0 < 0 or self.alpha1 < 0 or np.any(r < 0):
                raise ValueError("asd prior parameters must be >= 0")
            r.setflags(write=False)
            object.__setattr__(self, "rho1", r)
            if abs(self.constraint() - 1) > 1e-12:
                raise ValueError(f"asd prior normalization is {self.constraint()!r}, not 1")

    @property
    def params(self) -> np.ndarray:
        if self.mode == "ws":
            return np.array(self.alpha)
        return np.concatenate([[self.alpha0, self.alpha1], self.rho1])

    @classmethod
    def from_params(cls, mode: str, L_coarse: int, theta) -> "EmPriors":
        theta = np.asarray(theta, dtype=np.float64)
        if mode == "ws":
            return cls("ws", L_coarse, alpha=theta)
        return cls("asd", L_coarse, alpha0=float(theta[0]), alpha1=float(theta[1]),
                   rho1=theta[2:])

    @classmethod
    def uniform(cls, mode: str, L_coarse: int) -> "EmPriors":
        """ws: flat simplex; asd: one third of the normalization per block."""
        Lc = L_coarse
        if mode == "ws":
            return cls("ws", Lc, alpha=np.full(2 * Lc, 1.0 / (2 * Lc)))
        w_rho = (np.arange(Lc - 1) + Lc) / Lc
        if Lc == 1:
            return cls("asd", Lc, alpha0=0.5, alpha1=0.5, rho1=np.zeros(0))
        rho1 = np.full(Lc - 1, (1 / 3) / w_rho.sum())
        alpha1 = (1 / 3) / (2 * Lc - 1)
        alpha0 = 1.0 - (2 * Lc - 1) * alpha1 - w_rho @ rho1
        return cls("asd", Lc, alpha0=alpha0, alpha1=alpha1, rho1=rho1)

    def constraint(self) -> float:
        Lc = self.L_coarse
        if self.mode == "ws":
            return float(self.alpha.sum())
        w = (np.arange(Lc - 1) + Lc) / Lc
        return float(self.alpha0 + (2 * Lc - 1) * self.alpha1 + w @ self.rho1)

    def single(self) -> np.ndarray:
        """Prior of each single shift ``0 .. 2L'-1``."""
        if self.mode == "ws":
            return np.array(self.alpha)
        Lc = self.L_coarse
        out = np.empty(2 * Lc)
        out[0] = self.alpha0
        for l in range(1, Lc + 1):
            out[l] = self.alpha1 + self.rho1[Lc - l:].sum() / Lc
        out[Lc + 1:] = out[1:Lc][::-1]
        return out

    def pair(self) -> np.ndarray:
        """Pair prior table ``alpha[l1, l2]`` over coarse shifts (zero off-support)."""
        Lc = self.L_coarse
        out = np.zeros((2 * Lc, 2 * Lc))
        if self.mode == "asd":
            for l1 in range(Lc + 1, 2 * Lc):
                for l2 in range(1, l1 - Lc + 1):
                    out[l1, l2] = self.rho1[l1 - l2 - Lc] / Lc
        return out

    def rho0(self, L: int) -> float:
        """Density implied by the prior of a fully contained occurrence."""
        Lc = self.L_coarse
        return float(self.single()[Lc] * L)

    def to_fine_rho1(self, L: int, previous=None) -> np.ndarray:
        """Cross weights on the full grid (``rho0 * xi``) implied by this prior."""
        if self.mode == "ws":
            return np.zeros(L - 1)
        Lc = self.L_coarse
        delta = Fraction(L, Lc)
        if Lc == L:
            return np.array(self.rho1)
        prev = np.zeros(L - 1) if previous is None else previous
        return refine_rho1(np.asarray(self.rho1) * L / Lc, prev, L, delta)


def _check_mode(mode):
    if mode not in ("ws", "asd"):
        raise ValueError(f"mode must be 'ws' or 'asd', not {mode!r}")


def config_prior(priors: EmPriors, cs: ConfigSet) -> np.ndarray:
    if priors.L_coarse != cs.L_coarse or priors.mode != cs.mode:
        raise ValueError("priors do not match the configuration grid")
    return cs.design @ priors.params


# ---------------------------------------------------------------- E-step

@dataclass(frozen=True)
class PosteriorTable:
    """Per-segment posterior over the configurations of ``configs``."""

    probs: np.ndarray  # (N_d, C)
    configs: ConfigSet
    log_likelihood: float  # of the parameters that produced the table

    def single(self) -> np.ndarray:
        return self.probs[:, : self.configs.singles.size]

    def pair(self) -> np.ndarray:
        return self.probs[:, self.configs.singles.size:]


def _templates(x, cs: ConfigSet) -> np.ndarray:
    """Noiseless window of every configuration, shape ``(C, L)``."""
    x = np.asarray(x, dtype=np.float64)
    xz = np.concatenate([x, [0.0]])
    return xz[cs.src1] + xz[cs.src2]


def _effective_sigma(sigma: float, floor: float) -> float:
    s = max(float(sigma), float(floor))
    if s <= 0:
        raise ValueError("sigma is 0; set a positive sigma floor")
    return s


def _row_terms(x, priors: EmPriors, cs: ConfigSet, sigma: float):
    """Templates and the per-configuration part of the log joint."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    T = _templates(x, cs)
    with np.errstate(divide="ignore"):
        logp = np.log(config_prior(priors, cs))
    inv = 1.0 / (2.0 * sigma * sigma)
    const = -0.5 * cs.L * (LOG_2PI + 2.0 * np.log(sigma))
    return T, logp + const - inv * (T * T).sum(axis=1), inv


def _partial_log_joint(Y, T, col, inv):
    """Log joint without the per-segment ``-|y|^2 / 2 sigma^2`` term."""
    G = Y @ T.T
    G *= 2.0 * inv
    G += col
    return G


def log_joint(segments: SegmentSet, x, priors: EmPriors, cs: ConfigSet,
              sigma: Optional[float] = None) -> np.ndarray:
    """``log p(y_m | c, x) + log prior(c)`` for every segment and configuration."""
    sigma = segments.sigma if sigma is None else sigma
    Y = segments.segments
    T, col, inv = _row_terms(x, priors, cs, sigma)
    G = _partial_log_joint(Y, T, col, inv)
    G -= inv * (Y * Y).sum(axis=1)[:, None]
    return G


def _normalize_rows(G):
    """Turn log joints into posteriors in place; returns per-row log evidence."""
    top = G.max(axis=1)
    if not np.all(np.isfinite(top)):
        raise NumericalError("a segment has zero likelihood under every configuration")
    G -= top[:, None]
    np.exp(G, out=G)
    s = G.sum(axis=1)
    G /= s[:, None]
    return top + np.log(s)


def e_step(segments: SegmentSet, x, priors: EmPriors, cs: Optional[ConfigSet] = None,
           sigma: Optional[float] = None) -> PosteriorTable:
    """Normalized posteriors, computed with per-segment max subtraction."""
    if cs is None:
        cs = config_set(segments.L, Fraction(1), priors.mode)
    G = log_joint(segments, x, priors, cs, sigma)
    ll = float(_normalize_rows(G).sum())
    return PosteriorTable(G, cs, ll)


def log_likelihood(segments: SegmentSet, x, priors: EmPriors, mode: Optional[str] = None,
                   cs: Optional[ConfigSet] = None, sigma: Optional[float] = None) -> float:
    """Sum over segments of the log prior-weighted likelihood mixture."""
    if mode is not None and mode != priors.mode:
        raise ValueError("mode does not match the priors")
    if cs is None:
        cs = config_set(segments.L, Fraction(1), priors.mode)
    sigma = segments.sigma if sigma is None else sigma
    return _sweep(segments, x, priors, cs, sigma)[0]


CHUNK_SEGMENTS = 8192


def _tree_sum(parts):
    """Pairwise reduction in a fixed order, independent of how chunks were computed."""
    parts = list(parts)
    while len(parts) > 1:
        nxt = [tuple(a + b for a, b in zip(parts[i], parts[i + 1]))
               for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _sweep(segments: SegmentSet, x, priors: EmPriors, cs: ConfigSet, sigma: float):
    """One E-step reduced to ``(log_likelihood, P^T Y, posterior mass per config)``."""
    Y = segments.segments
    T, col, inv = _row_terms(x, priors, cs, sigma)
    parts = []
    for lo in range(0, Y.shape[0], CHUNK_SEGMENTS):
        Yc = Y[lo:lo + CHUNK_SEGMENTS]
        G = _partial_log_joint(Yc, T, col, inv)
        ev = _normalize_rows(G)
        ll = ev.sum() - inv * np.einsum("ij,ij->", Yc, Yc)
        parts.append((np.array(ll), G.T @ Yc, G.sum(axis=0)))
    ll, PY, mass = _tree_sum(parts)
    return float(ll), PY, mass


# ---------------------------------------------------------------- M-step

def m_step_signal(segments: SegmentSet, posteriors: PosteriorTable, mode: Optional[str] = None
                  ) -> np.ndarray:
    """Posterior-weighted average of the window samples aligned with each ``x[j]``."""
    PY = posteriors.probs.T @ segments.segments                 # (C, L)
    mass = posteriors.probs.sum(axis=0)                          # (C,)
    return _signal_update(posteriors.configs, PY, mass)


def _signal_update(cs: ConfigSet, PY, mass) -> np.ndarray:
    PYz = np.hstack([PY, np.zeros((PY.shape[0], 1))])
    rows = np.arange(cs.n_configs)[:, None]
    num = (PYz[rows, cs.pos1] + PYz[rows, cs.pos2]).sum(axis=0)
    den = (mass[:, None] * ((cs.pos1 >= 0).astype(float) + (cs.pos2 >= 0))).sum(axis=0)
    zero = np.flatnonzero(den <= 0)
    if zero.size:
        raise NumericalError(f"no posterior mass covers signal entry j={int(zero[0])}")
    return num / den


def m_step_prior_ws(posteriors: PosteriorTable) -> EmPriors:
    """Average single-shift posterior, i.e. the prior maximizing the expected log joint."""
    return _prior_update_ws(posteriors.configs, posteriors.probs.mean(axis=0))


def _prior_update_ws(cs: ConfigSet, weights) -> EmPriors:
    alpha = np.asarray(weights[: 2 * cs.L_coarse], dtype=np.float64)
    return EmPriors("ws", cs.L_coarse, alpha=alpha / alpha.sum())


@dataclass
class FrankWolfeInfo:
    iterations: int
    gap: float
    converged: bool


def frank_wolfe(weights, design, cweights, theta0, tol: float = 1e-10, max_iter: int = 200,
                line_steps: int = 60):
    """Maximize ``sum_c weights[c] log(design[c] @ theta)`` over
    ``{theta >= 0, cweights @ theta = 1}``.

    The feasible set is the simplex with vertices ``e_k / cweights[k]``. Each
    iteration takes the better of the Frank-Wolfe step (towards the vertex of
    largest gradient-to-weight ratio) and the away step (off the active
    vertex of smallest ratio), with an exact line search by bisection on the
    derivative of the concave 1-D slice. Stops when the duality gap is at
    most ``tol``.
    """
    w = np.asarray(weights, dtype=np.float64)
    keep = w > 0
    w = w[keep]
    cw = np.asarray(cweights, dtype=np.float64)
    B = np.asarray(design)[keep] / cw          # columns are the vertices' images
    lam = np.asarray(theta0, dtype=np.float64) * cw
    lam = np.maximum(lam, 0.0)
    lam /= lam.sum()
    gap = np.inf
    it = 0
    for it in range(max_iter + 1):
        a = B @ lam
        if np.any(a <= 0):
            raise NumericalError("Frank-Wolfe iterate left the domain of the objective")
        g = B.T @ (w / a)
        glam = g @ lam
        s = int(np.argmax(g))
        gap = float(g[s] - glam)
        if gap <= tol or it == max_iter:
            break
        active = np.flatnonzero(lam > 0)
        v = int(active[np.argmin(g[active])])
        d = -lam.copy()
        if gap >= glam - g[v] or lam[v] >= 1.0:
            d[s] += 1.0
            t_max = 1.0
        else:
            d = lam.copy()
            d[v] -= 1.0
            t_max = lam[v] / (1.0 - lam[v])
        b = B @ d
        neg = b < 0
        if np.any(neg):
            # stay strictly inside the domain of the logarithms
            t_max = min(t_max, float(np.min(-a[neg] / b[neg])) * (1 - 1e-12))
        if w @ (b / (a + t_max * b)) >= 0:
            t = t_max
        else:
            lo, hi = 0.0, t_max
            for _ in range(line_steps):
                mid = 0.5 * (lo + hi)
                if w @ (b / (a + mid * b)) < 0:
                    hi = mid
                else:
                    lo = mid
            t = lo
        lam = lam + t * d
        lam[lam < 1e-300] = 0.0
        lam /= lam.sum()
    theta = lam / cw
    return theta, FrankWolfeInfo(it, gap, gap <= tol)


def m_step_prior_asd(posteriors: PosteriorTable, previous: Optional[EmPriors] = None,
                     tol: float = 1e-10, max_iter: int = 200):
    """Frank-Wolfe update of ``(alpha0, alpha1, rho1)``; returns ``(priors, info)``.

    The objective is averaged over segments, so ``tol`` is a per-segment gap.
    """
    cs = posteriors.configs
    if cs.mode != "asd":
        raise ValueError("asd prior update needs an asd posterior table")
    return _prior_update_asd(cs, posteriors.probs.mean(axis=0), previous, tol, max_iter)


def _prior_update_asd(cs: ConfigSet, weights, previous, tol, max_iter):
    if previous is None:
        previous = EmPriors.uniform("asd", cs.L_coarse)
    theta0 = previous.params
    if np.any(cs.design[weights > 0] @ theta0 <= 0):
        theta0 = EmPriors.uniform("asd", cs.L_coarse).params
    theta, info = frank_wolfe(weights, cs.design, cs.weights, theta0, tol, max_iter)
    theta = np.maximum(theta, 0.0)
    theta = theta / (cs.weights @ theta)
    return EmPriors.from_params("asd", cs.L_coarse, theta), info


# ---------------------------------------------------------------- driver

@dataclass(frozen=True)
class EmConfig:
    restarts: int = 10
    schedule: Optional[tuple] = None  # n_max values; default 1 .. floor((L+1)/2)
    tol: float = 1e-6                 # relative change of x between iterations
    max_iter: int = 1000              # per stage
    fw_tol: float = 1e-10
    fw_max_iter: int = 200
    sigma_floor: float = 0.5          # fraction of the record RMS; used when above sigma
    shift_polish: int = 2             # also refine from the winner shifted by up to this many samples

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.tol <= 0 or self.fw_tol <= 0 or self.max_iter < 1:
            raise ValueError("tolerances and iteration caps must be positive")
        if self.schedule is not None:
            object.__setattr__(self, "schedule", tuple(self.schedule))

    def stages(self, L: int) -> tuple:
        return self.schedule if self.schedule is not None else tuple(range(1, (L + 1) // 2 + 1))


def _transfer_priors(priors: EmPriors, L: int, Lc_new: int, rho1_fine) -> EmPriors:
    """Carry a prior to a new grid: keep alpha0, rebin rho1, renormalize via alpha1."""
    if priors.mode == "ws":
        a0 = float(priors.alpha[0])
        rest = np.full(2 * Lc_new - 1, (1 - a0) / (2 * Lc_new - 1))
        return EmPriors("ws", Lc_new, alpha=np.concatenate([[a0], rest]))
    delta = Fraction(L, Lc_new)
    r = np.asarray(rho1_fine, dtype=np.float64)
    if Lc_new < L:
        r = coarsen_rho1(r, L, delta) * Lc_new / L
    w = (np.arange(Lc_new - 1) + Lc_new) / Lc_new
    a0 = min(max(priors.alpha0, 1e-6), 1 - 1e-6)
    budget = 1.0 - a0
    if w @ r > 0.5 * budget:
        r = r * (0.5 * budget / (w @ r))
    alpha1 = (budget - w @ r) / (2 * Lc_new - 1)
    total = a0 + (2 * Lc_new - 1) * alpha1 + w @ r
    return EmPriors("asd", Lc_new, alpha0=a0 / total, alpha1=alpha1 / total, rho1=r / total)


def _run_stage(segments: SegmentSet, cs: ConfigSet, cfg: EmConfig, x, priors: EmPriors,
               sigma: float, trace: Optional[list], label: int):
    """EM iterations on one grid until the relative change of x drops below tol."""
    fw_flags = []
    it = 0
    for it in range(1, cfg.max_iter + 1):
        ll, PY, mass = _sweep(segments, x, priors, cs, sigma)
        x_new = _signal_update(cs, PY, mass)
        weights = mass / segments.count
        if cs.mode == "ws":
            priors = _prior_update_ws(cs, weights)
        else:
            priors, info = _prior_update_asd(cs, weights, priors, cfg.fw_tol, cfg.fw_max_iter)
            if not info.converged:
                fw_flags.append((label, it, info.gap))
        if not np.all(np.isfinite(x_new)):
            raise NumericalError("EM produced a non-finite signal")
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300)
        x = x_new
        if trace is not None:
            trace.append((label, it, ll, change))
        if change < cfg.tol:
            break
    ll = log_likelihood(segments, x, priors, cs=cs, sigma=sigma)
    return x, priors, ll, it, fw_flags


def _working_sigma(segments: SegmentSet, cfg: EmConfig) -> float:
    rms = float(np.sqrt(np.mean(segments.segments ** 2)))
    return _effective_sigma(segments.sigma, cfg.sigma_floor * rms)


def fit_single(segments: SegmentSet, mode: str, cfg: EmConfig, x0, trace: Optional[list] = None):
    """Frequency-marched EM from one starting signal.

    Returns ``(x, priors, log_likelihood, stage_lls, iterations, fw_flags)``;
    the log-likelihood is evaluated on the full grid.
    """
    L = segments.L
    sigma = _working_sigma(segments, cfg)
    x = np.array(x0, dtype=np.float64)
    priors, rho1_fine = None, np.zeros(L - 1)
    stage_lls, iterations, fw_flags = [], 0, []
    for n_max in cfg.stages(L):
        cs = config_set(L, em_resolution(L, n_max), mode)
        if priors is None:
            priors = EmPriors.uniform(mode, cs.L_coarse)
        elif priors.L_coarse != cs.L_coarse:
            priors = _transfer_priors(priors, L, cs.L_coarse, rho1_fine)
        x, priors, ll, its, flags = _run_stage(segments, cs, cfg, x, priors, sigma, trace, n_max)
        stage_lls.append(ll)
        iterations += its
        fw_flags += flags
        rho1_fine = priors.to_fine_rho1(L, rho1_fine)
    full = config_set(L, Fraction(1), mode)
    if priors is None:
        priors = EmPriors.uniform(mode, L)
    elif priors.L_coarse != L:
        priors = _transfer_priors(priors, L, L, rho1_fine)
    final_ll = log_likelihood(segments, x, priors, cs=full, sigma=sigma)
    return x, priors, final_ll, stage_lls, iterations, fw_flags


def polish_shifts(segments: SegmentSet, cfg: EmConfig, x, priors: EmPriors, ll: float,
                  trace: Optional[list] = None):
    """Full-grid EM from integer shifts of ``x`` while that raises the likelihood."""
    from .aa import shift_signal
    L = segments.L
    sigma = _working_sigma(segments, cfg)
    full = config_set(L, Fraction(1), priors.mode)
    iterations = 0
    improved = True
    while improved:
        improved = False
        for k in [s for m in range(1, cfg.shift_polish + 1) for s in (m, -m)]:
            if abs(k) >= L:
                continue
            xs, ps, lls, its, _ = _run_stage(segments, full, cfg, shift_signal(x, k), priors,
                                             sigma, trace, 0)
            iterations += its
            if lls > ll + 1e-9 * abs(ll):
                x, priors, ll = xs, ps, lls
                improved = True
                break
    return x, priors, ll, iterations


@dataclass
class EmReport(EstimateReport):
    priors: Optional[EmPriors] = field(default=None, compare=False)
    log_likelihood: float = 0.0


def estimate_em(y: Measurement, mode: str = "asd", cfg: EmConfig = EmConfig(), seed=0,
                trace_path=None) -> EstimateReport:
    """Best of ``cfg.restarts`` random starts, ranked by final log-likelihood.

    ``final_cost`` of the report is the negative log-likelihood.
    """
    _check_mode(mode)
    if y.N < 2 * y.L:
        raise ValueError("need N >= 2L")
    start = time.perf_counter()
    segments = SegmentSet.from_measurement(y)
    L = segments.L
    best, costs, failures, rows = None, [], [], []
    for r, ss in enumerate(np.random.SeedSequence(seed).spawn(cfg.restarts)):
        rng = make_rng(ss)
        x0 = rng.standard_normal(L)
        x0 *= np.sqrt(L) / np.linalg.norm(x0)
        trace = [] if trace_path is not None else None
        try:
            out = fit_single(segments, mode, cfg, x0, trace)
        except (NumericalError, FloatingPointError) as exc:
            failures.append((r, str(exc)))
            costs.append(np.inf)
            continue
        if trace is not None:
            rows.extend((r,) + t for t in trace)
        costs.append(-out[2])
        if best is None or -out[2] < best[1]:
            best = (r, -out[2], out)
    if best is None:
        raise NumericalError(f"all {cfg.restarts} restarts failed: {failures}")
    r, _, (x, priors, ll, stage_lls, iterations, fw_flags) = best
    if cfg.shift_polish:
        x, priors, polished, its = polish_shifts(segments, cfg, x, priors, ll)
        iterations += its
        if polished > ll:
            ll = polished
            stage_lls = stage_lls + [polished]
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["restart", "n_max", "iteration", "log_likelihood", "rel_change"])
            wr.writerows([rr, n, i, repr(float(l)), repr(float(c))] for rr, n, i, l, c in rows)
    rho1 = priors.to_fine_rho1(L) if mode == "asd" else np.zeros(L - 1)
    return EmReport(np.asarray(x), priors.rho0(L), rho1, -ll, [-v for v in stage_lls],
                    iterations, time.perf_counter() - start, r, "em", mode, costs,
                    {"failures": failures, "frank_wolfe_unconverged": fw_flags},
                    priors=priors, log_likelihood=ll)


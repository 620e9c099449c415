"""Signal estimation by fitting measurement autocorrelations.

The unknowns are the signal ``x``, the density ``rho0`` and, when occurrences
may sit closer than ``2L-1`` apart, the cross weights ``rho1``. The fit is a
weighted nonlinear least-squares problem solved with bound-constrained
quasi-Newton steps inside a coarse-to-fine (frequency marching) schedule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .core import make_rng
from .errors import NumericalError
from .moments import (CoarseStats, MomentStats, aa_resolution, coarsen_measurement,
                      coarsen_rho1, refine_rho1, round_half_away, third_order_deltas,
                      triu_pairs)


# ---------------------------------------------------------------- model tables

@dataclass(frozen=True)
class _Tables:
    """Sparse description of the moment model on an ``Lm``-shift grid.

    Order-2 entry ``e`` adds ``rho[r2[e]] * ax2[s2[e]]`` to model entry
    ``p2[e]``; order 3 likewise with ``ax3[s3a[e], s3b[e]]``. ``rho[0]`` is
    the density, ``rho[1 + i]`` the cross weight of grid gap ``Lm + i``.
    """

    Lm: int
    L: int
    p2: np.ndarray
    r2: np.ndarray
    s2: np.ndarray
    p3: np.ndarray
    r3: np.ndarray
    s3: np.ndarray  # flattened index s3a * L + s3b
    deltas3: np.ndarray
    n_rho: int


@lru_cache(maxsize=None)
def _tables(Lm: int, delta: Fraction, L: int, cross: bool) -> _Tables:
    fine = [round_half_away(s * delta) for s in range(Lm)]
    p2, r2, s2 = [], [], []
    for l in range(Lm):
        p2.append(l), r2.append(0), s2.append(fine[l])
        if cross:
            for j in range(Lm, Lm + l):
                p2.append(l), r2.append(1 + j - Lm), s2.append(fine[j - l])
    p3, r3, s3 = [], [], []
    l1s, l2s = triu_pairs(Lm)
    for p, (l1, l2) in enumerate(zip(l1s.tolist(), l2s.tolist())):
        p3.append(p), r3.append(0), s3.append(fine[l1] * L + fine[l2])
        if cross:
            for j in range(Lm, Lm + l2 - l1):
                p3.append(p), r3.append(1 + j - Lm)
                s3.append(fine[j - l2] * L + fine[j + l1 - l2])
            for j in range(Lm, Lm + l1):
                p3.append(p), r3.append(1 + j - Lm)
                s3.append(fine[l2 - l1] * L + fine[j - l1])
    arr = lambda v: np.array(v, dtype=np.intp)
    return _Tables(Lm, L, arr(p2), arr(r2), arr(s2), arr(p3), arr(r3), arr(s3),
                   third_order_deltas(Lm), Lm)


@lru_cache(maxsize=None)
def _signal_index(L: int):
    a = np.arange(L)
    k = np.arange(L)
    fwd = L + a[:, None] + k[None, :]            # x[k + a]
    bwd = L + k[None, :] - a[:, None]            # x[k - a]
    A, B, K = np.meshgrid(a, a, k, indexing="ij")
    mixed_ab = L + K - A + B                     # x[k - a + b]
    mixed_ba = L + K - B + A                     # x[k - b + a]
    return fwd, bwd, mixed_ab, mixed_ba


def _signal_derivatives(x: np.ndarray):
    """a1, a2, a3 over non-negative shifts < L, and their Jacobians in x."""
    L = x.size
    fwd, bwd, mixed_ab, mixed_ba = _signal_index(L)
    xp = np.concatenate([np.zeros(L), x, np.zeros(2 * L)])
    S = xp[fwd]
    Bk = xp[bwd]
    a2 = S @ x / L
    J2 = (S + Bk) / L
    a3 = np.einsum("i,ai,bi->ab", x, S, S) / L
    J3 = (S[:, None, :] * S[None, :, :]
          + Bk[:, None, :] * xp[mixed_ab]
          + Bk[None, :, :] * xp[mixed_ba]) / L
    return x.sum() / L, a2, J2, a3, J3


def _evaluate(x, rho, d1, d2, d3, tab: _Tables, bias_sigma2: float):
    """Weighted least-squares value and gradients w.r.t. ``x`` and ``rho``."""
    L, Lm = tab.L, tab.Lm
    a1x, a2x, J2, a3x, J3 = _signal_derivatives(x)
    a3f = a3x.ravel()

    m1 = rho[0] * a1x
    t2 = a2x[tab.s2]
    t3 = a3f[tab.s3]
    m2 = np.bincount(tab.p2, rho[tab.r2] * t2, minlength=Lm)
    m3 = np.bincount(tab.p3, rho[tab.r3] * t3, minlength=d3.size)
    if bias_sigma2:
        m2[0] += bias_sigma2
        m3 = m3 + rho[0] * a1x * bias_sigma2 * tab.deltas3

    w2 = 1.0 / Lm
    w3 = 2.0 / (Lm * (Lm + 1))
    r1 = d1 - m1
    r2 = d2 - m2
    r3 = d3 - m3
    value = r1 * r1 + w2 * (r2 @ r2) + w3 * (r3 @ r3)

    g1 = -2.0 * r1
    g2 = -2.0 * w2 * r2
    g3 = -2.0 * w3 * r3
    grho = (np.bincount(tab.r2, g2[tab.p2] * t2, minlength=tab.n_rho)
            + np.bincount(tab.r3, g3[tab.p3] * t3, minlength=tab.n_rho))
    G1 = g1 * rho[0]
    grho[0] += g1 * a1x
    if bias_sigma2:
        bias_sum = bias_sigma2 * (g3 @ tab.deltas3)
        grho[0] += a1x * bias_sum
        G1 += rho[0] * bias_sum
    G2 = np.bincount(tab.s2, g2[tab.p2] * rho[tab.r2], minlength=L)
    G3 = np.bincount(tab.s3, g3[tab.p3] * rho[tab.r3], minlength=L * L)
    gx = G1 / L + G2 @ J2 + G3 @ J3.reshape(L * L, L)
    return float(value), gx, grho


def _check_stats(x, stats):
    if x.size != stats.L:
        raise ValueError(f"signal length {x.size} does not match stats L={stats.L}")


def cost_ws(x, rho0: float, stats: MomentStats):
    """Well-separated least-squares cost; gradient ordered as ``(x, rho0)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_stats(x, stats)
    tab = _tables(stats.L, Fraction(1), stats.L, False)
    rho = np.zeros(tab.n_rho)
    rho[0] = rho0
    value, gx, grho = _evaluate(x, rho, stats.a1, stats.a2, stats.a3, tab, stats.sigma ** 2)
    return value, np.concatenate([gx, grho[:1]])


def cost_asd(x, rho0: float, rho1, stats: MomentStats):
    """Arbitrary-spacing least-squares cost; gradient ordered as ``(x, rho0, rho1)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_stats(x, stats)
    tab = _tables(stats.L, Fraction(1), stats.L, True)
    rho = np.concatenate([[rho0], np.asarray(rho1, dtype=np.float64)])
    if rho.size != tab.n_rho:
        raise ValueError("rho1 must have length L-1")
    value, gx, grho = _evaluate(x, rho, stats.a1, stats.a2, stats.a3, tab, stats.sigma ** 2)
    return value, np.concatenate([gx, grho])


# ---------------------------------------------------------------- Fourier stages

@lru_cache(maxsize=None)
def fourier_basis(L: int, n_max: int) -> np.ndarray:
    """Columns: 1, cos(2 pi n l / L) for n = 1..n_max, then the sines."""
    l = np.arange(L)[:, None]
    n = np.arange(1, n_max + 1)[None, :]
    basis = np.hstack([np.ones((L, 1)), np.cos(2 * np.pi * n * l / L),
                       np.sin(2 * np.pi * n * l / L)])
    basis.setflags(write=False)
    return basis


@dataclass(frozen=True)
class FourierParams:
    """Low-order Fourier description of a length-L signal."""

    c: np.ndarray  # c_0 .. c_{n_max}
    d: np.ndarray  # d_1 .. d_{n_max}
    L: int
    n_max: int

    def __post_init__(self):
        c = np.array(self.c, dtype=np.float64).ravel()
        d = np.array(self.d, dtype=np.float64).ravel()
        if c.size != self.n_max + 1 or d.size != self.n_max:
            raise ValueError("coefficient counts do not match n_max")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.c, self.d])

    @classmethod
    def from_coefficients(cls, coef, L: int, n_max: int) -> "FourierParams":
        coef = np.asarray(coef, dtype=np.float64)
        return cls(coef[:n_max + 1], coef[n_max + 1:], L, n_max)

    @classmethod
    def fit(cls, x, n_max: int) -> "FourierParams":
        """Least-squares projection of ``x`` onto the order-``n_max`` basis."""
        x = np.asarray(x, dtype=np.float64)
        coef, *_ = np.linalg.lstsq(fourier_basis(x.size, n_max), x, rcond=None)
        return cls.from_coefficients(coef, x.size, n_max)

    def synthesize(self) -> np.ndarray:
        return fourier_basis(self.L, self.n_max) @ self.coefficients


def coarse_cost(fp: FourierParams, rho0: float, rho1_coarse, cstats: CoarseStats,
                cross: bool = True):
    """Coarse-grid least squares in Fourier coordinates.

    Gradient is ordered as ``(c, d, rho0, rho1_coarse)``; with ``cross=False``
    the cross weights are ignored and the gradient stops at ``rho0``.
    """
    if fp.n_max != cstats.n_max or fp.L != cstats.L:
        raise ValueError("Fourier order or length does not match the coarse stats")
    tab = _tables(cstats.L_coarse, cstats.delta, cstats.L, cross)
    rho = np.zeros(tab.n_rho)
    rho[0] = rho0
    if cross:
        rho[1:] = rho1_coarse
    basis = fourier_basis(fp.L, fp.n_max)
    x = basis @ fp.coefficients
    value, gx, grho = _evaluate(x, rho, cstats.b1, cstats.b2, cstats.b3, tab, 0.0)
    grad = np.concatenate([basis.T @ gx, grho if cross else grho[:1]])
    return value, grad


# ---------------------------------------------------------------- optimizer

@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    projected_grad_norm: float
    n_iter: int
    converged: bool
    costs: list = field(default_factory=list)  # cost of every accepted iterate, init first


def projected_gradient(x, g, lower, upper=None) -> np.ndarray:
    pg = np.array(g, dtype=np.float64, copy=True)
    pg[(x <= lower) & (pg > 0)] = 0.0
    if upper is not None:
        pg[(x >= upper) & (pg < 0)] = 0.0
    return pg


def minimize(fun: Callable, x0, lower=None, gtol: float = 1e-8, max_iter: int = 500,
             upper=None) -> MinimizeResult:
    """Bound-constrained minimization of a smooth ``fun(x) -> (value, grad)``.

    Limited-memory quasi-Newton steps with a projected line search (L-BFGS-B);
    iterates never leave ``lower <= x <= upper`` and the cost never increases.
    Convergence is judged on the max-norm of the projected gradient.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lower = np.full(x0.size, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    upper = np.full(x0.size, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    x0 = np.clip(x0, lower, upper)
    f0, g0 = fun(x0)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise NumericalError("non-finite cost at the initial point")
    pg0 = np.linalg.norm(projected_gradient(x0, g0, lower, upper), np.inf)
    if pg0 <= gtol:
        return MinimizeResult(x0, float(f0), float(pg0), 0, True, [float(f0)])

    cache = {}

    def wrapped(z):
        f, g = fun(z)
        cache["x"], cache["f"], cache["g"] = z.copy(), f, g
        return f, g

    costs = [float(f0)]

    def record(z):
        if "x" in cache and np.array_equal(z, cache["x"]):
            costs.append(float(cache["f"]))
        else:
            costs.append(float(fun(z)[0]))

    bounds = [(lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
              for lo, hi in zip(lower, upper)]
    res = optimize.minimize(wrapped, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            callback=record,
                            options=dict(maxiter=max_iter, gtol=gtol, ftol=1e-300, maxcor=30,
                                         maxls=50))
    x = np.clip(res.x, lower, upper)
    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericalError("optimizer produced a non-finite cost")
    if f > costs[-1]:
        # L-BFGS-B reports its best point; keep the record monotone
        f = costs[-1]
    pg = float(np.linalg.norm(projected_gradient(x, g, lower, upper), np.inf))
    return MinimizeResult(x, float(f), pg, int(res.nit), pg <= gtol, costs)


# ---------------------------------------------------------------- driver

@dataclass(frozen=True)
class AaConfig:
    restarts: int = 10
    schedule: Optional[tuple] = None  # n_max values; default 1 .. floor(L/2)
    gtol: float = 1e-8
    max_iter: int = 500
    refine: bool = True
    shift_polish: int = 2  # also refine from the winner shifted by up to this many samples
    density_box: bool = True  # cap rho0 and every rho1 entry at 1, not only at 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.schedule is not None:
            s = tuple(self.schedule)
            if any(b <= a for a, b in zip(s, s[1:])) or (s and s[0] < 1):
                raise ValueError("schedule must be strictly increasing and >= 1")
            object.__setattr__(self, "schedule", s)

    def stages(self, L: int) -> tuple:
        return self.schedule if self.schedule is not None else tuple(range(1, L // 2 + 1))


@dataclass
class EstimateReport:
    """Outcome of a (multi-restart) estimation run."""

    x_hat: np.ndarray
    rho0_hat: float
    rho1_hat: np.ndarray
    final_cost: float
    stage_costs: list
    iterations: int
    wall_time: float = field(default=0.0, compare=False)
    restart: int = 0
    method: str = "aa"
    mode: str = "ws"
    restart_costs: list = field(default_factory=list)
    extras: dict = field(default_factory=dict, compare=False)


def _initial_point(rng, L: int, mode: str):
    x = rng.standard_normal(L)
    x *= np.sqrt(L) / np.linalg.norm(x)
    rho0 = rng.uniform(0.1, 0.9)
    rho1 = np.zeros(L - 1)
    if mode == "asd" and L > 1:
        w = rng.uniform(0.0, 1.0, L - 1) + 1e-3
        rho1 = w / w.sum() * rho0 / 2
    return x, rho0, rho1


def _bounds(n_free: int, n_density: int, cfg: AaConfig):
    lower = np.concatenate([np.full(n_free, -np.inf), np.zeros(n_density)])
    cap = 1.0 if cfg.density_box else np.inf
    upper = np.concatenate([np.full(n_free, np.inf), np.full(n_density, cap)])
    return lower, upper


def _check_mode(mode):
    if mode not in ("ws", "asd"):
        raise ValueError(f"mode must be 'ws' or 'asd', not {mode!r}")


def fit_single(stats: MomentStats, mode: str, cfg: AaConfig, x0, rho0, rho1,
               trace: Optional[list] = None):
    """Frequency marching from one starting point, then a full-grid refinement."""
    _check_mode(mode)
    L = stats.L
    cross = mode == "asd"
    x, rho1 = np.array(x0, dtype=np.float64), np.array(rho1, dtype=np.float64)
    stage_costs, iterations = [], 0

    for n_max in cfg.stages(L):
        delta = aa_resolution(L, n_max)
        cstats = coarsen_measurement(stats, n_max, delta)
        Lc = cstats.L_coarse
        n_coef = 2 * n_max + 1
        coef0 = FourierParams.fit(x, n_max).coefficients
        r1c = coarsen_rho1(rho1, L, delta) if cross else np.zeros(0)
        theta0 = np.concatenate([coef0, [rho0], r1c])
        lower, upper = _bounds(n_coef, 1 + r1c.size, cfg)

        def fun(theta, n_max=n_max, cstats=cstats):
            fp = FourierParams.from_coefficients(theta[:n_coef], L, n_max)
            return coarse_cost(fp, theta[n_coef], theta[n_coef + 1:], cstats, cross)

        res = minimize(fun, theta0, lower, cfg.gtol, cfg.max_iter, upper)
        x = fourier_basis(L, n_max) @ res.x[:n_coef]
        rho0 = float(res.x[n_coef])
        if cross and Lc > 1:
            rho1 = refine_rho1(res.x[n_coef + 1:], rho1, L, delta)
        stage_costs.append(res.fun)
        iterations += res.n_iter
        if trace is not None:
            trace.append(("stage", n_max, res.costs))

    if cfg.refine or not cfg.stages(L):
        theta0 = np.concatenate([x, [rho0], rho1 if cross else []])
        lower, upper = _bounds(L, 1 + (L - 1 if cross else 0), cfg)
        if cross:
            fun = lambda t: cost_asd(t[:L], t[L], t[L + 1:], stats)
        else:
            fun = lambda t: cost_ws(t[:L], t[L], stats)
        res = minimize(fun, theta0, lower, cfg.gtol, cfg.max_iter, upper)
        x, rho0 = res.x[:L], float(res.x[L])
        if cross:
            rho1 = res.x[L + 1:]
        stage_costs.append(res.fun)
        iterations += res.n_iter
        if trace is not None:
            trace.append(("refine", L, res.costs))
    final = cost_asd(x, rho0, rho1, stats)[0] if cross else cost_ws(x, rho0, stats)[0]
    return x, rho0, (rho1 if cross else np.zeros(L - 1)), float(final), stage_costs, iterations


def shift_signal(x, k: int) -> np.ndarray:
    """Linear shift by ``k`` samples (positive moves content right), zero-filled."""
    out = np.zeros_like(x)
    if k >= 0:
        out[k:] = x[:x.size - k]
    else:
        out[:k] = x[-k:]
    return out


def polish_shifts(stats: MomentStats, mode: str, cfg: AaConfig, x, rho0, rho1, cost):
    """Refine from integer shifts of ``x`` while that lowers the full-grid cost.

    Frequency marching tends to settle on a copy of the signal displaced by a
    sample or two; those basins are adjacent to the true one only via shifts.
    """
    L = stats.L
    cross = mode == "asd"
    lower, upper = _bounds(L, 1 + (L - 1 if cross else 0), cfg)
    if cross:
        fun = lambda t: cost_asd(t[:L], t[L], t[L + 1:], stats)
    else:
        fun = lambda t: cost_ws(t[:L], t[L], stats)
    improved = True
    while improved:
        improved = False
        for k in [s for m in range(1, cfg.shift_polish + 1) for s in (m, -m)]:
            if k >= L or -k >= L:
                continue
            theta0 = np.concatenate([shift_signal(x, k), [rho0], rho1 if cross else []])
            res = minimize(fun, theta0, lower, cfg.gtol, cfg.max_iter, upper)
            if res.fun < cost * (1 - 1e-9):
                x, rho0, cost = res.x[:L], float(res.x[L]), res.fun
                if cross:
                    rho1 = res.x[L + 1:]
                improved = True
                break
    return x, rho0, rho1, cost


def estimate_aa(stats: MomentStats, mode: str = "asd", cfg: AaConfig = AaConfig(),
                seed=0) -> EstimateReport:
    """Best of ``cfg.restarts`` random starts, ranked by final cost."""
    _check_mode(mode)
    start = time.perf_counter()
    seeds = np.random.SeedSequence(seed).spawn(cfg.restarts)
    best, costs, failures = None, [], []
    for r, ss in enumerate(seeds):
        rng = make_rng(ss)
        x0, rho0, rho1 = _initial_point(rng, stats.L, mode)
        try:
            out = fit_single(stats, mode, cfg, x0, rho0, rho1)
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
            failures.append((r, str(exc)))
            costs.append(np.inf)
            continue
        costs.append(out[3])
        if best is None or out[3] < best[1][3]:
            best = (r, out)
    if best is None:
        raise NumericalError(f"all {cfg.restarts} restarts failed: {failures}")
    r, (x, rho0, rho1, final, stage_costs, iterations) = best
    if cfg.shift_polish:
        x, rho0, rho1, polished = polish_shifts(stats, mode, cfg, x, rho0, rho1, final)
        if polished < final:
            final = polished
            stage_costs = stage_costs + [polished]
    return EstimateReport(np.asarray(x), rho0, np.asarray(rho1), final, stage_costs, iterations,
                          time.perf_counter() - start, r, "aa", mode, costs,
                          {"failures": failures})

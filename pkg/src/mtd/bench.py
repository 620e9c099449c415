"""RMSE-versus-noise sweeps.

A sweep runs every configured method on fresh synthetic data for each
(sigma, trial) cell and writes, into an output directory:

``raw.csv``
    method, sigma_index, sigma, trial, status, rmse, rho0_error, rho1_rmse,
    objective, detail. Sorted by (method order, sigma_index, trial).
``aggregate.csv``
    method, sigma_index, sigma, n_ok, mean_rmse, mean_rho0_error,
    mean_rho1_rmse, over rows with status ``ok``.
``slopes.csv``
    method, log10_sigma_lo, log10_sigma_hi, n_points, slope: least-squares
    slope of log10(mean_rmse) against log10(sigma) over grid points inside
    each configured range.
``timing.csv``
    method, sigma_index, trial, seconds. Kept apart so the three files above
    are byte-identical across runs.

Empty fields mean "not applicable". Seeds: the data of cell (i, t) comes
from ``derive_seed(seed, "data", i, t)`` and method ``m`` is seeded with
``derive_seed(seed, m, i, t)``.
"""

from __future__ import annotations

import csv
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .aa import AaConfig, estimate_aa
from .baselines import deconv_estimate, known_support_estimate, oracle_distances
from .core import (default_signal, generate_support_from_psf, generate_support_rejection,
                   pair_separation, rmse, synthesize)
from .em import EmConfig, estimate_em
from .errors import DataError, MtdError
from .io import read_keyvalue, read_psf, read_signal
from .moments import measurement_moments

METHODS = ("aa", "em", "deconv", "known-s", "aa-ws-on-asd", "em-ws-on-asd")
RAW_HEADER = ["method", "sigma_index", "sigma", "trial", "status", "rmse", "rho0_error",
              "rho1_rmse", "objective", "detail"]
AGG_HEADER = ["method", "sigma_index", "sigma", "n_ok", "mean_rmse", "mean_rho0_error",
              "mean_rho1_rmse"]
SLOPE_HEADER = ["method", "log10_sigma_lo", "log10_sigma_hi", "n_points", "slope"]
TIMING_HEADER = ["method", "sigma_index", "trial", "seconds"]
WORKERS_ENV = "MTD_WORKERS"

MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, tag: str, sigma_index: int, trial: int) -> int:
    """Fold (tag, sigma index, trial) into ``base`` with splitmix64 rounds."""
    z = _splitmix64(int(base) & MASK64)
    for part in (zlib.crc32(tag.encode()), sigma_index, trial):
        z = _splitmix64(z ^ (int(part) & MASK64))
    return z


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class BenchConfig:
    """Sweep description; see ``read_config`` for the file keys."""

    sigma_grid: tuple
    trials: int = 20
    N: int = 10**6
    L: int = 10
    rho0: float = 0.3
    mode: str = "ws"
    W: Optional[int] = None          # default L-1 (ws) or 0 (asd)
    psf_file: Optional[str] = None   # asd data from this gap law instead of rejection
    signal_file: Optional[str] = None
    methods: tuple = ("aa", "known-s")
    seed: int = 0
    restarts: int = 10
    slope_ranges: tuple = ()         # (log10 lo, log10 hi) pairs
    em_max_iter: int = 1000

    def __post_init__(self):
        grid = tuple(float(s) for s in self.sigma_grid)
        if not grid:
            raise ValueError("sigma_grid must be non-empty")
        if any(s < 0 for s in grid):
            raise ValueError("sigma values must be >= 0")
        object.__setattr__(self, "sigma_grid", grid)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.mode not in ("ws", "asd"):
            raise ValueError("mode must be ws or asd")
        methods = tuple(self.methods)
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if len(set(methods)) != len(methods):
            raise ValueError("methods must be distinct")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "slope_ranges",
                           tuple((float(a), float(b)) for a, b in self.slope_ranges))
        if not 0 < self.rho0 <= 1 or self.N < 2 * self.L:
            raise ValueError("need 0 < rho0 <= 1 and N >= 2L")

    @property
    def gap_extra(self) -> int:
        if self.W is not None:
            return int(self.W)
        return self.L - 1 if self.mode == "ws" else 0

    @property
    def M(self) -> int:
        return int(round(self.rho0 * self.N / self.L))


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def parse_ranges(text: str):
    """``"-1:-0.5 0.2:0.6"`` -> ((-1.0, -0.5), (0.2, 0.6))."""
    out = []
    for part in text.replace(",", " ").split():
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"range {part!r} is not lo:hi")
        out.append((float(lo), float(hi)))
    return tuple(out)


CONFIG_KEYS = {
    "sigma_grid": ("sigma_grid", _floats),
    "log10_sigma_grid": ("sigma_grid", lambda t: [10.0 ** v for v in _floats(t)]),
    "trials": ("trials", int),
    "N": ("N", int),
    "L": ("L", int),
    "rho0": ("rho0", float),
    "mode": ("mode", str),
    "W": ("W", int),
    "psf_file": ("psf_file", str),
    "signal_file": ("signal_file", str),
    "methods": ("methods", lambda t: t.replace(",", " ").split()),
    "seed": ("seed", int),
    "restarts": ("restarts", int),
    "slopes": ("slope_ranges", parse_ranges),
    "em_max_iter": ("em_max_iter", int),
}


def read_config(path, overrides: Optional[dict] = None) -> BenchConfig:
    """Parse a ``key = value`` sweep file; ``overrides`` (already typed) win."""
    kv = read_keyvalue(path)
    fields = {}
    for key, (offset, text) in kv.items():
        if key not in CONFIG_KEYS:
            raise DataError(f"unknown key {key!r}", path, offset)
        name, conv = CONFIG_KEYS[key]
        try:
            fields[name] = conv(text)
        except ValueError:
            raise DataError(f"bad value for {key}: {text!r}", path, offset) from None
    fields.update(overrides or {})
    if "sigma_grid" not in fields:
        raise DataError("sigma_grid (or log10_sigma_grid) is required", path)
    base = Path(path).parent
    for key in ("psf_file", "signal_file"):
        if fields.get(key) and not Path(fields[key]).is_absolute():
            fields[key] = str(base / fields[key])
    try:
        return BenchConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise DataError(str(exc), path) from None


# ---------------------------------------------------------------- one cell

def _signal(cfg: BenchConfig) -> np.ndarray:
    x = read_signal(cfg.signal_file) if cfg.signal_file else default_signal()
    if x.size != cfg.L:
        raise DataError(f"signal has length {x.size}, config says L={cfg.L}",
                        cfg.signal_file or "bundled signal")
    return x


def make_data(cfg: BenchConfig, sigma_index: int, trial: int):
    x = _signal(cfg)
    ss = np.random.SeedSequence(derive_seed(cfg.seed, "data", sigma_index, trial))
    s_support, s_noise = ss.spawn(2)
    if cfg.mode == "asd" and cfg.psf_file:
        xi = read_psf(cfg.psf_file, cfg.L)
        support = generate_support_from_psf(cfg.N, cfg.L, xi, cfg.M, s_support)
    else:
        support = generate_support_rejection(cfg.N, cfg.L, cfg.M, cfg.gap_extra, s_support)
    return synthesize(support, x, cfg.sigma_grid[sigma_index], s_noise)


def _truth_rho1(y):
    if y.support.M < 2:
        return np.zeros(y.L - 1)
    return pair_separation(y.support).rho1(y.support.density)


def run_method(method: str, cfg: BenchConfig, y, sigma_index: int, trial: int) -> dict:
    """One raw row (without timing)."""
    seed = derive_seed(cfg.seed, method, sigma_index, trial)
    row = dict(method=method, sigma_index=sigma_index, sigma=cfg.sigma_grid[sigma_index],
               trial=trial, status="ok", rmse=None, rho0_error=None, rho1_rmse=None,
               objective=None, detail="")
    rho0_true = y.support.density
    solve_mode = "ws" if method.endswith("-ws-on-asd") else cfg.mode
    try:
        if method in ("aa", "aa-ws-on-asd"):
            rep = estimate_aa(measurement_moments(y), solve_mode,
                              AaConfig(restarts=cfg.restarts), seed)
            row["objective"] = rep.final_cost
        elif method in ("em", "em-ws-on-asd"):
            rep = estimate_em(y, solve_mode,
                              EmConfig(restarts=cfg.restarts, max_iter=cfg.em_max_iter), seed)
            row["objective"] = rep.log_likelihood
        elif method == "deconv":
            z = oracle_distances(y, y.signal)
            x_hat = deconv_estimate(y, z, y.support.M, cfg.L + cfg.gap_extra)
            row["rmse"] = rmse(x_hat, y.signal)
            return row
        else:
            row["rmse"] = rmse(known_support_estimate(y, y.support), y.signal)
            return row
    except MtdError as exc:
        row["status"] = "failed"
        row["detail"] = str(exc).replace("\n", " ")
        return row
    row["rmse"] = rmse(rep.x_hat, y.signal)
    row["rho0_error"] = abs(rep.rho0_hat - rho0_true) / rho0_true
    if solve_mode == "asd":
        r1 = _truth_rho1(y)
        if np.linalg.norm(r1) > 0:
            row["rho1_rmse"] = float(np.linalg.norm(rep.rho1_hat - r1) / np.linalg.norm(r1))
    return row


def run_cell(cfg: BenchConfig, sigma_index: int, trial: int, methods) -> list:
    """Rows and timings for the listed methods on one freshly generated record."""
    y = make_data(cfg, sigma_index, trial)
    out = []
    for m in methods:
        start = time.perf_counter()
        row = run_method(m, cfg, y, sigma_index, trial)
        out.append((row, time.perf_counter() - start))
    return out


# ---------------------------------------------------------------- files

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _row_cells(row: dict, header) -> list:
    return [_fmt(row[k]) for k in header]


def read_raw(path) -> list:
    """Rows of a raw CSV as dicts of strings."""
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RAW_HEADER:
            raise DataError(f"unexpected header {reader.fieldnames}", path, 0)
        return list(reader)


def _row_key(row: dict, methods) -> tuple:
    return (methods.index(row["method"]), int(row["sigma_index"]), int(row["trial"]))


def aggregate(rows, cfg_methods, sigma_grid) -> list:
    """Mean metrics per (method, sigma) over ``ok`` rows of a raw table."""
    out = []
    for m in cfg_methods:
        for i, sigma in enumerate(sigma_grid):
            sel = [r for r in rows if r["method"] == m and int(r["sigma_index"]) == i
                   and r["status"] == "ok"]

            def mean(key):
                vals = [float(r[key]) for r in sel if r[key] not in ("", None)]
                return float(np.mean(vals)) if vals else None

            out.append(dict(method=m, sigma_index=i, sigma=float(sigma), n_ok=len(sel),
                            mean_rmse=mean("rmse"), mean_rho0_error=mean("rho0_error"),
                            mean_rho1_rmse=mean("rho1_rmse")))
    return out


def loglog_slope(sigmas, values) -> Optional[float]:
    s = np.asarray(sigmas, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    ok = (s > 0) & (v > 0)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log10(s[ok]), np.log10(v[ok]), 1)[0])


def slopes(agg, ranges) -> list:
    out = []
    methods = list(dict.fromkeys(a["method"] for a in agg))
    for m in methods:
        for lo, hi in ranges:
            pts = [a for a in agg if a["method"] == m and a["mean_rmse"] is not None
                   and a["sigma"] > 0 and lo - 1e-9 <= np.log10(a["sigma"]) <= hi + 1e-9]
            slope = loglog_slope([a["sigma"] for a in pts], [a["mean_rmse"] for a in pts])
            out.append(dict(method=m, log10_sigma_lo=float(lo), log10_sigma_hi=float(hi),
                            n_points=len(pts), slope=slope))
    return out


def _write_csv(path, header, rows) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(_row_cells(r, header) for r in rows)
    os.replace(tmp, path)


class _Appender:
    """Single writer that appends finished rows as they arrive."""

    def __init__(self, path, header):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self.fh = open(self.path, "a", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.header = header
        if new:
            self.writer.writerow(header)

    def write(self, row: dict):
        self.writer.writerow(_row_cells(row, self.header))
        self.fh.flush()

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------- driver

@dataclass
class BenchReport:
    raw: list
    aggregate: list
    slopes: list
    timing: list = field(default_factory=list)


def _workers() -> int:
    text = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(text)
    except ValueError:
        raise DataError(f"{WORKERS_ENV}={text!r} is not an integer") from None
    return max(1, n)


def run_bench(cfg: BenchConfig, out_dir, max_cells: Optional[int] = None,
              log=None) -> BenchReport:
    """Run (or resume) a sweep into ``out_dir``.

    Rows already present in ``raw.csv`` are kept and their cells skipped.
    ``max_cells`` stops after that many newly computed cells (for staged runs).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw_path, timing_path = out / "raw.csv", out / "timing.csv"
    done = {}
    for r in read_raw(raw_path):
        if r["method"] in cfg.methods:
            done[_row_key(r, cfg.methods)] = r
    todo = []
    for i in range(len(cfg.sigma_grid)):
        for t in range(cfg.trials):
            missing = [m for m in cfg.methods if (cfg.methods.index(m), i, t) not in done]
            if missing:
                todo.append((i, t, missing))
    if max_cells is not None:
        todo = todo[:max_cells]

    raw_app = _Appender(raw_path, RAW_HEADER)
    tim_app = _Appender(timing_path, TIMING_HEADER)
    try:
        workers = _workers()
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(workers) as pool:
                futures = [pool.submit(run_cell, cfg, i, t, ms) for i, t, ms in todo]
                results = (f.result() for f in futures)
                _consume(results, todo, raw_app, tim_app, done, cfg, log)
        else:
            results = (run_cell(cfg, i, t, ms) for i, t, ms in todo)
            _consume(results, todo, raw_app, tim_app, done, cfg, log)
    finally:
        raw_app.close()
        tim_app.close()

    rows = [done[k] for k in sorted(done)]
    rows = [{k: r[k] for k in RAW_HEADER} for r in rows]
    _write_csv(raw_path, RAW_HEADER, rows)
    agg = aggregate(rows, cfg.methods, cfg.sigma_grid)
    _write_csv(out / "aggregate.csv", AGG_HEADER, agg)
    slp = slopes(agg, cfg.slope_ranges)
    _write_csv(out / "slopes.csv", SLOPE_HEADER, slp)
    return BenchReport(rows, agg, slp)


def _consume(results, todo, raw_app, tim_app, done, cfg, log):
    for (i, t, _), cell in zip(todo, results):
        for row, seconds in cell:
            text_row = {k: _fmt(v) for k, v in row.items()}
            raw_app.write(row)
            tim_app.write(dict(method=row["method"], sigma_index=i, trial=t, seconds=seconds))
            done[_row_key(text_row, cfg.methods)] = text_row
            if log:
                log(f"{row['method']:>13s} sigma[{i}]={cfg.sigma_grid[i]:.4g} trial {t}: "
                    f"{row['status']} rmse={_fmt(row['rmse'])}")


def summarize(out_dir, ranges=None) -> BenchReport:
    """Recompute aggregate and slopes from ``raw.csv`` alone."""
    rows = read_raw(Path(out_dir) / "raw.csv")
    if not rows:
        raise DataError("no rows", Path(out_dir) / "raw.csv")
    methods = list(dict.fromkeys(r["method"] for r in rows))
    grid = {}
    for r in rows:
        grid[int(r["sigma_index"])] = float(r["sigma"])
    sigma_grid = [grid[i] for i in sorted(grid)]
    agg = aggregate(rows, methods, sigma_grid)
    if ranges is None:
        ranges = [(np.log10(min(s for s in sigma_grid if s > 0)),
                   np.log10(max(sigma_grid)))] if any(s > 0 for s in sigma_grid) else []
    return BenchReport(rows, agg, slopes(agg, ranges))

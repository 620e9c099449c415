"""Command-line entry point: ``mtd {generate,stats,estimate,baseline,bench,report}``.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .aa import AaConfig, estimate_aa
from .baselines import deconv_estimate, known_support_estimate, oracle_distances
from .bench import (WORKERS_ENV, BenchConfig, parse_ranges, read_config, run_bench,
                    summarize)
from .core import (Measurement, default_signal, generate_support_from_psf,
                   generate_support_rejection, rmse, synthesize)
from .em import EmConfig, estimate_em
from .errors import DataError, MtdError
from .moments import measurement_moments


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def sidecar(path, kind: str) -> Path:
    return Path(f"{path}.{kind}.txt")


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    L, N = args.length, args.num_samples
    M = int(round(args.density * N / L))
    if M < 1:
        raise UsageError("density too small for a single occurrence")
    x = io.read_signal(args.signal_file) if args.signal_file else default_signal()
    if x.size != L:
        raise DataError(f"signal has length {x.size}, expected --length {L}",
                        args.signal_file or "bundled signal")
    s_support, s_noise = np.random.SeedSequence(args.seed).spawn(2)
    if args.psf_file:
        if args.mode != "asd":
            raise UsageError("--psf-file requires --mode asd")
        xi = io.read_psf(args.psf_file, L)
        support = generate_support_from_psf(N, L, xi, M, s_support)
    else:
        W = args.W if args.W is not None else (L - 1 if args.mode == "ws" else 0)
        support = generate_support_rejection(N, L, M, W, s_support)
    y = synthesize(support, x, args.sigma, s_noise)
    io.write_measurement(args.out, y)
    io.write_signal(sidecar(args.out, "signal"), x)
    io.write_support(sidecar(args.out, "support"), support)
    print(f"wrote {args.out}: N={N} L={L} M={support.M} density={support.density:.6g} "
          f"min_gap={support.min_gap()}")
    return 0


# ---------------------------------------------------------------- stats

def cmd_stats(args) -> int:
    y = io.read_measurement(args.input)
    if y.N < 2 * y.L:
        raise DataError(f"need N >= 2L, got N={y.N}, L={y.L}", args.input)
    io.write_stats(args.out, measurement_moments(y))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------- estimate

def _load_truth(args, L):
    path = args.truth
    if path is None and args.input and sidecar(args.input, "signal").exists():
        path = sidecar(args.input, "signal")
    if path is None:
        return None
    x = io.read_signal(path)
    if x.size != L:
        raise DataError(f"truth has length {x.size}, expected {L}", path)
    return x


def _report_items(rep, truth):
    items = [("method", rep.method), ("mode", rep.mode), ("restart", rep.restart),
             ("final_cost", rep.final_cost), ("rho0", rep.rho0_hat), ("rho1", rep.rho1_hat),
             ("x", rep.x_hat), ("iterations", rep.iterations),
             ("stage_costs", rep.stage_costs), ("restart_costs", rep.restart_costs)]
    if rep.method == "em":
        items.append(("log_likelihood", rep.log_likelihood))
        pr = rep.priors
        if pr.mode == "ws":
            items.append(("prior_alpha", pr.alpha))
        else:
            items += [("prior_alpha0", pr.alpha0), ("prior_alpha1", pr.alpha1),
                      ("prior_rho1", pr.rho1)]
    if truth is not None:
        items.append(("rmse", rmse(rep.x_hat, truth)))
    return items


def cmd_estimate(args) -> int:
    kind = io.sniff_format(args.input)
    start = time.perf_counter()
    if args.method == "aa":
        if kind == "measurement":
            stats = measurement_moments(io.read_measurement(args.input))
        else:
            stats = io.read_stats(args.input)
        rep = estimate_aa(stats, args.mode, AaConfig(restarts=args.restarts), args.seed)
        L = stats.L
    else:
        if kind != "measurement":
            raise DataError("EM needs a measurement file, not statistics", args.input)
        y = io.read_measurement(args.input)
        cfg = EmConfig(restarts=args.restarts,
                       max_iter=args.max_iter if args.max_iter else EmConfig.max_iter)
        rep = estimate_em(y, args.mode, cfg, args.seed, trace_path=args.trace)
        L = y.L
    truth = _load_truth(args, L)
    items = _report_items(rep, truth)
    io.write_keyvalue(args.out, items)
    io.write_signal(args.signal_out or sidecar(args.out, "signal"), rep.x_hat)
    msg = f"wrote {args.out}: final_cost={rep.final_cost!r}"
    if truth is not None:
        msg += f" rmse={rmse(rep.x_hat, truth):.6g}"
    print(msg)
    print(f"wall time {time.perf_counter() - start:.2f} s", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- baseline

def cmd_baseline(args) -> int:
    y = io.read_measurement(args.input)
    support_path = args.support or sidecar(args.input, "support")
    support = io.read_support(support_path, y.N, y.L)
    truth = _load_truth(args, y.L)
    if args.method == "known-s":
        x_hat = known_support_estimate(y, support)
    else:
        if truth is None:
            raise DataError("deconv needs the true signal (--truth or sidecar)", args.input)
        min_gap = args.min_gap if args.min_gap is not None else support.min_gap()
        x_hat = deconv_estimate(y, oracle_distances(y, truth), support.M, min_gap)
    items = [("method", args.method), ("x", x_hat)]
    if truth is not None:
        items.append(("rmse", rmse(x_hat, truth)))
    io.write_keyvalue(args.out, items)
    io.write_signal(args.signal_out or sidecar(args.out, "signal"), x_hat)
    msg = f"wrote {args.out}"
    if truth is not None:
        msg += f": rmse={rmse(x_hat, truth):.6g}"
    print(msg)
    return 0


# ---------------------------------------------------------------- bench / report

def cmd_bench(args) -> int:
    overrides = {}
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.methods:
        overrides["methods"] = args.methods.replace(",", " ").split()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.restarts is not None:
        overrides["restarts"] = args.restarts
    cfg = read_config(args.config, overrides)
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr, flush=True))
    rep = run_bench(cfg, args.out, max_cells=args.max_cells, log=log)
    _print_summary(rep)
    return 0


def cmd_report(args) -> int:
    ranges = parse_ranges(args.slopes) if args.slopes else None
    rep = summarize(args.dir, ranges)
    _print_summary(rep)
    return 0


def _print_summary(rep) -> None:
    print(f"{'method':>13s} {'sigma':>10s} {'n_ok':>5s} {'mean_rmse':>12s}")
    for a in rep.aggregate:
        m = "" if a["mean_rmse"] is None else f"{a['mean_rmse']:.4g}"
        print(f"{a['method']:>13s} {a['sigma']:>10.4g} {a['n_ok']:>5d} {m:>12s}")
    for s in rep.slopes:
        v = "n/a" if s["slope"] is None else f"{s['slope']:.3f}"
        print(f"slope {s['method']} log10(sigma) in [{s['log10_sigma_lo']:g}, "
              f"{s['log10_sigma_hi']:g}] ({s['n_points']} points): {v}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtd", description="Signal estimation from long noisy records with "
                "unlocated signal occurrences.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a measurement with ground truth")
    g.add_argument("--length", type=int, default=10, help="signal length L")
    g.add_argument("--num-samples", type=int, default=10**6, help="record length N")
    g.add_argument("--density", type=float, default=0.3, help="rho0 = M L / N")
    g.add_argument("--sigma", type=float, default=0.0, help="noise standard deviation")
    g.add_argument("--mode", choices=["ws", "asd"], default="ws",
                   help="ws: gaps >= 2L-1; asd: gaps >= L")
    g.add_argument("--W", type=int, default=None, help="extra gap (default L-1 ws, 0 asd)")
    g.add_argument("--psf-file", help="asd only: draw gaps from this 'gap mass' file")
    g.add_argument("--signal-file", help="signal to plant (default: bundled L=10 signal)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="measurement file; sidecars get .signal.txt "
                   "and .support.txt appended")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", help="compute autocorrelation statistics")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    e = sub.add_parser("estimate", help="estimate the signal (aa or em)")
    e.add_argument("--input", required=True, help="measurement or stats file (stats: aa only)")
    e.add_argument("--method", choices=["aa", "em"], default="aa")
    e.add_argument("--mode", choices=["ws", "asd"], default="asd")
    e.add_argument("--restarts", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-iter", type=int, default=None, help="em: iterations per stage")
    e.add_argument("--truth", help="true signal file for the RMSE (default: input sidecar)")
    e.add_argument("--trace", help="em: per-iteration log-likelihood CSV")
    e.add_argument("--out", required=True, help="report file (key = value)")
    e.add_argument("--signal-out", help="estimated signal file (default: <out>.signal.txt)")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("baseline", help="oracle baselines (deconv, known-s)")
    b.add_argument("--input", required=True)
    b.add_argument("--method", choices=["deconv", "known-s"], default="known-s")
    b.add_argument("--support", help="support file (default: input sidecar)")
    b.add_argument("--truth", help="true signal file (default: input sidecar)")
    b.add_argument("--min-gap", type=int, default=None,
                   help="deconv exclusion radius (default: smallest true gap)")
    b.add_argument("--out", required=True)
    b.add_argument("--signal-out")
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("bench", help=f"run or resume a sweep (workers: ${WORKERS_ENV})")
    c.add_argument("config", help="key = value sweep file")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--trials", type=int)
    c.add_argument("--methods")
    c.add_argument("--seed", type=int)
    c.add_argument("--restarts", type=int)
    c.add_argument("--max-cells", type=int, default=None,
                   help="stop after this many new (sigma, trial) cells")
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="aggregate and slopes from a sweep's raw.csv")
    r.add_argument("dir")
    r.add_argument("--slopes", help="log10 sigma ranges, e.g. --slopes='-1:-0.5 0.2:0.6'")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mtd: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"mtd: data error: {exc}", file=sys.stderr)
        return exc.exit_code
    except MtdError as exc:
        print(f"mtd: numerical failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"mtd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

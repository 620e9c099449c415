"""Detect-then-average breaks down at high noise; moments do not need detection.

``deconv`` is handed the exact distance from the true signal to every window
and greedily keeps the closest non-conflicting windows. At low noise those
are the true copies and its error tracks the known-support average. At high
noise pure-noise windows win the ranking and the average stalls, while the
autocorrelation solver keeps improving with more data.

    python demos/oracle_baselines.py
"""

import argparse

from mtd.aa import AaConfig, estimate_aa
from mtd.baselines import deconv_estimate, known_support_estimate, oracle_distances
from mtd.core import default_signal, generate_support_rejection, rmse, synthesize
from mtd.moments import measurement_moments


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--num-samples", type=int, default=1_000_000)
    p.add_argument("--log10-sigmas", type=float, nargs="+", default=[-1.0, -0.5, 0.0, 0.5])
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=2)
    args = p.parse_args()

    x = default_signal()
    L, N = x.size, args.num_samples
    support = generate_support_rejection(N, L, int(0.5 * N / L), 0, args.seed)
    print(f"{support.M} copies, gaps >= {L}")
    print(f"{'sigma':>8s} {'known-s':>10s} {'deconv':>10s} {'AA':>10s}")
    for lg in args.log10_sigmas:
        sigma = 10.0 ** lg
        y = synthesize(support, x, sigma, args.seed + 1)
        ks = rmse(known_support_estimate(y, support), x)
        dc = rmse(deconv_estimate(y, oracle_distances(y, x), support.M, L), x)
        aa = estimate_aa(measurement_moments(y), "asd", AaConfig(restarts=args.restarts),
                         args.seed)
        print(f"{sigma:8.3f} {ks:10.2e} {dc:10.2e} {rmse(aa.x_hat, x):10.2e}")


if __name__ == "__main__":
    main()

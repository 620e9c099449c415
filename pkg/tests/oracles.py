"""Slow, obviously-correct reference computations used by the tests."""

import math
import random

import numpy as np
from scipy import optimize


def brute_moments(y, L):
    """Triple-loop autocorrelations of ``y`` (zero-padded), orders 1..3."""
    y = [float(v) for v in y]
    N = len(y)

    def at(i):
        return y[i] if 0 <= i < N else 0.0

    a1 = sum(y) / N
    a2 = [sum(y[i] * at(i + l) for i in range(N)) / N for l in range(L)]
    a3 = {}
    for l1 in range(L):
        for l2 in range(l1, L):
            a3[l1, l2] = sum(y[i] * at(i + l1) * at(i + l2) for i in range(N)) / N
    return a1, np.array(a2), a3


def brute_signal_moments(x, K):
    x = [float(v) for v in x]
    L = len(x)

    def at(i):
        return x[i] if 0 <= i < L else 0.0

    a2 = [sum(x[i] * at(i + l) for i in range(L)) / L for l in range(K)]
    a3 = [[sum(x[i] * at(i + a) * at(i + b) for i in range(L)) / L for b in range(K)]
          for a in range(K)]
    return sum(x) / L, np.array(a2), np.array(a3)


def dense_convolution(starts, x, N):
    """``sum_k x[i - s_k]`` evaluated with np.convolve on a dense spike train."""
    s = np.zeros(N)
    s[np.asarray(starts)] = 1.0
    return np.convolve(s, x)[:N]


def rejection_gaps(N, L, M, W, rng: random.Random):
    """Gaps of one run of the uniform one-at-a-time rejection process."""
    n = N - L + 1
    gap = L + W
    blocked = bytearray(n)
    accepted = []
    while len(accepted) < M:
        c = rng.randrange(n)
        if blocked[c]:
            continue
        accepted.append(c)
        lo, hi = max(0, c - gap + 1), min(n, c + gap)
        blocked[lo:hi] = b"\x01" * (hi - lo)
    accepted.sort()
    return np.diff(accepted)


def window_template(x, l):
    """Noiseless length-L window for a single occurrence shifted by ``l``.

    ``l = L`` puts the occurrence exactly in the window; smaller ``l`` shows
    its head at the window end, larger ``l`` its tail at the window start.
    """
    L = len(x)
    out = np.zeros(L)
    start = L - l  # window index where x[0] lands
    for j in range(L):
        i = start + j
        if 0 <= i < L:
            out[i] = x[j]
    return out


def naive_log_likelihood(Y, x, sigma, configs):
    """Direct (non log-domain) mixture likelihood.

    ``configs`` is a list of ``(prior, shifts)`` with ``shifts`` a tuple of
    one or two single-occurrence shifts whose templates add up.
    """
    total = 0.0
    L = len(x)
    norm = (2 * math.pi * sigma ** 2) ** (-L / 2)
    for y in Y:
        s = 0.0
        for prior, shifts in configs:
            t = sum(window_template(x, l) for l in shifts)
            r = float(np.sum((np.asarray(y) - t) ** 2))
            s += prior * norm * math.exp(-r / (2 * sigma ** 2))
        total += math.log(s)
    return total


# ---------------------------------------------------------------- EM oracles

def configs_by_rule(L, mode):
    """Configuration list in the documented order: shifts 0..2L-1, then pairs."""
    out = [(l,) if l else () for l in range(2 * L)]
    if mode == "asd":
        out += [(l1, l2) for l1 in range(L + 1, 2 * L) for l2 in range(1, l1 - L + 1)]
    return out


def constraint_weights(L):
    """Coefficients of (alpha0, alpha1, rho1) in the total prior mass."""
    return np.concatenate([[1.0, 2 * L - 1.0], (np.arange(L - 1) + L) / L])


def derived_priors(L, alpha0, alpha1, rho1):
    """Single and pair priors from (alpha0, alpha1, rho1) written out term by term."""
    single = np.empty(2 * L)
    single[0] = alpha0
    for l in range(1, L + 1):
        single[l] = alpha1 + sum(rho1[j - L] for j in range(2 * L - l, 2 * L - 1)) / L
    for l in range(L + 1, 2 * L):
        single[l] = single[2 * L - l]
    pairs = [rho1[l1 - l2 - L] / L for l1 in range(L + 1, 2 * L) for l2 in range(1, l1 - L + 1)]
    return np.concatenate([single, pairs])


def q_signal_oracle(Y, probs, configs, L, x0):
    """Maximize the expected complete-data log-likelihood in x with BFGS."""
    def neg_q(x):
        total = 0.0
        for y, p in zip(Y, probs):
            for pc, c in zip(p, configs):
                t = sum((window_template(x, l) for l in c), np.zeros(L))
                total += pc * np.sum((y - t) ** 2)
        return total

    return optimize.minimize(neg_q, x0, method="BFGS", options=dict(gtol=1e-11)).x


def ws_prior_oracle(weights):
    """Maximize sum w log(alpha) over the simplex with Newton steps on softmax logits."""
    w = np.asarray(weights, dtype=np.float64)

    def softmax(u):  # first logit pinned at zero keeps the Hessian definite
        z = np.concatenate([[0.0], u])
        a = np.exp(z - z.max())
        return a / a.sum()

    def neg(u):
        return -w @ np.log(softmax(u))

    def grad(u):
        return (w.sum() * softmax(u) - w)[1:]

    def hess(u):
        a = softmax(u)
        return w.sum() * (np.diag(a) - np.outer(a, a))[1:, 1:]

    res = optimize.minimize(neg, np.zeros(w.size - 1), jac=grad, hess=hess,
                            method="trust-exact", options=dict(gtol=1e-14))
    return softmax(res.x)


def asd_objective(theta, L, weights):
    """sum_c w_c log prior_c, skipping configurations with zero weight."""
    prior = derived_priors(L, theta[0], theta[1], theta[2:])
    logs = np.log(np.maximum(prior, 1e-300))
    return float(np.sum(np.where(weights > 0, weights * logs, 0.0)))


def asd_prior_slsqp(L, weights):
    cw = constraint_weights(L)
    res = optimize.minimize(lambda t: -asd_objective(t, L, weights), np.full(cw.size, 1 / cw.sum()),
                            method="SLSQP", bounds=[(0, None)] * cw.size,
                            constraints=[dict(type="eq", fun=lambda t: cw @ t - 1)],
                            options=dict(ftol=1e-15, maxiter=1000))
    return res.x


def asd_prior_grid_search(L, weights, levels=40, n=9, K=24):
    """Zooming lattice search over the simplex of constraint-weighted parameters."""
    cw = constraint_weights(L)
    k = cw.size
    pts = np.array([c for c in np.ndindex(*([K + 1] * (k - 1))) if sum(c) <= K], dtype=float) / K
    offsets = np.array(list(np.ndindex(*([n] * (k - 1)))), dtype=float) - (n - 1) / 2
    best, best_v = None, -np.inf
    step = 1.0 / K
    for _ in range(levels):
        lam = np.hstack([1 - pts.sum(axis=1, keepdims=True), pts])
        for row in lam[np.all(lam >= -1e-15, axis=1)]:
            row = np.maximum(row, 0)
            v = asd_objective(row / cw, L, weights)
            if v > best_v:
                best, best_v = row, v
        pts = best[1:] + offsets * (2 * step / (n - 1))
        step /= 3
    return best / cw

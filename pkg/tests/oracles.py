"""Reference computations that share no code with the package.

Everything here is deliberately naive: explicit inverses, scipy.stats
densities, exhaustive enumeration over state paths and control sequences.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.stats import multivariate_normal


def density(y, mean, cov):
    return float(multivariate_normal(mean=np.atleast_1d(mean), cov=np.atleast_2d(cov)).pdf(np.atleast_1d(y)))


def state_densities(y, means, covs):
    """``f(y | e_i)`` for every state, means ``(n, d)`` and covs ``(n, d, d)``."""
    return np.array([density(y, m, Q) for m, Q in zip(means, covs)])


def naive_gain(p, means, covs):
    """Kalman-like gain with an explicit inverse."""
    M = np.asarray(means).T
    Sig = np.diag(p) - np.outer(p, p)
    Qt = sum(pi * Q for pi, Q in zip(p, covs))
    S = M @ Sig @ M.T + Qt
    return Sig @ M.T @ np.linalg.inv(S), S


def naive_update(p, y, means, covs):
    G, _ = naive_gain(p, means, covs)
    return p + G @ (np.atleast_1d(y) - np.asarray(means).T @ p)


def mc_expected_posterior_trace(p, means, covs, samples, rng):
    """Monte Carlo mean and standard error of ``1 - ||raw p_{k|k}(y)||^2`` over ``y`` from the mixture."""
    G, _ = naive_gain(p, means, covs)
    M = np.asarray(means).T
    states = rng.choice(len(p), size=samples, p=p)
    vals = np.empty(samples)
    for i in range(len(p)):
        idx = np.flatnonzero(states == i)
        if idx.size == 0:
            continue
        Y = rng.multivariate_normal(means[i], covs[i], size=idx.size)
        raw = p[None, :] + (Y - (M @ p)[None, :]) @ G.T
        vals[idx] = 1.0 - np.sum(raw * raw, axis=1)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(samples)


def path_posterior(P, pi, likelihoods):
    """Exact posterior over all state paths given per-step likelihood vectors.

    ``P`` is column-stochastic; returns a dict path -> probability.
    """
    n = len(pi)
    T = len(likelihoods)
    weights = {}
    for path in itertools.product(range(n), repeat=T):
        w = pi[path[0]] * likelihoods[0][path[0]]
        for t in range(1, T):
            w *= P[path[t], path[t - 1]] * likelihoods[t][path[t]]
        weights[path] = w
    Z = sum(weights.values())
    return {k: v / Z for k, v in weights.items()}


def path_marginal(post, k, n):
    out = np.zeros(n)
    for path, w in post.items():
        out[path[k]] += w
    return out


def path_joint(post, k, s, n):
    """``P(x_k = i, x_s = j | data)``."""
    out = np.zeros((n, n))
    for path, w in post.items():
        out[path[k], path[s]] += w
    return out


def compositions(n, d):
    """All ``a in N^n`` with ``sum(a) = d`` by recursion."""
    if n == 1:
        return [(d,)]
    return [(a,) + rest for a in range(d, -1, -1) for rest in compositions(n - 1, d - a)]


def nearest_bruteforce(points, b):
    dist = np.sum((points - b[None, :]) ** 2, axis=1)
    return int(np.flatnonzero(dist <= dist.min() + 1e-15)[0])


def open_loop_costs(P, pi, means_by_u, covs_by_u, L, trials, seed, project):
    """Cost of every open-loop control sequence of length ``L`` by rollouts.

    Noise follows the simulator's documented stream layout (one spawned
    substream per trial; per step a uniform, then a normal vector of the
    largest observation dimension), so costs pair with closed-loop runs
    on the same seed. Returns ``{sequence: per-trial cost array}``.
    """
    dmax = max(np.asarray(m).shape[1] for m in means_by_u)
    draws = []
    for ss in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(ss)
        steps = []
        for _ in range(L):
            v = rng.random()
            steps.append((v, rng.standard_normal(dmax)))
        draws.append(steps)
    out = {}
    for seq in itertools.product(range(len(means_by_u)), repeat=L):
        costs = np.empty(trials)
        for t, steps in enumerate(draws):
            pred = np.array(pi, dtype=float)
            total = 0.0
            x = None
            for k, (u, (v, z)) in enumerate(zip(seq, steps)):
                cdf = np.cumsum(pi) if k == 0 else np.cumsum(P[:, x])
                x = min(int(np.searchsorted(cdf, v, side="right")), len(pi) - 1)
                m, Q = np.asarray(means_by_u[u]), np.asarray(covs_by_u[u])
                d = m.shape[1]
                y = m[x] + np.linalg.cholesky(Q[x]) @ z[:d]
                filt = project(naive_update(pred, y, m, Q))
                total += 1.0 - filt @ filt
                pred = P @ filt
            costs[t] = total
        out[seq] = costs
    return out

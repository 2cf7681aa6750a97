"""Independent reference computations used by the tests.

Nothing here imports rpmkit: every oracle is written from the textbook
definition so that agreement is a real cross-check.
"""

import itertools

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import gammaln, logsumexp


def gauss_log_density_1d(z, mean, var):
    return -0.5 * np.log(2 * np.pi * var) - 0.5 * (z - mean) ** 2 / var


def bank_moments_1d(h, J):
    """Means and variances of K=1 factors given natural parameters."""
    prec = -2.0 * np.asarray(J, dtype=float).reshape(-1)
    return np.asarray(h, dtype=float).reshape(-1) / prec, 1.0 / prec


def gh_expect(fn, m, s, nodes=64):
    """E[fn(z)] for z ~ N(m, s) by Gauss-Hermite quadrature."""
    x, w = hermgauss(nodes)
    z = m + np.sqrt(2.0 * s) * x
    return float(np.sum(w * fn(z)) / np.sqrt(np.pi))


def gh_log_mixture(h, J, m, s, nodes=64):
    """E_q[log (1/N) sum_m f_m(z)] for K=1 banks."""
    mu, var = bank_moments_1d(h, J)

    def log_mix(z):
        comps = gauss_log_density_1d(z[:, None], mu[None], var[None])
        return logsumexp(comps, axis=1) - np.log(len(mu))

    return gh_expect(log_mix, m, s, nodes)


def gh_log_ratio(h, J, n, m, s, nodes=64):
    """E_q[log f_n(z) - log F(z)] for K=1 banks."""
    mu, var = bank_moments_1d(h, J)
    own = gh_expect(lambda z: gauss_log_density_1d(z, mu[n], var[n]), m, s, nodes)
    return own - gh_log_mixture(h, J, m, s, nodes)


def enumerate_log_likelihood(log_f, log_prior=None):
    """sum_n log sum_k prior(k) prod_j f_j(k | x_j^n) / F_j(k), by brute force."""
    N, J, K = log_f.shape
    f = np.exp(log_f)
    F = f.mean(axis=0)
    prior = np.full(K, 1.0 / K) if log_prior is None else np.exp(log_prior)
    total = 0.0
    for n in range(N):
        terms = []
        for k in range(K):
            val = np.log(prior[k])
            for j in range(J):
                val += np.log(f[n, j, k]) - np.log(F[j, k])
            terms.append(val)
        total += logsumexp(terms)
    return total


def enumerate_posterior(log_f, log_prior=None):
    N, J, K = log_f.shape
    f = np.exp(log_f)
    F = f.mean(axis=0)
    prior = np.full(K, 1.0 / K) if log_prior is None else np.exp(log_prior)
    q = np.empty((N, K))
    for n in range(N):
        for k in range(K):
            q[n, k] = prior[k] * np.prod([f[n, j, k] / F[j, k] for j in range(J)])
        q[n] /= q[n].sum()
    return q


def brute_force_assignment(C):
    """Minimum-cost permutation; ties go to the lexicographically smallest."""
    n = C.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        cost = C[np.arange(n), perm].sum()
        if cost < best - 1e-12:
            best, best_perm = cost, perm
    return best_perm, best


def dense_gp_conditional(Kuu, Kfu, kff_diag, mu, Sigma):
    """Marginal mean and variance of f given q(u) = N(mu, Sigma) by dense solves."""
    A = np.linalg.solve(Kuu, Kfu.T).T
    mean = A @ mu
    var = kff_diag - np.sum(A * Kfu, axis=1) + np.sum((A @ Sigma) * A, axis=1)
    return mean, var


def gaussian_kl(m0, S0, m1, S1):
    K = len(m0)
    S1i = np.linalg.inv(S1)
    d = m1 - m0
    return 0.5 * (np.trace(S1i @ S0) + d @ S1i @ d - K + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def dirichlet_log_density(alpha, w):
    alpha = np.asarray(alpha, dtype=float)
    """Log Beta-function density; ``w`` is one point or an ``(n, K)`` batch."""
    return gammaln(alpha.sum()) - gammaln(alpha).sum() + np.log(w) @ (alpha - 1)

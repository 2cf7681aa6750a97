"""Exponential-family primitives for the categorical, Dirichlet and Gaussian
families.

Gaussian natural parameters follow ``eta = (P m, -P/2)`` with sufficient
statistic ``t(z) = (z, vec(z z^T))`` and precision ``P``. The
``(2 pi)^(K/2)`` base-measure constant is folded into the log-normalizer, so
``exp(eta^T t(z) - Phi(eta))`` integrates to one against Lebesgue measure.

All functions dispatch on the parameter type and are pure.
"""

from dataclasses import dataclass
from functools import singledispatch

import numpy as np
from scipy.special import gammaln, polygamma

from .special import digamma, jittered_cholesky, logsumexp, softmax, symmetrize

__all__ = [
    "InvalidParameterError",
    "CategoricalNat",
    "CategoricalMoment",
    "GaussianNat",
    "GaussianMoment",
    "DirichletParams",
    "DirichletMoment",
    "SuffStatMoments",
    "log_normalizer",
    "nat_to_moment",
    "moment_to_nat",
    "kl",
    "entropy",
    "log_prob",
    "suffstat_moments",
    "sample_reparam",
    "stack_natural",
]

LOG_2PI = float(np.log(2 * np.pi))


class InvalidParameterError(ValueError):
    """Raised when parameters fall outside their family's domain."""


def _is_pd(a):
    try:
        np.linalg.cholesky(symmetrize(a))
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class CategoricalNat:
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        if logits.ndim != 1 or logits.size < 2:
            raise InvalidParameterError("categorical logits must be a vector with K >= 2")
        if not np.all(np.isfinite(logits)):
            raise InvalidParameterError("categorical logits must be finite")
        object.__setattr__(self, "logits", logits)

    @property
    def K(self):
        return self.logits.size


@dataclass(frozen=True)
class CategoricalMoment:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 2:
            raise InvalidParameterError("categorical probabilities must be a vector with K >= 2")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidParameterError("categorical probabilities must be a point on the simplex")
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class GaussianNat:
    """Gaussian in natural form: ``h = P m`` and ``J = -P/2``."""

    h: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h, dtype=float))
        J = np.atleast_2d(np.asarray(self.J, dtype=float))
        if J.shape != (h.size, h.size):
            raise InvalidParameterError("J must be K x K with K = len(h)")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(J))):
            raise InvalidParameterError("not a valid natural parameter: non-finite entries")
        if not np.allclose(J, J.T, rtol=1e-10, atol=1e-12):
            raise InvalidParameterError("not a valid natural parameter: J is not symmetric")
        if not _is_pd(-2.0 * J):
            raise InvalidParameterError("not a valid natural parameter: -2J is not positive definite")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "J", symmetrize(J))

    @property
    def K(self):
        return self.h.size

    @property
    def vector(self):
        """Stacked natural parameter ``[h; vec(J)]`` of length K + K^2."""
        return np.concatenate([self.h, self.J.ravel()])


@dataclass(frozen=True)
class GaussianMoment:
    m: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.m, dtype=float))
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        if S.shape != (m.size, m.size):
            raise InvalidParameterError("S must be K x K with K = len(m)")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(S))):
            raise InvalidParameterError("Gaussian moments must be finite")
        if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12) or not _is_pd(S):
            raise InvalidParameterError("covariance must be symmetric positive definite")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "S", symmetrize(S))

    @property
    def K(self):
        return self.m.size


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1 or alpha.size < 2:
            raise InvalidParameterError("Dirichlet alpha must be a vector with K >= 2")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise InvalidParameterError("Dirichlet alpha must be strictly positive")
        object.__setattr__(self, "alpha", alpha)

    @property
    def K(self):
        return self.alpha.size


@dataclass(frozen=True)
class DirichletMoment:
    """Expected sufficient statistic ``E[log w]`` of a Dirichlet."""

    mean_log: np.ndarray

    def __post_init__(self):
        mean_log = np.asarray(self.mean_log, dtype=float)
        if mean_log.ndim != 1 or np.any(mean_log >= 0) or not np.all(np.isfinite(mean_log)):
            raise InvalidParameterError("E[log w] entries must be finite and negative")
        object.__setattr__(self, "mean_log", mean_log)


@dataclass(frozen=True)
class SuffStatMoments:
    """Mean ``mu`` and covariance ``V`` of ``t(z) = (z, vec(z z^T))``."""

    mu: np.ndarray
    V: np.ndarray


def stack_natural(nats):
    """Stack Gaussian natural parameters into an ``(N, K + K^2)`` array."""
    return np.stack([n.vector for n in nats])


# ---------------------------------------------------------------------------
# log-normalizer


@singledispatch
def log_normalizer(params):
    raise TypeError(f"no log-normalizer for {type(params).__name__}")


@log_normalizer.register
def _(params: CategoricalNat):
    return float(logsumexp(params.logits))


@log_normalizer.register
def _(params: GaussianNat):
    P = -2.0 * params.J
    L = np.linalg.cholesky(P)
    w = np.linalg.solve(L, params.h)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(0.5 * w @ w - 0.5 * logdet + 0.5 * params.K * LOG_2PI)


@log_normalizer.register
def _(params: DirichletParams):
    a = params.alpha
    return float(np.sum(gammaln(a)) - gammaln(a.sum()))


# ---------------------------------------------------------------------------
# parameter maps


@singledispatch
def nat_to_moment(params):
    raise TypeError(f"no moment map for {type(params).__name__}")


@nat_to_moment.register
def _(params: CategoricalNat):
    return CategoricalMoment(softmax(params.logits))


@nat_to_moment.register
def _(params: GaussianNat):
    P = -2.0 * params.J
    L = jittered_cholesky(P)
    S = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(params.K)))
    return GaussianMoment(S @ params.h, symmetrize(S))


@nat_to_moment.register
def _(params: DirichletParams):
    a = params.alpha
    return DirichletMoment(digamma(a) - digamma(a.sum()))


@singledispatch
def moment_to_nat(params):
    raise TypeError(f"no natural map for {type(params).__name__}")


@moment_to_nat.register
def _(params: CategoricalMoment):
    p = params.probs
    if np.any(p <= 0):
        raise InvalidParameterError("probabilities on the simplex boundary have no finite logits")
    return CategoricalNat(np.log(p))


@moment_to_nat.register
def _(params: GaussianMoment):
    L = jittered_cholesky(params.S)
    P = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(params.K)))
    P = symmetrize(P)
    return GaussianNat(P @ params.m, -0.5 * P)


def _inv_digamma(y, iters=8):
    # Minka's initialisation followed by Newton steps.
    x = np.where(y >= -2.22, np.exp(y) + 0.5, -1.0 / (y + 0.5772156649015329))
    for _ in range(iters):
        x = np.maximum(x - (digamma(x) - y) / polygamma(1, x), 1e-8)
    return x


@moment_to_nat.register
def _(params: DirichletMoment, tol=1e-13, max_iter=100):
    # Newton on sum_k (a_k - 1) E[log w_k] - log B(a); the Hessian is
    # diagonal plus rank one, so each step is O(K).
    ml = params.mean_log
    alpha = _inv_digamma(digamma(1.0) + ml)
    for _ in range(max_iter):
        g = digamma(alpha.sum()) - digamma(alpha) + ml
        q = -polygamma(1, alpha)
        z = polygamma(1, alpha.sum())
        b = np.sum(g / q) / (1.0 / z + np.sum(1.0 / q))
        step = (g - b) / q
        new = alpha - step
        # fall back to halving if Newton leaves the domain
        while np.any(new <= 0):
            step = step / 2
            new = alpha - step
        done = np.max(np.abs(new - alpha) / new) < tol
        alpha = new
        if done:
            break
    return DirichletParams(alpha)


# ---------------------------------------------------------------------------
# KL divergence


def _check_pair(q, p):
    if type(q) is not type(p):
        raise InvalidParameterError(
            f"family mismatch: {type(q).__name__} vs {type(p).__name__}"
        )
    if q.K != p.K:
        raise InvalidParameterError(f"dimension mismatch: K={q.K} vs K={p.K}")


@singledispatch
def kl(q, p):
    """KL(q || p) for two members of the same family."""
    raise TypeError(f"no KL for {type(q).__name__}")


@kl.register
def _(q: CategoricalNat, p: CategoricalNat):
    _check_pair(q, p)
    lq = q.logits - logsumexp(q.logits)
    lp = p.logits - logsumexp(p.logits)
    return float(np.sum(np.exp(lq) * (lq - lp)))


@kl.register
def _(q: GaussianMoment, p: GaussianMoment):
    _check_pair(q, p)
    Lp = np.linalg.cholesky(p.S)
    Lq = np.linalg.cholesky(q.S)
    A = np.linalg.solve(Lp, Lq)
    d = np.linalg.solve(Lp, p.m - q.m)
    logdet = 2.0 * (np.sum(np.log(np.diag(Lp))) - np.sum(np.log(np.diag(Lq))))
    return float(0.5 * (np.sum(A * A) + d @ d - q.K + logdet))


@kl.register
def _(q: GaussianNat, p: GaussianNat):
    _check_pair(q, p)
    return kl(nat_to_moment(q), nat_to_moment(p))


@kl.register
def _(q: DirichletParams, p: DirichletParams):
    _check_pair(q, p)
    a, b = q.alpha, p.alpha
    a0 = a.sum()
    return float(
        gammaln(a0)
        - np.sum(gammaln(a))
        - gammaln(b.sum())
        + np.sum(gammaln(b))
        + np.sum((a - b) * (digamma(a) - digamma(a0)))
    )


# ---------------------------------------------------------------------------
# entropy


@singledispatch
def entropy(params):
    raise TypeError(f"no entropy for {type(params).__name__}")


@entropy.register
def _(params: CategoricalNat):
    lq = params.logits - logsumexp(params.logits)
    return float(-np.sum(np.exp(lq) * lq))


@entropy.register
def _(params: GaussianMoment):
    _, logdet = np.linalg.slogdet(params.S)
    return float(0.5 * params.K * (1.0 + LOG_2PI) + 0.5 * logdet)


@entropy.register
def _(params: GaussianNat):
    return entropy(nat_to_moment(params))


@entropy.register
def _(params: DirichletParams):
    a = params.alpha
    a0 = a.sum()
    return float(
        log_normalizer(params)
        + (a0 - a.size) * digamma(a0)
        - np.sum((a - 1.0) * digamma(a))
    )


# ---------------------------------------------------------------------------
# densities


@singledispatch
def log_prob(params, z):
    raise TypeError(f"no density for {type(params).__name__}")


@log_prob.register
def _(params: CategoricalNat, z):
    k = int(z)
    if not 0 <= k < params.K or k != z:
        raise InvalidParameterError(f"category {z!r} outside support 0..{params.K - 1}")
    return float(params.logits[k] - logsumexp(params.logits))


@log_prob.register
def _(params: GaussianNat, z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (params.K,):
        raise InvalidParameterError(f"z must have length {params.K}")
    return float(params.h @ z + z @ params.J @ z - log_normalizer(params))


@log_prob.register
def _(params: GaussianMoment, z):
    return log_prob(moment_to_nat(params), z)


@log_prob.register
def _(params: DirichletParams, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (params.K,) or np.any(z <= 0) or abs(z.sum() - 1.0) > 1e-10:
        raise InvalidParameterError("Dirichlet argument must lie in the open simplex")
    return float(np.sum((params.alpha - 1.0) * np.log(z)) - log_normalizer(params))


# ---------------------------------------------------------------------------
# sufficient-statistic moments and sampling


def _h(A, B):
    # h(A, B) = A kron B + (G^T kron A kron G) hadamard (G kron B kron G^T),
    # G a column of ones; entry [(a,b),(c,d)] = A_ac B_bd + A_ad B_bc.
    K = A.shape[0]
    G = np.ones((K, 1))
    return np.kron(A, B) + np.kron(np.kron(G.T, A), G) * np.kron(np.kron(G, B), G.T)


def suffstat_moments(q: GaussianMoment) -> SuffStatMoments:
    """Mean and covariance of ``t(z) = (z, vec(z z^T))`` under ``q``."""
    m = q.m[:, None]
    S = q.S
    mm = m @ m.T
    mu = np.concatenate([q.m, (S + mm).ravel()])
    cross = np.kron(m.T, S) + np.kron(S, m.T)
    quad = _h(S, S) + _h(S, mm) + _h(mm, S)
    V = np.block([[S, cross], [cross.T, quad]])
    return SuffStatMoments(mu, symmetrize(V))


def sample_reparam(q: GaussianMoment, eps):
    """Reparametrised draw(s) ``m + L eps`` with ``L`` the lower Cholesky factor.

    ``eps`` may be a single length-K vector or an ``(S, K)`` batch.
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != q.K:
        raise InvalidParameterError(f"eps must have trailing length {q.K}")
    L = jittered_cholesky(q.S)
    return q.m + eps @ L.T


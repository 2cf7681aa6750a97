"""Exact EM for recognition-parametrised models with one categorical latent.

The functional core works on recognition log-probabilities ``log_f`` of
shape ``(N, J, K)``: item ``n``, view ``j``, latent value ``k``. Mixtures
``F_j(k)`` average the recognition factors of view ``j`` over the data.
:class:`PeerRPM` wraps the loop in an estimator with a shared network.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_log_factors, check_views
from .nets import Adam, CategoricalHead, mlp
from .report import FitReport, NumericalAbort
from .special import logsumexp, softmax

__all__ = [
    "DegenerateMixtureError",
    "DiscretePosterior",
    "log_softmax",
    "mixture_probs",
    "mixture_log_probs",
    "e_step_exact",
    "free_energy_discrete",
    "free_energy_logit_grad",
    "PeerRPM",
]

_LOG_TINY = np.log(1e-300)


class DegenerateMixtureError(FloatingPointError):
    pass


@dataclass
class DiscretePosterior:
    """Exact posterior rows ``q`` (N x K) and per-item log weights ``log W(X_n)``."""

    q: np.ndarray
    log_weight: np.ndarray


def log_softmax(logits, axis=-1):
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def mixture_log_probs(log_f):
    """``log F_j(k)``, shape ``(J, K)``."""
    log_f = check_log_factors(log_f)
    return logsumexp(log_f, axis=0) - np.log(log_f.shape[0])


def mixture_probs(log_f, j=None):
    """Mixture probabilities ``F_j = (1/N) sum_n f(. | x_j^(n))``.

    Returns all views as a ``(J, K)`` array, or view ``j`` alone.
    """
    F = np.exp(mixture_log_probs(log_f))
    return F if j is None else F[j]


def _uniform_log_prior(K):
    return np.full(K, -np.log(K))


def e_step_exact(log_f, log_prior=None):
    """Closed-form posterior ``q_n(k) ∝ prior(k) prod_j f_j(k|x_j^(n)) / F_j(k)``."""
    log_f = check_log_factors(log_f)
    log_F = mixture_log_probs(log_f)
    if np.any(log_F < _LOG_TINY):
        j, k = np.argwhere(log_F < _LOG_TINY)[0]
        raise DegenerateMixtureError(f"degenerate mixture component: F_{j}({k}) < 1e-300")
    if log_prior is None:
        log_prior = _uniform_log_prior(log_f.shape[2])
    log_joint = log_prior + np.sum(log_f - log_F, axis=1)
    log_w = logsumexp(log_joint, axis=1)
    q = np.exp(log_joint - log_w[:, None])
    q /= q.sum(axis=1, keepdims=True)
    return DiscretePosterior(q, log_w)


def _xlogx(q):
    return np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)


def free_energy_discrete(log_f, q, log_prior=None):
    """Free energy with the ``theta``-independent ``log p_0`` terms dropped."""
    log_f = check_log_factors(log_f)
    q = np.asarray(q, dtype=float)
    if log_prior is None:
        log_prior = _uniform_log_prior(log_f.shape[2])
    log_F = mixture_log_probs(log_f)
    ratio = np.sum(log_f - log_F, axis=1)
    # Zero-probability rows contribute nothing even where log terms are -inf.
    expected = np.where(q > 0, q * (log_prior + ratio), 0.0)
    return float(np.sum(expected) - np.sum(_xlogx(q)))


def free_energy_logit_grad(log_f, q):
    """Gradient of the free energy w.r.t. the recognition logits, q held fixed.

    Both the ``<log f>`` terms and the ``<log F_j>`` terms (through the
    mixture) contribute.
    """
    log_f = check_log_factors(log_f)
    N = log_f.shape[0]
    f = np.exp(log_f)
    log_F = mixture_log_probs(log_f)
    Q = q.sum(axis=0)
    with np.errstate(divide="ignore"):
        log_r = log_f + np.log(Q) - np.log(N) - log_F
    r = np.exp(log_r)
    return q[:, None, :] - r - f * (1.0 - r.sum(axis=2, keepdims=True))


class PeerRPM(BaseEstimator):
    """Peer-supervised categorical RPM with one recognition network shared
    across the J views.

    Parameters
    ----------
    n_latents : int
        Latent cardinality K.
    hidden : tuple of int
        Hidden-layer widths of the recognition MLP.
    n_iter : int
        Number of EM iterations (one exact E-step each).
    m_steps : int
        Adam steps per E-step.
    lr : float
        Adam learning rate.
    learn_prior : bool
        Re-estimate the latent prior in closed form; a fixed uniform prior otherwise.
    random_state : int or None
        Seed for weight initialisation.
    """

    def __init__(self, n_latents=10, hidden=(50,), n_iter=200, m_steps=1, lr=1e-3,
                 learn_prior=False, random_state=None):
        self.n_latents = n_latents
        self.hidden = hidden
        self.n_iter = n_iter
        self.m_steps = m_steps
        self.lr = lr
        self.learn_prior = learn_prior
        self.random_state = random_state

    def _check_hyper(self):
        if int(self.n_latents) < 2:
            raise ValueError(f"n_latents (K) must be >= 2, got {self.n_latents}")
        if self.n_iter < 0 or self.m_steps < 0:
            raise ValueError("n_iter and m_steps must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    def _log_f(self, X):
        N, J, d = X.shape
        logits, cache = self.net_.forward_cached(X.reshape(N * J, d))
        return log_softmax(logits).reshape(N, J, -1), cache

    def fit(self, X, y=None):
        """Fit on grouped views ``X`` of shape ``(N, J, d)``; ``y`` is ignored."""
        self._check_hyper()
        X = check_views(X)
        N, J, d = X.shape
        if J < 2:
            raise ValueError("peer supervision needs at least J = 2 views per item")
        K = int(self.n_latents)
        self.net_ = mlp(d, tuple(self.hidden), CategoricalHead(K), seed=self.random_state)
        self.log_prior_ = _uniform_log_prior(K)
        opt = Adam(lr=self.lr)
        report = FitReport(seed=self.random_state)
        report.notes["m_steps_per_e_step"] = int(self.m_steps)

        log_f, cache = self._log_f(X)
        post = e_step_exact(log_f, self.log_prior_)
        report.record(0, "E", free_energy_discrete(log_f, post.q, self.log_prior_))
        for it in range(1, self.n_iter + 1):
            for _ in range(self.m_steps):
                g = free_energy_logit_grad(log_f, post.q).reshape(N * J, K)
                grads = self.net_.backward(cache, -g)
                good = {name: p.copy() for name, p in self.net_.params.items()}
                try:
                    opt.step(self.net_.params, grads)
                except FloatingPointError as exc:
                    report.status = "aborted"
                    self.report_ = report
                    raise NumericalAbort(str(exc), report) from exc
                if self.learn_prior:
                    self.log_prior_ = np.log(post.q.mean(axis=0))
                log_f, cache = self._log_f(X)
                value = free_energy_discrete(log_f, post.q, self.log_prior_) if np.all(np.isfinite(log_f)) \
                    else np.nan
                if not np.isfinite(value):
                    for name, p in self.net_.params.items():
                        p[...] = good[name]
                    report.status = "aborted"
                    self.report_ = report
                    raise NumericalAbort(f"non-finite free energy at iteration {it}", report)
                report.record(it, "M", value)
            post = e_step_exact(log_f, self.log_prior_)
            report.record(it, "E", free_energy_discrete(log_f, post.q, self.log_prior_))
        self.posterior_ = post
        self.report_ = report
        return self

    def predict_proba(self, X):
        """Recognition probabilities ``f(k | x)`` for single views ``X`` (B, d)."""
        check_is_fitted(self, "net_")
        return softmax(self.net_(np.asarray(X, dtype=float)), axis=1)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def posterior(self, X):
        """Exact posterior over the latent for grouped views, with the mixtures
        recomputed on ``X``."""
        check_is_fitted(self, "net_")
        X = check_views(X)
        return e_step_exact(self._log_f(X)[0], self.log_prior_)

    def score(self, X, y):
        """Assignment-matched accuracy of :meth:`predict` against labels."""
        from .metrics import matched_accuracy

        return matched_accuracy(self.predict(X), y, n_classes=self.n_latents).accuracy

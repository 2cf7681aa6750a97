"""Recognition-parametrised LDA over image patches.

Each image ``n`` has topic weights ``omega ~ Dir(alpha)``; each of its J
patches has a categorical texture latent ``z_j ~ Cat(omega)``. A shared
recognition network gives ``f(k | x_j)``, and the mixture ``F_j(k)``
averages it over images at patch position ``j``. The E-step is closed-form
coordinate ascent over ``q(omega) = Dir(alpha_n)`` and ``q(z_j) = gamma_j``.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_log_factors, check_views
from .discrete import DegenerateMixtureError, log_softmax, mixture_log_probs
from .nets import Adam, CategoricalHead, mlp
from .report import FitReport, NumericalAbort
from .special import digamma, logsumexp

__all__ = [
    "LdaVariational",
    "extract_patches",
    "e_step_lda",
    "e_step_residuals",
    "free_energy_lda",
    "lda_logit_grad",
    "representative_patches",
    "RPLDA",
    "write_topic_weights_csv",
    "write_top_patches_csv",
]

TOL = 1e-8
MAX_SWEEPS = 200
_LOG_TINY = np.log(1e-300)


@dataclass
class LdaVariational:
    """Dirichlet parameters ``alpha`` (N, K), patch posteriors ``gamma`` (N, J, K)."""

    alpha: np.ndarray
    gamma: np.ndarray
    converged: bool
    sweeps: int

    @property
    def mean_topic_weights(self):
        return self.alpha / self.alpha.sum(axis=1, keepdims=True)


def extract_patches(images, size):
    """Non-overlapping ``size x size`` patches in row-major order.

    Images are cropped to a multiple of ``size``. Returns (N, J, size*size).
    """
    images = np.asarray(images, dtype=float)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ValueError("images must have shape (N, H, W)")
    N, H, W = images.shape
    rows, cols = H // size, W // size
    if rows == 0 or cols == 0:
        raise ValueError(f"patch size {size} exceeds image size {H}x{W}")
    crop = images[:, :rows * size, :cols * size]
    p = crop.reshape(N, rows, size, cols, size).transpose(0, 1, 3, 2, 4)
    return p.reshape(N, rows * cols, size * size)


def _log_ratio(log_f):
    log_F = mixture_log_probs(log_f)  # (J, K)
    if np.any(log_F < _LOG_TINY):
        j, k = np.argwhere(log_F < _LOG_TINY)[0]
        raise DegenerateMixtureError(f"degenerate mixture component: F_{j}({k}) < 1e-300")
    return log_f - log_F


def _gamma_update(log_ratio, alpha):
    logits = digamma(alpha)[:, None, :] + log_ratio
    g = np.exp(logits - logsumexp(logits, axis=2, keepdims=True))
    return g / g.sum(axis=2, keepdims=True)


def e_step_lda(log_f, alpha0=1.0, tol=TOL, max_sweeps=MAX_SWEEPS, trace=None):
    """Coordinate ascent for ``q(omega)`` and the patch posteriors.

    Each sweep updates every ``gamma`` row given ``alpha_n`` and then
    ``alpha_n = alpha0 + sum_j gamma_j``. Stops when the largest change in
    ``gamma`` is below ``tol`` or after ``max_sweeps``.

    Parameters
    ----------
    log_f : ndarray, shape (N, J, K)
        Recognition log-probabilities.
    alpha0 : float
        Dirichlet prior concentration.
    trace : list or None
        If given, the free energy after every sweep is appended.
    """
    if alpha0 <= 0:
        raise ValueError(f"alpha must be positive, got {alpha0}")
    log_f = check_log_factors(log_f)
    N, J, K = log_f.shape
    log_ratio = _log_ratio(log_f)
    gamma = np.full((N, J, K), 1.0 / K)
    alpha = alpha0 + gamma.sum(axis=1)
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        new = _gamma_update(log_ratio, alpha)
        delta = np.max(np.abs(new - gamma))
        gamma = new
        alpha = alpha0 + gamma.sum(axis=1)
        if trace is not None:
            trace.append(free_energy_lda(log_f, alpha0, LdaVariational(alpha, gamma, False, sweeps)))
        if delta < tol:
            converged = True
            break
    return LdaVariational(alpha, gamma, converged, sweeps)


def e_step_residuals(log_f, alpha0, var):
    """Largest violation of either fixed-point equation."""
    log_ratio = _log_ratio(check_log_factors(log_f))
    r_alpha = np.max(np.abs(var.alpha - alpha0 - var.gamma.sum(axis=1)))
    r_gamma = np.max(np.abs(var.gamma - _gamma_update(log_ratio, var.alpha)))
    return max(r_alpha, r_gamma)


def _dirichlet_kl(alpha, alpha0):
    # KL(Dir(alpha_n) || Dir(alpha0 * 1)) per row
    K = alpha.shape[1]
    a_sum = alpha.sum(axis=1)
    e_log = digamma(alpha) - digamma(a_sum)[:, None]
    return (gammaln(a_sum) - gammaln(alpha).sum(axis=1) - gammaln(K * alpha0) + K * gammaln(alpha0)
            + np.sum((alpha - alpha0) * e_log, axis=1))


def free_energy_lda(log_f, alpha0, var):
    """Free energy with the ``theta``-independent ``log p_0`` terms dropped."""
    log_f = check_log_factors(log_f)
    log_ratio = _log_ratio(log_f)
    g = var.gamma
    e_log = digamma(var.alpha) - digamma(var.alpha.sum(axis=1))[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(g > 0, g * np.log(g), 0.0))
    expected = np.sum(np.where(g > 0, g * (e_log[:, None, :] + log_ratio), 0.0))
    return float(expected + ent - np.sum(_dirichlet_kl(var.alpha, alpha0)))


def lda_logit_grad(log_f, gamma):
    """Gradient of the free energy w.r.t. recognition logits, q held fixed."""
    log_f = check_log_factors(log_f)
    N = log_f.shape[0]
    f = np.exp(log_f)
    log_F = mixture_log_probs(log_f)
    G = gamma.sum(axis=0)  # (J, K)
    with np.errstate(divide="ignore"):
        r = np.exp(log_f + np.log(G) - np.log(N) - log_F)
    return gamma - r - f * (gamma.sum(axis=2, keepdims=True) - r.sum(axis=2, keepdims=True))


def representative_patches(probs, k, top_m):
    """Indices of the ``top_m`` rows with largest ``probs[:, k]``; ties by index."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or not 0 <= k < probs.shape[1]:
        raise ValueError("probs must be (P, K) and k a valid column")
    order = np.lexsort((np.arange(len(probs)), -probs[:, k]))
    return order[:top_m]


def write_topic_weights_csv(path, weights):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image"] + [f"topic_{k}" for k in range(weights.shape[1])])
        for n, row in enumerate(weights):
            w.writerow([n] + [repr(float(v)) for v in row])


def write_top_patches_csv(path, top):
    """``top`` maps texture index to a list of flat patch indices."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic", "rank", "patch"])
        for k, idx in top.items():
            for rank, i in enumerate(idx):
                w.writerow([k, rank, int(i)])


class RPLDA(BaseEstimator):
    """RP-LDA on patch sets.

    Parameters
    ----------
    n_topics : int
        Number of textures K.
    alpha : float
        Symmetric Dirichlet concentration (fixed).
    hidden : tuple of int
        Hidden widths of the shared patch MLP.
    n_iter : int
        EM iterations.
    m_steps : int
        Adam steps per E-step.
    lr : float
    random_state : int or None
    """

    def __init__(self, n_topics=10, alpha=1.0, hidden=(50,), n_iter=100, m_steps=1, lr=1e-3,
                 random_state=None):
        self.n_topics = n_topics
        self.alpha = alpha
        self.hidden = hidden
        self.n_iter = n_iter
        self.m_steps = m_steps
        self.lr = lr
        self.random_state = random_state

    def _log_f(self, X):
        N, J, d = X.shape
        logits, cache = self.net_.forward_cached(X.reshape(N * J, d))
        return log_softmax(logits).reshape(N, J, -1), cache

    def fit(self, X, y=None):
        """Fit on patch sets ``X`` of shape (N, J, d); see :func:`extract_patches`."""
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.n_topics) < 1:
            raise ValueError("n_topics must be >= 1")
        X = check_views(X)
        N, J, d = X.shape
        K = int(self.n_topics)
        self.net_ = mlp(d, tuple(self.hidden), CategoricalHead(K), seed=self.random_state)
        opt = Adam(lr=self.lr)
        report = FitReport(seed=self.random_state)
        self.report_ = report

        log_f, cache = self._log_f(X)
        var = e_step_lda(log_f, self.alpha)
        self._record_e(report, 0, log_f, var)
        for it in range(1, self.n_iter + 1):
            for _ in range(self.m_steps):
                g = lda_logit_grad(log_f, var.gamma).reshape(N * J, K)
                good = {name: p.copy() for name, p in self.net_.params.items()}
                try:
                    opt.step(self.net_.params, self.net_.backward(cache, -g))
                except FloatingPointError as exc:
                    report.status = "aborted"
                    raise NumericalAbort(str(exc), report) from exc
                log_f, cache = self._log_f(X)
                value = free_energy_lda(log_f, self.alpha, var) if np.all(np.isfinite(log_f)) else np.nan
                if not np.isfinite(value):
                    for name, p in self.net_.params.items():
                        p[...] = good[name]
                    report.status = "aborted"
                    raise NumericalAbort(f"non-finite free energy at iteration {it}", report)
                report.record(it, "M", value)
            var = e_step_lda(log_f, self.alpha)
            self._record_e(report, it, log_f, var)
        self.variational_ = var
        self.topic_weights_ = var.mean_topic_weights
        return self

    def _record_e(self, report, it, log_f, var):
        if not var.converged:
            report.warnings.append(f"E-step at iteration {it} stopped after {var.sweeps} sweeps")
        report.record(it, "E", free_energy_lda(log_f, self.alpha, var))

    def predict_proba(self, patches):
        """Recognition probabilities ``f(k | x)`` for single patches (B, d)."""
        check_is_fitted(self, "net_")
        return np.exp(log_softmax(self.net_(np.asarray(patches, dtype=float))))

    def predict(self, patches):
        return np.argmax(self.predict_proba(patches), axis=1)

    def transform(self, X):
        """Mean topic weights per image with mixtures recomputed on ``X``."""
        check_is_fitted(self, "net_")
        X = check_views(X)
        return e_step_lda(self._log_f(X)[0], self.alpha).mean_topic_weights

    def representative(self, X, k, top_m=5):
        """Flat (image * J + patch) indices of the patches most assigned to ``k``."""
        X = check_views(X)
        return representative_patches(self.predict_proba(X.reshape(-1, X.shape[2])), k, top_m)

    def score(self, X, labels):
        """Matched patch accuracy of :meth:`predict` against per-patch labels (N, J)."""
        from .metrics import matched_accuracy

        X = check_views(X)
        pred = self.predict(X.reshape(-1, X.shape[2]))
        return matched_accuracy(pred, np.asarray(labels).ravel(), n_classes=self.n_topics).accuracy

"""Recognition-parametrised Gaussian-process factor analysis.

Each latent dimension has an independent RBF GP prior over time. The
variational posterior for sequence ``n`` is set by ``M`` inducing values
per dimension at shared, fixed locations ``tau``. Their Gaussian moments
propagate to per-time marginals ``q(z_t) = N(m_t, diag(s_t))``. Recognition
networks map each observation ``x_jt`` to a Gaussian factor over ``z_t``.
The mixture term ``<log F_jt>`` is approximated by one of the estimators
in :mod:`rpmkit.estep`.

Gradients of the free energy with respect to the factor naturals, kernel,
inducing and auxiliary parameters come from JAX. The network part of the
chain rule is the hand-written backward pass in :mod:`rpmkit.nets`.
"""

import csv
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .estep import (
    AUX_FLOOR,
    gauss_log_normalizer,
    interior_value,
    mc_value,
    second_order_value,
    stat_mean,
    validate_aux_batch,
)
from .nets import Adam, GaussianHead, conv_net, mlp, read_weights, write_weights
from .report import FitReport, NumericalAbort
from .special import inv_softplus

jax.config.update("jax_enable_x64", True)

__all__ = [
    "METHODS",
    "RbfKernel",
    "InducingState",
    "kernel_gram",
    "latent_marginals",
    "kl_inducing",
    "free_energy_gpfa",
    "check_sequences",
    "RPGPFA",
    "write_latents_csv",
]

METHODS = ("mc", "second-order", "interior-bound")
JITTER = 1e-6
S_FLOOR = 1e-10


@dataclass(frozen=True)
class RbfKernel:
    """``sigma^2 exp(-(t - t')^2 / (2 l^2))`` stored through log-values."""

    log_lengthscale: float
    log_variance: float

    @classmethod
    def from_values(cls, lengthscale, variance):
        if lengthscale <= 0 or variance <= 0:
            raise ValueError("RBF lengthscale and variance must be positive")
        return cls(float(np.log(lengthscale)), float(np.log(variance)))

    @property
    def lengthscale(self):
        return float(np.exp(self.log_lengthscale))

    @property
    def variance(self):
        return float(np.exp(self.log_variance))


@dataclass
class InducingState:
    """Inducing locations ``tau`` (M,), means ``mu`` (N, K, M) and lower
    Cholesky factors ``chol`` (N, K, M, M) of the covariances."""

    tau: np.ndarray
    mu: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        if np.any(np.diff(self.tau) <= 0):
            raise ValueError("inducing locations must be strictly increasing")
        M = len(self.tau)
        if self.mu.shape[-1] != M or self.chol.shape[-2:] != (M, M):
            raise ValueError("inducing moments do not match the number of locations")

    @property
    def covariance(self):
        return self.chol @ np.swapaxes(self.chol, -1, -2)


# ---------------------------------------------------------------------------
# JAX kernels


def _gram(ls, var, ta, tb, square):
    d = ta[:, None] - tb[None, :]
    G = var * jnp.exp(-0.5 * d * d / (ls * ls))
    if square:
        G = G + JITTER * var * jnp.eye(len(ta))
    return G


def _marginals(ls, var, tau, times, mu, L):
    Kuu = _gram(ls, var, tau, tau, True)
    Kut = _gram(ls, var, tau, times, False)
    Lk = jnp.linalg.cholesky(Kuu)
    A = cho_solve((Lk, True), Kut)  # Kuu^{-1} k(tau, t), (M, T)
    m = A.T @ mu
    B = L.T @ A
    s = jnp.sum(B * B, axis=0) - jnp.sum(Kut * A, axis=0) + var * (1.0 + JITTER)
    return m, jnp.maximum(s, S_FLOOR)


def _kl_gauss_prior(ls, var, tau, mu, L):
    Kuu = _gram(ls, var, tau, tau, True)
    Lk = jnp.linalg.cholesky(Kuu)
    M = len(tau)
    W = jax.scipy.linalg.solve_triangular(Lk, L, lower=True)
    a = jax.scipy.linalg.solve_triangular(Lk, mu, lower=True)
    logdet_k = 2.0 * jnp.sum(jnp.log(jnp.diagonal(Lk)))
    logdet_s = 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(L))))
    return 0.5 * (jnp.sum(W * W) + a @ a - M + logdet_k - logdet_s)


def _whitened_terms(ls, var, tau, times, v, Lv):
    # u = Lk v with v ~ N(v, Lv Lv^T): marginals and KL(q(v) || N(0, I)).
    Lk = jnp.linalg.cholesky(_gram(ls, var, tau, tau, True))
    B = jax.scipy.linalg.solve_triangular(Lk, _gram(ls, var, tau, times, False), lower=True)
    m = B.T @ v
    C = Lv.T @ B
    s = jnp.sum(C * C, axis=0) - jnp.sum(B * B, axis=0) + var * (1.0 + JITTER)
    logdet = 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(Lv))))
    kl = 0.5 * (jnp.sum(Lv * Lv) + v @ v - len(tau) - logdet)
    return m, jnp.maximum(s, S_FLOOR), kl


def _chol_from_raw(raw):
    M = raw.shape[-1]
    diag = jax.nn.softplus(jnp.diagonal(raw, axis1=-2, axis2=-1))
    strict = jnp.tril(raw, -1)
    return strict + diag[..., None] * jnp.eye(M)


def _per_nk(fn):
    # map over latent dims k (kernel and inducing) and items n (inducing only)
    over_n = jax.vmap(fn, in_axes=(None, None, 0, 0))
    return jax.vmap(over_n, in_axes=(0, 0, 1, 1), out_axes=1)


def _objective(gp, h_all, J_all, times, tau, method, eps=None, aux=None):
    """Free energy and its per-(n, j, t) terms.

    ``h_all`` (J, N, T, K) and ``J_all`` (J, N, T, K, K) are the factor
    naturals; ``gp`` holds log kernel values (K,) and the whitened inducing
    parameters ``v`` (N, K, M) and ``chol_raw`` (N, K, M, M).
    """
    ls = jnp.exp(gp["log_lengthscale"])
    var = jnp.exp(gp["log_variance"])
    L = _chol_from_raw(gp["chol_raw"])
    terms = _per_nk(lambda l, va, v, Lc: _whitened_terms(l, va, tau, times, v, Lc))
    m, s, kl = terms(ls, var, gp["v"], L)  # (N, K, T), (N, K, T), (N, K)
    m = jnp.swapaxes(m, 1, 2)  # (N, T, K)
    s = jnp.swapaxes(s, 1, 2)
    S = s[..., None] * jnp.eye(m.shape[-1])

    Jn, N, T, K = h_all.shape
    phi = gauss_log_normalizer(h_all, J_all)  # (J, N, T)
    mu_q = jax.vmap(jax.vmap(stat_mean))(m, S)  # (N, T, D)
    E = jnp.concatenate([h_all, J_all.reshape(Jn, N, T, K * K)], axis=-1)
    log_f = jnp.einsum("jntd,ntd->jnt", E, mu_q) - phi

    # Banks are indexed (j, t) and hold all N items; queries run over n.
    hb = jnp.swapaxes(h_all, 1, 2)  # (J, T, N, K)
    Jb = jnp.swapaxes(J_all, 1, 2)
    pb = jnp.swapaxes(phi, 1, 2)
    mq = jnp.swapaxes(m, 0, 1)  # (T, N, K)
    Sq = jnp.swapaxes(S, 0, 1)
    if method == "second-order":
        fn = lambda h, J, p, mm, SS: second_order_value(h, J, p, mm, SS)[0]
        fn = jax.vmap(fn, in_axes=(None, None, None, 0, 0))  # over n
        fn = jax.vmap(fn, in_axes=(0, 0, 0, 0, 0))  # over t
        fn = jax.vmap(fn, in_axes=(0, 0, 0, None, None))  # over j
        log_F = jnp.swapaxes(fn(hb, Jb, pb, mq, Sq), 1, 2)  # (J, N, T)
        ratio = log_f - log_F
    elif method == "mc":
        ep = jnp.swapaxes(eps, 0, 1)  # (T, N, S, K)
        fn = jax.vmap(mc_value, in_axes=(None, None, None, 0, 0, 0))
        fn = jax.vmap(fn, in_axes=(0, 0, 0, 0, 0, 0))
        fn = jax.vmap(fn, in_axes=(0, 0, 0, None, None, None))
        log_F = jnp.swapaxes(fn(hb, Jb, pb, mq, Sq, ep), 1, 2)
        ratio = log_f - log_F
    elif method == "interior-bound":
        ha = jnp.transpose(aux["h"], (1, 2, 0, 3))  # (J, T, N, K)
        Ja = jnp.transpose(aux["J"], (1, 2, 0, 3, 4))
        Ja = 0.5 * (Ja + jnp.swapaxes(Ja, -1, -2))
        idx = jnp.arange(N)
        fn = jax.vmap(interior_value, in_axes=(None, None, None, 0, 0, 0, 0, 0))
        fn = jax.vmap(fn, in_axes=(0, 0, 0, None, 0, 0, 0, 0))
        fn = jax.vmap(fn, in_axes=(0, 0, 0, None, None, None, 0, 0))
        ratio = jnp.swapaxes(fn(hb, Jb, pb, idx, mq, Sq, ha, Ja), 1, 2)
    else:
        raise ValueError(f"unknown E-step method {method!r}; choose from {METHODS}")
    value = jnp.sum(ratio) - Jn * N * T * jnp.log(N) - jnp.sum(kl)
    return value, (ratio, kl)


_value_and_grad = jax.jit(
    jax.value_and_grad(_objective, argnums=(0, 1, 2, 7), has_aux=True), static_argnums=(5,)
)
_value_only = jax.jit(_objective, static_argnums=(5,))


# ---------------------------------------------------------------------------
# public numeric API


def kernel_gram(kernel, times_a, times_b=None):
    """RBF Gram matrix; ``times_b=None`` gives the jittered square case."""
    ta = jnp.asarray(times_a, dtype=float)
    square = times_b is None
    tb = ta if square else jnp.asarray(times_b, dtype=float)
    return np.asarray(_gram(kernel.lengthscale, kernel.variance, ta, tb, square))


def latent_marginals(kernel, tau, mu, chol, times):
    """Per-time mean and variance of one latent dimension for one item.

    Parameters
    ----------
    kernel : RbfKernel
    tau : ndarray, shape (M,)
    mu : ndarray, shape (M,)
    chol : ndarray, shape (M, M)
        Lower Cholesky factor of the inducing covariance.
    times : ndarray, shape (T,)
    """
    m, s = _marginals(kernel.lengthscale, kernel.variance, jnp.asarray(tau, dtype=float),
                      jnp.asarray(times, dtype=float), jnp.asarray(mu, dtype=float),
                      jnp.asarray(chol, dtype=float))
    return np.asarray(m), np.asarray(s)


def kl_inducing(kernel, tau, mu, chol):
    """``KL(N(mu, chol chol^T) || N(0, K_tau))`` for one dimension and item."""
    return float(_kl_gauss_prior(kernel.lengthscale, kernel.variance, jnp.asarray(tau, dtype=float),
                                 jnp.asarray(mu, dtype=float), jnp.asarray(chol, dtype=float)))


def _raw_from_chol(chol):
    raw = np.tril(chol, -1)
    d = np.diagonal(chol, axis1=-2, axis2=-1)
    if np.any(d <= 0):
        raise ValueError("inducing Cholesky factors need a positive diagonal")
    idx = np.arange(chol.shape[-1])
    raw[..., idx, idx] = inv_softplus(d)
    return raw


def _kuu_chol(kernels, tau):
    return np.stack([np.linalg.cholesky(kernel_gram(k, tau)) for k in kernels])  # (K, M, M)


def _whiten(kernels, state):
    from scipy.linalg import solve_triangular as solve

    Lk = _kuu_chol(kernels, state.tau)
    N, K, M = state.mu.shape
    v = np.empty_like(state.mu)
    Lv = np.empty_like(state.chol)
    for k in range(K):
        v[:, k] = solve(Lk[k], state.mu[:, k].T, lower=True).T
        for n in range(N):
            Lv[n, k] = solve(Lk[k], state.chol[n, k], lower=True)
    return v, Lv


def _unwhiten(kernels, tau, v, Lv):
    Lk = _kuu_chol(kernels, tau)
    mu = np.einsum("kab,nkb->nka", Lk, v)
    return mu, np.einsum("kab,nkbc->nkac", Lk, Lv)


def _gp_params(kernels, state):
    v, Lv = _whiten(kernels, state)
    return {
        "log_lengthscale": jnp.array([k.log_lengthscale for k in kernels]),
        "log_variance": jnp.array([k.log_variance for k in kernels]),
        "v": jnp.asarray(v),
        "chol_raw": jnp.asarray(_raw_from_chol(Lv)),
    }


def _locate_nonfinite(ratio, kl):
    ratio = np.asarray(ratio)
    bad = np.argwhere(~np.isfinite(ratio))
    if bad.size:
        j, n, t = bad[0]
        return f"non-finite free-energy term at (n={n}, j={j}, t={t})"
    bad = np.argwhere(~np.isfinite(np.asarray(kl)))
    if bad.size:
        n, k = bad[0]
        return f"non-finite inducing KL at (n={n}, k={k})"
    return "non-finite free energy"


def free_energy_gpfa(kernels, state, h, J, times, method="second-order", eps=None, aux=None):
    """Free energy for given factor naturals.

    Parameters
    ----------
    kernels : sequence of RbfKernel, length K
    state : InducingState
    h : ndarray, shape (J, N, T, K)
    J : ndarray, shape (J, N, T, K, K)
        Natural parameters of every recognition factor.
    times : ndarray, shape (T,)
    method : {"mc", "second-order", "interior-bound"}
    eps : ndarray, shape (N, T, S, K), required for ``"mc"``
    aux : dict with ``"h"`` (N, J, T, K) and ``"J"`` (N, J, T, K, K), required for ``"interior-bound"``
    """
    if method not in METHODS:
        raise ValueError(f"unknown E-step method {method!r}; choose from {METHODS}")
    if method == "mc" and eps is None:
        raise ValueError("the mc method needs fixed draws eps")
    if method == "interior-bound" and aux is None:
        raise ValueError("the interior method needs auxiliary factors")
    h = np.asarray(h, dtype=float)
    J = np.asarray(J, dtype=float)
    if method == "interior-bound":
        aux = _validated_aux(aux, J)
    value, (ratio, kl) = _value_only(_gp_params(kernels, state), jnp.asarray(h), jnp.asarray(J),
                                     jnp.asarray(times, dtype=float), jnp.asarray(state.tau),
                                     method, None if eps is None else jnp.asarray(eps), aux)
    value = float(value)
    if not np.isfinite(value):
        raise FloatingPointError(_locate_nonfinite(ratio, kl))
    return value


def _validated_aux(aux, J_all):
    # Bank for aux (n, j, t) is J_all[j, :, t]; clamp against all its members.
    N, Jn, T, K = aux["h"].shape
    bank = np.transpose(J_all, (0, 2, 1, 3, 4))  # (J, T, N, K, K)
    bank = np.broadcast_to(bank[None], (N,) + bank.shape).reshape(N * Jn * T, N, K, K)
    Ja = validate_aux_batch(bank, np.asarray(aux["J"]).reshape(N * Jn * T, K, K), AUX_FLOOR)
    return {"h": np.asarray(aux["h"], dtype=float), "J": Ja.reshape(N, Jn, T, K, K)}


def check_sequences(X):
    """Normalise observations to a list of J arrays of shape (N, T, d_j)."""
    views = [X] if isinstance(X, np.ndarray) and X.ndim == 3 else list(X)
    if not views:
        raise ValueError("need at least one factor")
    out = []
    for v in views:
        v = np.asarray(v, dtype=float)
        if v.ndim == 2:
            v = v[..., None]
        if v.ndim != 3:
            raise ValueError("each factor must have shape (N, T, d)")
        if not np.all(np.isfinite(v)):
            raise ValueError("observations must be finite")
        out.append(v)
    N, T = out[0].shape[:2]
    if any(v.shape[:2] != (N, T) for v in out):
        raise ValueError("all factors must share (N, T)")
    if T < 2:
        raise ValueError("sequences need T >= 2")
    return out


def write_latents_csv(path, means, variances):
    """Rows ``n, t, k, mean, variance``."""
    N, T, K = means.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "t", "k", "mean", "variance"])
        for n in range(N):
            for t in range(T):
                for k in range(K):
                    w.writerow([n, t, k, repr(float(means[n, t, k])), repr(float(variances[n, t, k]))])


class RPGPFA(BaseEstimator):
    """RP-GPFA estimator fitted by joint Adam ascent of the free energy.

    Parameters
    ----------
    n_latents : int
        Latent dimensionality K.
    n_inducing : int
        Inducing points M per dimension, placed uniformly over the time range.
    method : {"mc", "second-order", "interior-bound"}
        Estimator for the mixture term.
    hidden : tuple of int
        Hidden widths of the dense part of each factor's recognition network.
    conv_channels : tuple of int
        Channels of 1-D convolution + max-pool blocks applied to each frame
        before the dense layers; empty for a plain MLP.
    conv_kernel, conv_pool : int
        Kernel width and pooling width of every convolutional block.
    n_iter : int
        Adam steps.
    lr : float
        Adam learning rate for the networks and kernel.
    lr_variational : float or None
        Adam learning rate for inducing and auxiliary parameters; ``lr`` when None.
    n_mc_samples : int
        Fixed draws per (n, t) for ``method="mc"``.
    init_lengthscale : float or None
        Initial RBF lengthscale; a tenth of the time range when None.
    init_variance : float
        Initial RBF variance.
    learn_kernel : bool
        Whether kernel hyperparameters are optimised.
    random_state : int or None
    """

    def __init__(self, n_latents=1, n_inducing=20, method="second-order", hidden=(50,), conv_channels=(),
                 conv_kernel=5, conv_pool=2, n_iter=2000, lr=1e-2, lr_variational=None, n_mc_samples=20,
                 init_lengthscale=None, init_variance=1.0, learn_kernel=True, random_state=None):
        self.n_latents = n_latents
        self.n_inducing = n_inducing
        self.method = method
        self.hidden = hidden
        self.conv_channels = conv_channels
        self.conv_kernel = conv_kernel
        self.conv_pool = conv_pool
        self.n_iter = n_iter
        self.lr = lr
        self.lr_variational = lr_variational
        self.n_mc_samples = n_mc_samples
        self.init_lengthscale = init_lengthscale
        self.init_variance = init_variance
        self.learn_kernel = learn_kernel
        self.random_state = random_state

    # -- setup -------------------------------------------------------------

    def _check_hyper(self, T):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.n_latents) < 1:
            raise ValueError("n_latents must be >= 1")
        if not 1 <= int(self.n_inducing) <= T:
            raise ValueError(f"n_inducing must lie in 1..T={T}, got {self.n_inducing}")
        if self.n_iter < 0 or self.lr < 0 or self.n_mc_samples < 1:
            raise ValueError("n_iter, lr must be non-negative and n_mc_samples >= 1")

    def _init_variational(self, N, rng):
        K, M = int(self.n_latents), int(self.n_inducing)
        tau = np.linspace(self.times_[0], self.times_[-1], M)
        # whitened parameters; v = 0, Lv = I puts q(U) at the prior
        params = {
            "v": np.zeros((N, K, M)),
            "chol_raw": _raw_from_chol(np.broadcast_to(np.eye(M), (N, K, M, M)).copy()),
        }
        state = InducingState(tau, *_unwhiten(self.kernels_, tau, params["v"], np.asarray(
            _chol_from_raw(jnp.asarray(params["chol_raw"])))))
        extra = {}
        if self.method == "mc":
            extra["eps"] = rng.standard_normal((N, len(self.times_), int(self.n_mc_samples), K))
        if self.method == "interior-bound":
            params["aux_h"] = np.zeros((N, len(self.views_dims_), len(self.times_), K))
            params["aux_J"] = np.zeros((N, len(self.views_dims_), len(self.times_), K, K))
        return state, params, extra

    def _make_net(self, d, K, seed):
        if not self.conv_channels:
            return mlp(d, tuple(self.hidden), GaussianHead(K), seed=seed)
        return conv_net((1, 1, d), tuple(self.conv_channels), (1, int(self.conv_kernel)),
                        (1, int(self.conv_pool)), tuple(self.hidden), GaussianHead(K), seed=seed)

    def _naturals(self, views):
        hs, Js, caches = [], [], []
        for net, v in zip(self.nets_, views):
            N, T, d = v.shape
            (h, J), cache = net.forward_cached(v.reshape(N * T, d))
            K = h.shape[1]
            hs.append(h.reshape(N, T, K))
            Js.append(J.reshape(N, T, K, K))
            caches.append(cache)
        return np.stack(hs), np.stack(Js), caches

    def _gp_dict(self, params):
        return {
            "log_lengthscale": jnp.asarray(self._kparams["log_lengthscale"]),
            "log_variance": jnp.asarray(self._kparams["log_variance"]),
            "v": jnp.asarray(params["v"]),
            "chol_raw": jnp.asarray(params["chol_raw"]),
        }

    def _run(self, views, params, extra, n_iter, update_model, report):
        tau = jnp.asarray(self.inducing_.tau)
        times = jnp.asarray(self.times_)
        eps = extra.get("eps")
        eps = None if eps is None else jnp.asarray(eps)
        var_groups = dict(params)
        model_groups = {}
        if update_model:
            model_groups.update(self._kparams if self.learn_kernel else {})
            for j, net in enumerate(self.nets_):
                model_groups.update({f"net{j}.{k}": p for k, p in net.params.items()})
        groups = {**var_groups, **model_groups}
        lr_var = self.lr if self.lr_variational is None else self.lr_variational
        opt_var, opt_model = Adam(lr=lr_var), Adam(lr=self.lr)

        def evaluate():
            h, J, caches = self._naturals(views)
            aux = None
            if self.method == "interior-bound":
                fixed = _validated_aux({"h": params["aux_h"], "J": params["aux_J"]}, J)
                params["aux_J"][...] = fixed["J"]
                aux = {"h": jnp.asarray(params["aux_h"]), "J": jnp.asarray(params["aux_J"])}
            out = _value_and_grad(self._gp_dict(params), jnp.asarray(h), jnp.asarray(J), times, tau,
                                  self.method, eps, aux)
            return out, caches

        ((value, (ratio, kl)), grads), caches = evaluate()
        for it in range(n_iter + 1):
            value = float(value)
            if not np.isfinite(value):
                report.status = "aborted"
                raise NumericalAbort(f"{_locate_nonfinite(ratio, kl)} at step {it}", report)
            report.record(it, "M" if update_model else "E", value)
            if it == n_iter:
                break
            g_gp, g_h, g_J, g_aux = grads
            step = {"v": -np.asarray(g_gp["v"]), "chol_raw": -np.asarray(g_gp["chol_raw"])}
            if self.method == "interior-bound":
                step["aux_h"] = -np.asarray(g_aux["h"])
                step["aux_J"] = -np.asarray(g_aux["J"])
            if update_model:
                if self.learn_kernel:
                    step["log_lengthscale"] = -np.asarray(g_gp["log_lengthscale"])
                    step["log_variance"] = -np.asarray(g_gp["log_variance"])
                g_h, g_J = np.asarray(g_h), np.asarray(g_J)
                for j, net in enumerate(self.nets_):
                    K = g_h.shape[-1]
                    up = (-g_h[j].reshape(-1, K), -g_J[j].reshape(-1, K, K))
                    step.update({f"net{j}.{k}": g for k, g in net.backward(caches[j], up).items()})
            snapshot = {k: p.copy() for k, p in groups.items()}
            try:
                opt_var.step(var_groups, {k: step[k] for k in var_groups})
                if model_groups:
                    opt_model.step(model_groups, {k: step[k] for k in model_groups})
                ((value, (ratio, kl)), grads), caches = evaluate()
                if not np.isfinite(float(value)):
                    raise FloatingPointError(_locate_nonfinite(ratio, kl))
            except FloatingPointError as exc:
                for k, p in groups.items():
                    p[...] = snapshot[k]
                report.status = "aborted"
                raise NumericalAbort(f"{exc} at step {it + 1}; restored last good state", report) from exc
        return value

    def _store_variational(self, params):
        Lv = np.asarray(_chol_from_raw(jnp.asarray(params["chol_raw"])))
        tau = self.inducing_.tau
        self.inducing_ = InducingState(tau, *_unwhiten(self.kernels_, tau, params["v"], Lv))
        gp = self._gp_dict(params)
        ls = jnp.exp(gp["log_lengthscale"])
        var = jnp.exp(gp["log_variance"])
        terms = _per_nk(lambda l, va, v, Lc: _whitened_terms(l, va, jnp.asarray(tau), jnp.asarray(self.times_), v, Lc))
        m, s, _ = terms(ls, var, gp["v"], jnp.asarray(Lv))
        return np.swapaxes(np.asarray(m), 1, 2), np.swapaxes(np.asarray(s), 1, 2)

    @property
    def kernels_(self):
        return [RbfKernel(float(a), float(b)) for a, b in
                zip(self._kparams["log_lengthscale"], self._kparams["log_variance"])]

    # -- estimator API ---------------------------------------------------

    def fit(self, X, y=None, times=None):
        """Fit on sequences ``X``: an (N, T, d) array or a list of J such arrays."""
        views = check_sequences(X)
        N, T = views[0].shape[:2]
        self._check_hyper(T)
        self.times_ = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)
        if self.times_.shape != (T,) or np.any(np.diff(self.times_) <= 0):
            raise ValueError("times must be strictly increasing with length T")
        self.views_dims_ = [v.shape[2] for v in views]
        K = int(self.n_latents)
        rng = np.random.default_rng(self.random_state)
        seeds = rng.integers(0, 2**31 - 1, size=len(views) + 1)
        self.nets_ = [self._make_net(d, K, int(s)) for d, s in zip(self.views_dims_, seeds[:-1])]
        ls0 = self.init_lengthscale or (self.times_[-1] - self.times_[0]) / 10.0
        self._kparams = {
            "log_lengthscale": np.full(K, np.log(ls0)),
            "log_variance": np.full(K, np.log(self.init_variance)),
        }
        self.inducing_, params, extra = self._init_variational(N, np.random.default_rng(int(seeds[-1])))
        self._extra = extra
        report = FitReport(seed=self.random_state)
        report.notes.update(method=self.method, joint_ascent=True)
        self.report_ = report
        try:
            self._run(views, params, extra, int(self.n_iter), True, report)
        finally:
            self._params = params
            self.latent_means_, self.latent_vars_ = self._store_variational(params)
        return self

    def fit_transform(self, X, y=None, times=None):
        return self.fit(X, times=times).latent_means_

    def transform(self, X, n_iter=None):
        """Posterior latent means for new sequences with the model held fixed.

        Only the inducing (and auxiliary) parameters are optimised; the
        mixtures are formed from ``X`` itself.
        """
        check_is_fitted(self, "nets_")
        views = check_sequences(X)
        N, T = views[0].shape[:2]
        if T != len(self.times_) or [v.shape[2] for v in views] != self.views_dims_:
            raise ValueError("X must match the training sequence length and factor dimensions")
        saved = self.inducing_
        _, params, extra = self._init_variational(N, np.random.default_rng(self.random_state))
        report = FitReport(seed=self.random_state)
        self._run(views, params, extra, int(self.n_iter if n_iter is None else n_iter), False, report)
        means, _ = self._store_variational(params)
        self.inducing_ = saved
        self.transform_report_ = report
        return means

    def free_energy(self, X):
        """Free energy of the training state on the training sequences ``X``."""
        check_is_fitted(self, "nets_")
        views = check_sequences(X)
        h, J, _ = self._naturals(views)
        aux = None
        if self.method == "interior-bound":
            aux = {"h": self._params["aux_h"], "J": self._params["aux_J"]}
        return free_energy_gpfa(self.kernels_, self.inducing_, h, J, self.times_, self.method,
                                self._extra.get("eps"), aux)

    def score(self, X, z_true):
        """Negative nMSE of the affine map from latent means to ``z_true``."""
        from .metrics import nmse_regression

        return -nmse_regression(self.transform(X), z_true)

    def write_latents(self, path):
        check_is_fitted(self, "latent_means_")
        write_latents_csv(path, self.latent_means_, self.latent_vars_)

    def save(self, path):
        """Network blocks, then a kernel block and an inducing block."""
        check_is_fitted(self, "nets_")
        blocks = []
        for net in self.nets_:
            blocks.extend(net.weight_blocks())
        blocks.append([self._kparams["log_lengthscale"], self._kparams["log_variance"]])
        blocks.append([self.inducing_.tau, self.inducing_.mu, self.inducing_.chol])
        write_weights(path, blocks)

    def load(self, path):
        """Restore parameters saved by :meth:`save` into a fitted estimator of the same shape."""
        check_is_fitted(self, "nets_")
        blocks = read_weights(path)
        kernel_block, inducing_block = blocks[-2], blocks[-1]
        offset = 0
        for net in self.nets_:
            n = len(net.weight_blocks())
            net.set_weight_blocks(blocks[offset:offset + n])
            offset += n
        self._kparams["log_lengthscale"][...] = kernel_block[0]
        self._kparams["log_variance"][...] = kernel_block[1]
        self.inducing_ = InducingState(*inducing_block)
        v, Lv = _whiten(self.kernels_, self.inducing_)
        if v.shape != self._params["v"].shape:
            raise ValueError("checkpoint inducing state does not match the fitted shape")
        self._params["v"][...] = v
        self._params["chol_raw"][...] = _raw_from_chol(Lv)
        self.latent_means_, self.latent_vars_ = self._store_variational(self._params)
        return self


def gradient_check(method="second-order", seed=0, step=1e-6):
    """Finite-difference check of every parameter group on a tiny instance.

    K=1, T=4, M=3, N=2 with a one-hidden-layer network. Returns the worst
    ``max|analytic - numeric| / max|numeric|`` over the groups, and the
    per-group values.
    """
    rng = np.random.default_rng(seed)
    N, T, d = 2, 4, 3
    X = rng.normal(size=(N, T, d))
    model = RPGPFA(n_latents=1, n_inducing=3, method=method, hidden=(4,), n_iter=0, n_mc_samples=3,
                   random_state=seed).fit(X)
    p = model._params
    p["v"][...] = rng.normal(size=p["v"].shape)
    p["chol_raw"][...] += 0.2 * np.tril(rng.normal(size=p["chol_raw"].shape))
    if method == "interior-bound":
        # half the least negative precision keeps every J - J_aux negative
        p["aux_h"][...] = 0.1 * rng.normal(size=p["aux_h"].shape)
        p["aux_J"][...] = 0.5 * np.max(model._naturals([X])[1])
    eps = model._extra.get("eps")
    eps = None if eps is None else jnp.asarray(eps)
    times, tau = jnp.asarray(model.times_), jnp.asarray(model.inducing_.tau)

    def aux():
        if method != "interior-bound":
            return None
        return {"h": jnp.asarray(p["aux_h"]), "J": jnp.asarray(p["aux_J"])}

    def value():
        h, J, _ = model._naturals([X])
        return float(_value_only(model._gp_dict(p), jnp.asarray(h), jnp.asarray(J), times, tau, method, eps,
                                 aux())[0])

    h, J, caches = model._naturals([X])
    (_, _), (g_gp, g_h, g_J, g_aux) = _value_and_grad(model._gp_dict(p), jnp.asarray(h), jnp.asarray(J), times,
                                                       tau, method, eps, aux())
    g_net = model.nets_[0].backward(caches[0], (np.asarray(g_h[0]).reshape(-1, 1),
                                                 np.asarray(g_J[0]).reshape(-1, 1, 1)))
    groups = {
        "v": (p["v"], g_gp["v"]),
        "chol_raw": (p["chol_raw"], g_gp["chol_raw"]),
        "log_lengthscale": (model._kparams["log_lengthscale"], g_gp["log_lengthscale"]),
        "log_variance": (model._kparams["log_variance"], g_gp["log_variance"]),
    }
    groups.update({f"net.{k}": (a, g_net[k]) for k, a in model.nets_[0].params.items()})
    if method == "interior-bound":
        groups["aux_h"] = (p["aux_h"], g_aux["h"])
        groups["aux_J"] = (p["aux_J"], g_aux["J"])
    errors = {}
    for name, (arr, g) in groups.items():
        g = np.asarray(g)
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            up = value()
            arr[i] = orig - step
            down = value()
            arr[i] = orig
            num[i] = (up - down) / (2 * step)
        if name == "chol_raw":
            # only the lower triangle is a parameter
            mask = np.tril(np.ones(arr.shape[-2:], dtype=bool))
            g, num = g[..., mask], num[..., mask]
        errors[name] = float(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-8))
    worst = max(errors.values())
    if any(np.isnan(e) for e in errors.values()):
        worst = float("nan")
    return worst, errors

"""Approximations to the mixture term ``<log F_j(z)>`` for Gaussian latents.

``F_j`` is the average of the N recognition factors of one factor index j
(a :class:`FactorBank`). Its log has no closed-form expectation under a
Gaussian ``q``, so three estimators are provided:

* :func:`mc_log_mixture` - reparametrised Monte-Carlo with fixed draws.
* :func:`second_order_log_mixture` - expansion of ``log F`` to second order
  in ``t(z)`` around its mean under ``q``.
* :func:`interior_bound_terms` - a closed-form lower bound on
  ``<log f_n / F>`` built from an auxiliary exponential factor.

The ``*_value`` kernels are pure JAX functions of arrays; the RP-GPFA
objective vmaps and differentiates them directly.
"""

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular
from jax.scipy.special import logsumexp as jlogsumexp

from .expfam import GaussianMoment, InvalidParameterError
from .nets import Adam
from .special import symmetrize

jax.config.update("jax_enable_x64", True)

__all__ = [
    "FactorBank",
    "AuxFactor",
    "MixtureExpectation",
    "AUX_FLOOR",
    "gauss_log_normalizer",
    "stat_mean",
    "stat_cov",
    "mc_value",
    "second_order_value",
    "interior_value",
    "mc_log_mixture",
    "second_order_log_mixture",
    "interior_bound_terms",
    "validate_aux",
    "validate_aux_batch",
    "optimize_aux",
]

AUX_FLOOR = 1e-4
_LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class FactorBank:
    """Recognition factors ``eta_j(x_j^(m))``, m = 1..N, for one factor index."""

    h: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.h, dtype=float))
        J = np.asarray(self.J, dtype=float)
        if J.ndim == 2:
            J = J[None]
        N, K = h.shape
        if N < 1 or J.shape != (N, K, K):
            raise InvalidParameterError("bank needs h of shape (N, K) and J of shape (N, K, K)")
        J = symmetrize(J)
        try:
            np.linalg.cholesky(-2.0 * J)
        except np.linalg.LinAlgError:
            raise InvalidParameterError("bank contains an invalid Gaussian natural parameter") from None
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "J", J)

    @classmethod
    def from_naturals(cls, nats):
        return cls(np.stack([n.h for n in nats]), np.stack([n.J for n in nats]))

    @property
    def N(self):
        return self.h.shape[0]

    @property
    def K(self):
        return self.h.shape[1]

    @property
    def log_normalizers(self):
        return np.asarray(gauss_log_normalizer(self.h, self.J))

    @property
    def stacked(self):
        """``(N, K + K^2)`` matrix of stacked natural parameters ``[h; vec(J)]``."""
        return np.concatenate([self.h, self.J.reshape(self.N, -1)], axis=1)


@dataclass(frozen=True)
class AuxFactor:
    """Unnormalised exponent ``exp(t(z)^T eta_aux)``; need not be valid on its own."""

    h: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h", np.atleast_1d(np.asarray(self.h, dtype=float)))
        object.__setattr__(self, "J", symmetrize(np.atleast_2d(np.asarray(self.J, dtype=float))))

    @classmethod
    def zeros(cls, K):
        return cls(np.zeros(K), np.zeros((K, K)))


@dataclass
class MixtureExpectation:
    value: float
    method: str
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# JAX kernels


def gauss_log_normalizer(h, J):
    """Batched ``Phi(h, J)`` over leading axes; constant ``(K/2) log 2 pi`` included."""
    h = jnp.asarray(h)
    J = jnp.asarray(J)
    P = -(J + jnp.swapaxes(J, -1, -2))
    L = jnp.linalg.cholesky(P)
    w = solve_triangular(L, h[..., None], lower=True)[..., 0]
    logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    K = h.shape[-1]
    return 0.5 * jnp.sum(w * w, axis=-1) - 0.5 * logdet + 0.5 * K * _LOG_2PI


def stat_mean(m, S):
    """``E[t(z)] = [m; vec(S + m m^T)]``."""
    return jnp.concatenate([m, (S + jnp.outer(m, m)).ravel()])


def stat_cov(m, S):
    """Covariance of ``t(z)`` under ``N(m, S)``, blocks ordered as in :func:`stat_mean`."""
    K = m.shape[0]
    cross = jnp.einsum("b,ac->abc", m, S) + jnp.einsum("ab,c->abc", S, m)
    cross = cross.reshape(K, K * K)
    mm = jnp.outer(m, m)

    def h(A, B):
        return jnp.einsum("ac,bd->abcd", A, B) + jnp.einsum("ad,bc->abcd", A, B)

    quad = (h(S, S) + h(S, mm) + h(mm, S)).reshape(K * K, K * K)
    top = jnp.concatenate([S, cross], axis=1)
    bottom = jnp.concatenate([cross.T, quad], axis=1)
    return jnp.concatenate([top, bottom], axis=0)


def _stack(h, J):
    return jnp.concatenate([h, J.reshape(J.shape[:-2] + (-1,))], axis=-1)


def mc_value(h_bank, J_bank, phi_bank, m, S, eps):
    """Monte-Carlo ``<log F>`` using fixed standard-normal draws ``eps`` (S, K)."""
    L = jnp.linalg.cholesky(S)
    z = m + eps @ L.T
    a = z @ h_bank.T + jnp.einsum("sk,nkl,sl->sn", z, J_bank, z) - phi_bank
    return jnp.mean(jlogsumexp(a, axis=1)) - jnp.log(h_bank.shape[0])


def second_order_value(h_bank, J_bank, phi_bank, m, S):
    """Second-order ``<log F>`` and the component weights ``pi``."""
    E = _stack(h_bank, J_bank)
    mu = stat_mean(m, S)
    V = stat_cov(m, S)
    a = E @ mu - phi_bank
    lse = jlogsumexp(a)
    pi = jnp.exp(a - lse)
    dev = E - pi @ E
    # 0.5 tr(E^T V E [diag(pi) - pi pi^T]) = 0.5 sum_m pi_m dev_m^T V dev_m
    corr = 0.5 * jnp.sum(pi * jnp.einsum("md,de,me->m", dev, V, dev))
    return lse - jnp.log(E.shape[0]) + corr, pi


def interior_value(h_bank, J_bank, phi_bank, n, m, S, h_aux, J_aux):
    """Lower bound ``-KL(q || f_hat_n) + log Gamma_n`` on ``<log f_n / F>``."""
    phi_hat = gauss_log_normalizer(h_bank - h_aux, J_bank - J_aux)
    log_mean = jlogsumexp(phi_hat - phi_bank) - jnp.log(h_bank.shape[0])
    log_gamma = phi_hat[n] - phi_bank[n] - log_mean
    K = m.shape[0]
    Lq = jnp.linalg.cholesky(S)
    ent = 0.5 * K * (1.0 + _LOG_2PI) + jnp.sum(jnp.log(jnp.diagonal(Lq)))
    eta_hat = _stack(h_bank[n] - h_aux, J_bank[n] - J_aux)
    kl = -ent - (eta_hat @ stat_mean(m, S) - phi_hat[n])
    return -kl + log_gamma


# ---------------------------------------------------------------------------
# public estimators


def _q_arrays(q):
    if not isinstance(q, GaussianMoment):
        raise TypeError("q must be a GaussianMoment")
    return jnp.asarray(q.m), jnp.asarray(q.S)


def mc_log_mixture(bank: FactorBank, q: GaussianMoment, eps) -> MixtureExpectation:
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    if eps.shape[0] < 1 or eps.shape[1] != bank.K:
        raise ValueError(f"eps must have shape (S, {bank.K}) with S >= 1")
    m, S = _q_arrays(q)
    phi = bank.log_normalizers
    # Per-draw values give a standard error alongside the estimate.
    per_draw = jax.vmap(lambda e: mc_value(bank.h, bank.J, phi, m, S, e[None]))(eps)
    per_draw = np.asarray(per_draw)
    se = per_draw.std(ddof=1) / np.sqrt(len(per_draw)) if len(per_draw) > 1 else np.nan
    return MixtureExpectation(float(per_draw.mean()), "mc", {"se": float(se), "draws": len(per_draw)})


def second_order_log_mixture(bank: FactorBank, q) -> MixtureExpectation:
    """Second-order estimate; ``q`` is a :class:`GaussianMoment` (its
    sufficient-statistic moments are formed internally)."""
    m, S = _q_arrays(q)
    value, pi = second_order_value(bank.h, bank.J, bank.log_normalizers, m, S)
    return MixtureExpectation(float(value), "second-order", {"pi": np.asarray(pi)})


def _aux_is_valid(bank, aux, floor=0.0):
    B = -2.0 * (bank.J - aux.J)
    return bool(np.all(np.linalg.eigvalsh(symmetrize(B)) > floor))


def interior_bound_terms(bank: FactorBank, q: GaussianMoment, aux: AuxFactor, n: int) -> MixtureExpectation:
    if not 0 <= n < bank.N:
        raise IndexError(f"item index {n} outside 0..{bank.N - 1}")
    if not _aux_is_valid(bank, aux):
        raise InvalidParameterError(
            "auxiliary factor leaves an invalid natural parameter; pass it through validate_aux first"
        )
    m, S = _q_arrays(q)
    phi = bank.log_normalizers
    value = interior_value(bank.h, bank.J, phi, n, m, S, aux.h, aux.J)
    return MixtureExpectation(float(value), "interior-bound", {})


def validate_aux_batch(J_bank, J_aux, floor=AUX_FLOOR):
    """Project auxiliary precisions so ``-2 (J_m - J_aux)`` has eigenvalues >= floor.

    Parameters
    ----------
    J_bank : ndarray, shape (B, N, K, K)
        Bank precisions; for aux item ``b`` every ``m`` must satisfy the constraint.
    J_aux : ndarray, shape (B, K, K)

    Returns
    -------
    ndarray, shape (B, K, K)
        Corrected auxiliary J. Items already valid are returned unchanged.
    """
    J_aux = symmetrize(np.array(J_aux, dtype=float))
    P_bank = -2.0 * symmetrize(J_bank)
    tol = 1e-12
    for _ in range(4 * J_bank.shape[1] + 4):
        B = P_bank + 2.0 * J_aux[:, None]
        lam = np.linalg.eigvalsh(B)  # (B, N, K), ascending
        worst = np.argmin(lam[..., 0], axis=1)
        lam_min = lam[np.arange(len(worst)), worst, 0]
        bad = np.flatnonzero(lam_min < floor - tol)
        if bad.size == 0:
            break
        Bw = B[bad, worst[bad]]
        w, U = np.linalg.eigh(Bw)
        lift = np.maximum(w, floor) - w
        J_aux[bad] += 0.5 * np.einsum("bik,bk,bjk->bij", U, lift, U)
        J_aux[bad] = symmetrize(J_aux[bad])
    return J_aux


def validate_aux(bank: FactorBank, aux: AuxFactor, floor=AUX_FLOOR) -> AuxFactor:
    """Clamp eigenvalues of ``-2 (J_m - J_aux)`` at ``floor`` jointly over all m."""
    J = validate_aux_batch(bank.J[None], aux.J[None], floor)[0]
    return AuxFactor(aux.h.copy(), J)


def optimize_aux(bank: FactorBank, q: GaussianMoment, n: int, steps: int, aux=None, lr=0.05):
    """Adam ascent of the interior bound in the auxiliary parameters.

    The iterate is re-validated after every step and the best one is returned.
    """
    aux = validate_aux(bank, aux if aux is not None else AuxFactor.zeros(bank.K))
    if steps <= 0:
        return aux
    m, S = _q_arrays(q)
    phi = jnp.asarray(bank.log_normalizers)

    def neg_bound(h_aux, J_aux):
        J_aux = 0.5 * (J_aux + J_aux.T)
        return -interior_value(bank.h, bank.J, phi, n, m, S, h_aux, J_aux)

    grad_fn = jax.jit(jax.value_and_grad(neg_bound, argnums=(0, 1)))
    params = {"h": aux.h.copy(), "J": aux.J.copy()}
    opt = Adam(lr=lr)
    best_val, best = None, aux
    for _ in range(steps + 1):
        val, (gh, gJ) = grad_fn(params["h"], params["J"])
        val = float(val)
        if best_val is None or val < best_val:
            best_val, best = val, AuxFactor(params["h"].copy(), params["J"].copy())
        opt.step(params, {"h": np.asarray(gh), "J": symmetrize(np.asarray(gJ))})
        params["J"] = validate_aux_batch(bank.J[None], params["J"][None])[0]
    return best

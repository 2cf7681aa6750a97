"""Scalar special functions and small linear-algebra helpers."""

import numpy as np
from scipy.special import logsumexp, softmax

__all__ = [
    "digamma",
    "logsumexp",
    "softmax",
    "softplus",
    "inv_softplus",
    "symmetrize",
    "jittered_cholesky",
]

# Bernoulli-number coefficients B_2k / (2k) for the asymptotic expansion,
# terms x^-2 .. x^-14.
_PSI_SERIES = np.array(
    [
        1.0 / 12.0,
        -1.0 / 120.0,
        1.0 / 252.0,
        -1.0 / 240.0,
        1.0 / 132.0,
        -691.0 / 32760.0,
        1.0 / 12.0,
    ]
)
_PSI_LIFT = 6.0


def digamma(x):
    """Digamma function for positive arguments.

    Small arguments are lifted with ``psi(x) = psi(x + 1) - 1/x`` until
    ``x >= 6``; the asymptotic series is then summed through ``x**-14``.

    Parameters
    ----------
    x : float or ndarray
        Strictly positive argument(s).

    Returns
    -------
    psi : float or ndarray
        Same shape as ``x``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    shift = np.zeros_like(x)
    small = x < _PSI_LIFT
    while np.any(small):
        shift[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _PSI_LIFT
    inv2 = 1.0 / (x * x)
    # Horner evaluation of sum_k c_k inv2^k.
    poly = np.zeros_like(x)
    for c in _PSI_SERIES[::-1]:
        poly = (poly + c) * inv2
    out = np.log(x) - 0.5 / x - poly + shift
    return out[0] if scalar else out


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def symmetrize(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def jittered_cholesky(a, jitter=1e-8, max_jitter=1e-4):
    """Lower Cholesky factor of a symmetrized SPD matrix.

    A plain factorization is tried first. On failure a diagonal jitter
    starting at ``jitter`` is added and doubled until ``max_jitter``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the matrix is not positive definite even with ``max_jitter``.
    """
    a = symmetrize(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[-1])
    eps = jitter
    while eps <= max_jitter * (1 + 1e-12):
        try:
            return np.linalg.cholesky(a + eps * eye)
        except np.linalg.LinAlgError:
            eps *= 2.0
    raise np.linalg.LinAlgError(
        f"matrix not positive definite after jitter {max_jitter:g}"
    )

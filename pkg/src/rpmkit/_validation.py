"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

__all__ = ["check_views", "check_log_factors", "check_random_state_seed"]


def check_views(X, n_views=None, min_items=1):
    """Validate grouped observations of shape ``(N, J, d)``."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected observations of shape (N, J, d), got ndim={X.ndim}")
    if X.shape[0] < min_items:
        raise ValueError(f"need at least {min_items} item(s), got {X.shape[0]}")
    if n_views is not None and X.shape[1] != n_views:
        raise ValueError(f"expected {n_views} views per item, got {X.shape[1]}")
    return X


def check_log_factors(log_f):
    log_f = np.asarray(log_f, dtype=float)
    if log_f.ndim != 3:
        raise ValueError("recognition log-probabilities must have shape (N, J, K)")
    if log_f.shape[0] == 0:
        raise ValueError("empty dataset: mixtures need at least one item")
    if np.any(np.isnan(log_f)) or np.any(log_f == np.inf):
        raise ValueError("recognition log-probabilities must not be NaN or +inf")
    return log_f


def check_random_state_seed(seed):
    """Integer seed for :func:`numpy.random.default_rng`-style generators."""
    if seed is None:
        return None
    return int(seed)

"""Evaluation metrics: assignment-matched accuracy, regression nMSE and
posterior entropy."""

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AssignmentResult",
    "hungarian",
    "matched_accuracy",
    "nmse_regression",
    "mean_posterior_entropy",
    "metric_record",
]


def _solve(cost):
    # Shortest augmenting path with row/column potentials, O(K^3).
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[col] = row matched to col (1-based)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            cols = np.arange(1, n + 1)
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(cols[np.argmin(cand)])
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=int)
    assign[p[1:] - 1] = np.arange(n)
    return assign, u[1:], v[1:]


def _augment(row, adj, match_col, seen, banned_col):
    for c in adj[row]:
        if c == banned_col or seen[c]:
            continue
        seen[c] = True
        r = match_col[c]
        if r < 0 or _augment(r, adj, match_col, seen, banned_col):
            match_col[c] = row
            return True
    return False


def _lexicographic(cost, assign, u, v):
    # Every optimal assignment uses only zero-reduced-cost edges for the optimal
    # duals; pick the lexicographically smallest perfect matching among them.
    n = cost.shape[0]
    scale = max(1.0, float(np.max(np.abs(cost))))
    tight = (cost - u[:, None] - v[None, :]) <= 1e-9 * scale
    adj = [list(np.flatnonzero(tight[i])) for i in range(n)]
    match_row = assign.copy()
    match_col = np.full(n, -1)
    match_col[match_row] = np.arange(n)
    fixed_cols = np.zeros(n, dtype=bool)
    for i in range(n):
        for c in adj[i]:
            if fixed_cols[c]:
                continue
            if match_row[i] == c:
                break
            # Try to re-route so row i takes column c: its current partner r
            # must find an alternating path to the column i releases.
            trial_col = match_col.copy()
            r = trial_col[c]
            released = match_row[i]
            trial_col[c] = i
            trial_col[released] = -1
            seen = fixed_cols.copy()
            seen[c] = True
            sub_adj = [[cc for cc in adj[row] if not fixed_cols[cc]] for row in range(n)]
            if _augment(r, sub_adj, trial_col, seen, banned_col=c):
                match_col = trial_col
                match_row[match_col[match_col >= 0]] = np.flatnonzero(match_col >= 0)
                break
        fixed_cols[match_row[i]] = True
    return match_row


def hungarian(cost):
    """Minimum-cost perfect matching of a square cost matrix.

    Ties are broken towards the lexicographically smallest row -> column
    permutation.

    Returns
    -------
    perm : ndarray of int
        ``perm[i]`` is the column assigned to row ``i``.
    total : float
        Sum of the selected costs.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=int), 0.0
    assign, u, v = _solve(cost)
    perm = _lexicographic(cost, assign, u, v)
    return perm, float(cost[np.arange(len(perm)), perm].sum())


@dataclass
class AssignmentResult:
    permutation: np.ndarray
    accuracy: float
    confusion: np.ndarray


def matched_accuracy(predictions, labels, n_classes=None):
    """Accuracy after the best one-to-one relabelling of predicted latents.

    ``confusion[k, c]`` counts items with latent ``k`` and label ``c``;
    ``permutation[k]`` is the label assigned to latent ``k``.
    """
    pred = np.asarray(predictions, dtype=int).ravel()
    lab = np.asarray(labels, dtype=int).ravel()
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels must have the same length")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    if np.any(pred < 0) or np.any(lab < 0):
        raise ValueError("latent indices and labels must be non-negative")
    K = max(int(pred.max()) + 1, int(lab.max()) + 1, n_classes or 0)
    confusion = np.zeros((K, K), dtype=int)
    np.add.at(confusion, (pred, lab), 1)
    perm, total = hungarian(-confusion)
    return AssignmentResult(perm, -total / pred.size, confusion)


def nmse_regression(inferred, truth):
    """Normalised squared error of the best affine map from inferred to true latents.

    ``inferred`` has shape ``(N, T)`` or ``(N, T, K)``; ``truth`` ``(N, T)`` or
    ``(N, T, D)``. With several truth dimensions each is regressed on all
    inferred dimensions and the per-dimension nMSE values are averaged.
    """
    X = np.asarray(inferred, dtype=float)
    Y = np.asarray(truth, dtype=float)
    if X.shape[:2] != Y.shape[:2]:
        raise ValueError("inferred and truth must agree on (N, T)")
    X = X.reshape(X.shape[0] * X.shape[1], -1)
    Y = Y.reshape(Y.shape[0] * Y.shape[1], -1)
    Yc = Y - Y.mean(axis=0)
    denom = np.sum(Yc ** 2, axis=0)
    if np.any(denom <= 0):
        raise ValueError("truth is constant: nMSE denominator is zero")
    A = np.column_stack([X - X.mean(axis=0), np.ones(len(X))])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    resid = Y - A @ coef
    return float(np.mean(np.sum(resid ** 2, axis=0) / denom))


def mean_posterior_entropy(q):
    """Average entropy (nats) of the rows of a row-stochastic matrix."""
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(q), 0.0)
    return float(-terms.sum(axis=1).mean())


def metric_record(metric, value, seed, cfg_hash):
    """One JSON metric line ``{metric, value, seed, config_hash}``."""
    return json.dumps(
        {"metric": metric, "value": float(value), "seed": seed, "config_hash": cfg_hash},
        sort_keys=True,
    )

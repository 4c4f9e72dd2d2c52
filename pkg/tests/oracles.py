"""Independent reference computations used by the tests.

Nothing here calls the closed forms under test; each oracle solves the
defining optimization or enumeration problem directly.
"""

from __future__ import annotations

import numpy as np


def pairwise_differences(mu):
    """All ``mu[k] - mu[j]`` in row-major ``(k, j)`` order by enumeration."""
    mu = list(mu)
    return np.array([a - b for a in mu for b in mu])


def group_mse(w, mu, sigma2, p, n, k):
    """Leading-term MSE of ``sum_j w_j mu_hat_j`` as an estimator of ``mu_k``.

    Bias and variance of the linear combination of independent cell means
    with variances ``sigma2_j / (n p_j)``.
    """
    w = np.asarray(w, float)
    mu = np.asarray(mu, float)
    bias = w @ mu - mu[k]
    var = np.sum(w ** 2 * np.asarray(sigma2) / (n * np.asarray(p)))
    return bias ** 2 + var


def kkt_oracle_row(mu, sigma2, p, n, k):
    """Minimize the row-``k`` MSE subject to ``sum(w) = 1`` via its KKT system."""
    mu = np.asarray(mu, float)
    J = mu.size
    b = mu - mu[k]
    A = np.outer(b, b) + np.diag(np.asarray(sigma2) / (n * np.asarray(p)))
    kkt = np.zeros((J + 1, J + 1))
    kkt[:J, :J] = 2 * A
    kkt[:J, J] = 1.0
    kkt[J, :J] = 1.0
    rhs = np.zeros(J + 1)
    rhs[J] = 1.0
    return np.linalg.solve(kkt, rhs)[:J]


def penalized_lstsq(y, labels, J, penalties, first_stage):
    """Minimize ``sum_i (y_i - m_{D_i})^2 + sum_{k,j} lam_kj (m_k - first_stage_j)^2``.

    Stacks observation rows and square-root-penalty rows into one least
    squares problem (requires nonnegative penalties).
    """
    rows, target = [], []
    for yi, d in zip(y, labels):
        r = np.zeros(J)
        r[d] = 1.0
        rows.append(r)
        target.append(yi)
    for k in range(J):
        for j in range(J):
            lam = penalties[k, j]
            if lam > 0:
                r = np.zeros(J)
                r[k] = np.sqrt(lam)
                rows.append(r)
                target.append(np.sqrt(lam) * first_stage[j])
    sol, *_ = np.linalg.lstsq(np.array(rows), np.array(target), rcond=None)
    return sol


def grid_min_two_groups(mu, sigma2, p, n, k, lo=-2.0, hi=2.0, points=400001):
    """Dense grid search over the single free weight of a two-group row."""
    other = 1 - k
    grid = np.linspace(lo, hi, points)
    mu = np.asarray(mu, float)
    s = np.asarray(sigma2) / (n * np.asarray(p))
    bias = grid * (mu[other] - mu[k])
    vals = bias ** 2 + (1 - grid) ** 2 * s[k] + grid ** 2 * s[other]
    i = np.argmin(vals)
    return grid[i], vals[i]


def textbook_cp(y, labels, partition):
    """Mallows C_p from scratch: fit block means, pooled full-model variance."""
    y = np.asarray(y, float)
    labels = np.asarray(labels)
    J = int(labels.max()) + 1
    n = y.size
    full_fit = np.array([y[labels == j].mean() for j in range(J)])
    sse_full = np.sum((y - full_fit[labels]) ** 2)
    sigma2 = sse_full / (n - J)
    block = np.asarray(partition)[labels]
    fit = np.array([y[block == b].mean() for b in block])
    sse_sub = np.sum((y - fit) ** 2)
    return sse_sub / sigma2 - n + 2 * len(set(partition))


def brute_partitions(J):
    """Set partitions of ``range(J)`` by recursive insertion (as frozensets)."""
    if J == 0:
        return [[]]
    out = []
    for part in brute_partitions(J - 1):
        for i in range(len(part)):
            out.append(part[:i] + [part[i] | {J - 1}] + part[i + 1:])
        out.append(part + [frozenset({J - 1})])
    return out


def simulate_psi_risk(gamma, delta, draws, seed):
    """Asymptotic risk by direct simulation of the limiting error.

    The limit of ``sqrt(n)(mu_pcs - mu)`` is ``Z - u / (1 + q)`` with
    ``x = Z + delta``, ``u = x - (gamma'x / sum gamma)``, ``q = sum gamma u^2``;
    the risk is ``E[sum_k gamma_k psi_k^2]``.
    """
    gamma = np.asarray(gamma, float)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((draws, gamma.size)) / np.sqrt(gamma)
    x = z + delta
    u = x - (x @ gamma / gamma.sum())[:, None]
    q = np.sum(gamma * u * u, axis=1)
    psi = z - u / (1.0 + q)[:, None]
    vals = np.sum(gamma * psi * psi, axis=1)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(draws)

"""Pairwise cross-smoothing (PCS) of group means.

Each group mean is replaced by a combination of all first-stage cell means,
``mu_pcs[k] = sum_j W[k, j] * mu_hat[j]`` with rows of ``W`` summing to one.
The same estimator can be parameterized by pair-specific penalties
``lambda[k, j]`` of the penalized least squares problem; both forms are
supported and convertible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ExistenceError, InputError
from .groups import DeltaOperator, GroupSummary

ROW_SUM_TOL = 1e-10
_RENORMALIZE_TOL = 1e-8


def _finish_rows(weights: np.ndarray) -> np.ndarray:
    """Remove floating drift from row sums; refuse genuine violations."""
    sums = weights.sum(axis=-1, keepdims=True)
    if np.any(~np.isfinite(sums)) or np.any(np.abs(sums - 1.0) >= _RENORMALIZE_TOL):
        raise ArithmeticError(f"weight rows do not sum to one (max deviation "
                              f"{np.nanmax(np.abs(sums - 1.0)):.3g})")
    return weights / sums


@dataclass(frozen=True)
class WeightMatrix:
    """Row-stochastic ``J x J`` smoothing weights; entries may be negative."""

    values: np.ndarray

    def __post_init__(self):
        w = np.array(self.values, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 2:
            raise InputError(f"weights must be a square J x J matrix, got shape {w.shape}")
        dev = np.abs(w.sum(axis=1) - 1.0)
        if not np.all(np.isfinite(w)) or np.any(dev > ROW_SUM_TOL):
            raise InputError(f"weight rows must sum to one (max deviation {dev.max():.3g})")
        w.setflags(write=False)
        object.__setattr__(self, "values", w)

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class PenaltyMatrix:
    """Pairwise penalties ``lambda[k, j]`` with a zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        lam = np.array(self.values, dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or lam.shape[0] < 2:
            raise InputError(f"penalties must be a square J x J matrix, got shape {lam.shape}")
        if not np.all(np.isfinite(lam)):
            raise InputError("penalties must be finite")
        if np.any(np.diag(lam) != 0):
            raise InputError("penalties must have a zero diagonal")
        lam.setflags(write=False)
        object.__setattr__(self, "values", lam)

    @property
    def n_groups(self) -> int:
        return self.values.shape[0]

    def check_existence(self, counts) -> None:
        """Raise unless ``sum_l lambda[k, l] > -n_k`` for every row ``k``."""
        counts = np.asarray(counts, dtype=float)
        if counts.shape != (self.n_groups,):
            raise InputError("penalty matrix and summary disagree on J")
        totals = self.values.sum(axis=1)
        for k in range(self.n_groups):
            if not totals[k] > -counts[k]:
                raise ExistenceError(
                    f"row {k}: sum of penalties {totals[k]:.6g} must exceed -n_k = "
                    f"{-counts[k]:.6g}; the penalized problem has no unique minimizer",
                    row=k, total=float(totals[k]))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class PcsEstimate:
    """Smoothed group means together with the weights that produced them."""

    estimates: np.ndarray
    weights: WeightMatrix
    first_stage: np.ndarray
    source: str
    names: tuple[str, ...] = field(default=())
    warnings: tuple[str, ...] = field(default=())


def optimal_weight_array(means, gamma, n) -> np.ndarray:
    """MSE-optimal PCS weights evaluated in double-sum form.

    Works on stacked problems: ``means`` and ``gamma`` have shape
    ``(..., J)`` and ``n`` broadcasts against the leading dimensions. The
    result has shape ``(..., J, J)``.

    Row ``k`` is ``gamma_j (1 + n c_kj) / D`` with
    ``c_kj = sum_m gamma_m (mu_k - mu_m)(mu_j - mu_m)`` and
    ``D = sum_l gamma_l + n/2 sum_{l,m} gamma_l gamma_m (mu_l - mu_m)^2``.
    """
    means = np.asarray(means, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = np.asarray(n, dtype=float)
    diff = means[..., :, None] - means[..., None, :]
    cross = (diff * gamma[..., None, :]) @ np.swapaxes(diff, -1, -2)
    num = gamma[..., None, :] * (1.0 + n[..., None, None] * cross)
    spread = np.einsum("...l,...m,...lm->...", gamma, gamma, diff * diff)
    den = gamma.sum(axis=-1) + 0.5 * n * spread
    return _finish_rows(num / den[..., None, None])


def optimal_weight_kron(means, gamma, n) -> np.ndarray:
    """Same weights as :func:`optimal_weight_array`, via Kronecker products.

    Materializes ``J^2 x J^2`` matrices; kept as an independent check on the
    double-sum evaluation.
    """
    mu = np.asarray(means, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    J = mu.size
    delta = DeltaOperator(J)
    g = np.diag(gamma)
    m1 = np.kron(g, g)
    dmu = delta.matrix @ mu
    den = gamma.sum() + 0.5 * n * dmu @ m1 @ dmu
    out = np.empty((J, J))
    for k in range(J):
        left = delta.block(k) @ mu
        for j in range(J):
            out[k, j] = gamma[j] * (1.0 + n * left @ g @ (delta.block(j) @ mu)) / den
    return out


def _validate_truth(mu, gamma, n):
    mu = np.asarray(mu, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    if mu.shape != gamma.shape or mu.size < 2:
        raise InputError("mu and gamma must be vectors of equal length J >= 2")
    if not np.all(gamma > 0) or not np.all(np.isfinite(gamma)):
        raise InputError("precisions gamma must be positive and finite")
    if not n >= 1:
        raise InputError("sample size n must be >= 1")
    return mu, gamma


def oracle_weights(mu, gamma, n) -> WeightMatrix:
    """Weights minimizing each group's leading-term MSE at the true parameters.

    Parameters
    ----------
    mu : array_like, shape (J,)
        True group means.
    gamma : array_like, shape (J,)
        True precisions ``p_j / sigma2_j``.
    n : float
        Sample size.
    """
    mu, gamma = _validate_truth(mu, gamma, n)
    return WeightMatrix(optimal_weight_array(mu, gamma, float(n)))


def plugin_weights(summary: GroupSummary) -> WeightMatrix:
    """Oracle weight formula evaluated at the sample means, precisions and ``n``.

    All groups must be non-empty with positive variance (per-group mode
    needs ``n_j >= 2``); use a pooled summary or a variance floor otherwise.
    """
    summary.require_nonempty()
    summary.require_positive_variances()
    gamma = summary.precisions
    return WeightMatrix(optimal_weight_array(summary.means, gamma, float(summary.n)))


def pcs_estimate(summary: GroupSummary, weights, source: str = "plug-in") -> PcsEstimate:
    """Apply weights to the first-stage means."""
    if not isinstance(weights, WeightMatrix):
        weights = WeightMatrix(weights)
    if weights.n_groups != summary.n_groups:
        raise InputError(f"weights are {weights.n_groups}x{weights.n_groups} but the "
                         f"summary has {summary.n_groups} groups")
    est = weights.values @ summary.means
    return PcsEstimate(est, weights, summary.means, source, summary.names)


def pcs_plugin(summary: GroupSummary) -> PcsEstimate:
    """Feasible PCS: plug-in weights applied to the cell means."""
    return pcs_estimate(summary, plugin_weights(summary), "plug-in")


def weights_from_penalties(penalties: PenaltyMatrix, counts) -> np.ndarray:
    lam = penalties.values
    counts = np.asarray(counts, dtype=float)
    penalties.check_existence(counts)
    den = counts + lam.sum(axis=1)
    w = lam / den[:, None]
    w[np.diag_indices_from(w)] = counts / den
    return w


def pcs_from_penalties(summary: GroupSummary, penalties) -> PcsEstimate:
    """Closed-form minimizer of least squares plus pairwise penalties.

    ``mu_pcs[k] = (n_k ybar_k + sum_j lambda_kj mu_hat_j) / (n_k + sum_l lambda_kl)``.
    Empty groups are allowed (their first stage is 0) but trigger a warning.
    """
    if not isinstance(penalties, PenaltyMatrix):
        penalties = PenaltyMatrix(penalties)
    if penalties.n_groups != summary.n_groups:
        raise InputError("penalty matrix and summary disagree on J")
    notes = []
    if np.any(summary.empty):
        empty = [summary.names[j] for j in np.flatnonzero(summary.empty)]
        msg = f"empty groups {empty} enter with first-stage mean 0"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    w = weights_from_penalties(penalties, summary.counts)
    weights = WeightMatrix(_finish_rows(w))
    est = PcsEstimate(weights.values @ summary.means, weights, summary.means, "fixed-lambda",
                      summary.names, tuple(notes))
    return est


def penalties_from_weights(weights, summary: GroupSummary) -> PenaltyMatrix:
    """Invert ``w_kj = lambda_kj / (n_k + sum_l lambda_kl)``.

    Gives ``lambda_kj = n_k w_kj / w_kk``. Rows with ``w_kk = 0`` have no
    finite penalty representation. A negative ``w_kk`` maps to penalties
    that violate the existence condition.
    """
    if not isinstance(weights, WeightMatrix):
        weights = WeightMatrix(weights)
    w = weights.values
    if weights.n_groups != summary.n_groups:
        raise InputError("weights and summary disagree on J")
    own = np.diag(w)
    zero = np.flatnonzero(own == 0)
    if zero.size:
        raise ExistenceError(f"row {int(zero[0])}: own weight is 0, no finite penalty "
                             "representation exists", row=int(zero[0]))
    lam = summary.counts[:, None] * w / own[:, None]
    lam[np.diag_indices_from(lam)] = 0.0
    return PenaltyMatrix(lam)

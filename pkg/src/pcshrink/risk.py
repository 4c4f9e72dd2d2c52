"""Finite-sample MSE of smoothing weights, weighted loss, and the asymptotic
risk of the plug-in PCS under locally close systems of group means."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateVarianceError, InputError
from .groups import DeltaOperator, GroupSummary

MAX_RISK_GROUPS = 16
_CHUNK_PAIRS = 1 << 14


@dataclass(frozen=True)
class RiskInputs:
    """True means, variances and cell probabilities of a design."""

    mu: np.ndarray
    sigma2: np.ndarray
    p: np.ndarray
    n: float = 1.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        s2 = np.asarray(self.sigma2, dtype=float).ravel()
        p = np.asarray(self.p, dtype=float).ravel()
        if not (mu.shape == s2.shape == p.shape) or mu.size < 2:
            raise InputError("mu, sigma2 and p must be vectors of equal length J >= 2")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-10:
            raise InputError("probabilities must be positive and sum to one")
        if np.any(s2 <= 0):
            raise InputError("variances must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", s2)
        object.__setattr__(self, "p", p)

    @property
    def gamma(self) -> np.ndarray:
        return self.p / self.sigma2

    @property
    def v0(self) -> np.ndarray:
        return np.diag(1.0 / self.gamma)

    @property
    def w(self) -> np.ndarray:
        return np.diag(self.gamma)

    @property
    def ols_risk(self) -> float:
        """``tr(W V0)``, which equals ``J``."""
        return float(np.trace(self.w @ self.v0))


def pcs_group_mse(weights_row, inputs: RiskInputs, k: int) -> float:
    """Leading-term MSE of group ``k`` under weights ``weights_row``.

    Squared bias ``(sum_{j!=k} w_j (mu_k - mu_j))^2`` plus the variances of
    the cell means weighted by ``w_j^2``.
    """
    w = np.asarray(weights_row, dtype=float)
    mu, s2, p, n = inputs.mu, inputs.sigma2, inputs.p, inputs.n
    others = np.arange(mu.size) != k
    off = w[others]
    bias = np.sum(off * (mu[k] - mu[others]))
    own = 1.0 - off.sum()
    return float(bias ** 2 + own ** 2 * s2[k] / (n * p[k])
                 + np.sum(off ** 2 * s2[others] / (n * p[others])))


def pcs_group_mse_quadratic(weights_row, inputs: RiskInputs, k: int) -> float:
    """The same MSE written as ``w' D_k mu mu' D_k' w + w' diag(gamma)^-1 w / n``."""
    w = np.asarray(weights_row, dtype=float)
    dk_mu = DeltaOperator(inputs.mu.size).block(k) @ inputs.mu
    return float((w @ dk_mu) ** 2 + w @ (inputs.v0 @ w) / inputs.n)


def weighted_mse(weights, mu, gamma, n) -> np.ndarray:
    """``sum_k gamma_k MSE_k`` of a (stack of) weight matrices.

    ``weights`` has shape ``(..., J, J)``; ``mu`` and ``gamma`` ``(..., J)``.
    """
    weights = np.asarray(weights, dtype=float)
    mu = np.asarray(mu, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    diff = mu[..., None, :] - mu[..., :, None]  # [k, j] = mu_j - mu_k
    bias = np.sum(weights * diff, axis=-1)
    var = np.sum(weights ** 2 / gamma[..., None, :], axis=-1) / np.asarray(n, float)[..., None]
    return np.sum(gamma * (bias ** 2 + var), axis=-1)


def weighted_loss(estimate, truth, weight) -> float:
    """``(estimate - truth)' W (estimate - truth)``.

    ``weight`` may be the full matrix ``W`` or the vector of its diagonal.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape or estimate.ndim != 1:
        raise InputError("estimate and truth must be vectors of equal length")
    err = estimate - truth
    weight = np.asarray(weight, dtype=float)
    if weight.ndim == 1:
        if weight.shape != err.shape:
            raise InputError("dimension mismatch between estimate and weights")
        return float(np.sum(weight * err * err))
    if weight.shape != (err.size, err.size):
        raise InputError("dimension mismatch between estimate and weight matrix")
    return float(err @ weight @ err)


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    std_error: float
    ols_risk: float
    draws: int
    seed: int


class _RiskForms:
    """Quadratic forms of the asymptotic risk integrand for given precisions."""

    def __init__(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        J = gamma.size
        delta = DeltaOperator(J).matrix
        g = np.diag(gamma)
        v0 = np.diag(1.0 / gamma)
        m1 = np.kron(g, g)
        m2 = np.kron(g, np.outer(gamma, gamma))
        m3 = np.kron(g, gamma[:, None])
        self.trace_term = float(np.trace(delta.T @ m3 @ v0))
        c = m2 - self.trace_term * m1 + 2.0 * m3 @ v0 @ delta.T @ m1
        self.c = c
        self.num_form = delta.T @ c @ delta
        self.den_form = delta.T @ m1 @ delta
        self.total_precision = float(np.trace(np.linalg.inv(v0)))
        self.ols_risk = float(np.trace(g @ v0))

    def integrand(self, x: np.ndarray) -> np.ndarray:
        d0 = self.total_precision + 0.5 * np.einsum("ri,ij,rj->r", x, self.den_form, x)
        quad = np.einsum("ri,ij,rj->r", x, self.num_form, x)
        return (quad - 2.0 * self.total_precision * self.trace_term) / d0 ** 2


def asymptotic_risk_pcs(gamma, delta, draws: int = 200_000, seed: int = 0,
                        threads: int = 1) -> RiskEstimate:
    """Monte Carlo evaluation of the plug-in PCS asymptotic weighted risk.

    Integrates over ``Z ~ N(0, diag(1/gamma))`` with antithetic pairs
    ``(Z, -Z)``. Draws are generated in fixed chunks, each from its own
    counter-based stream keyed by ``(seed, chunk)``, so the estimate is
    identical for any ``threads``.

    Parameters
    ----------
    gamma : array_like or RiskInputs
        Precisions ``p_j / sigma2_j`` (or a :class:`RiskInputs`).
    delta : array_like, shape (J,)
        Local parameter.
    draws : int
        Number of integrand evaluations (at least 1000).
    """
    if isinstance(gamma, RiskInputs):
        gamma = gamma.gamma
    gamma = np.asarray(gamma, dtype=float).ravel()
    delta = np.asarray(delta, dtype=float).ravel()
    if gamma.size != delta.size or gamma.size < 2:
        raise InputError("gamma and delta must have equal length J >= 2")
    if gamma.size > MAX_RISK_GROUPS:
        raise InputError(f"asymptotic risk is limited to J <= {MAX_RISK_GROUPS}")
    if np.any(gamma <= 0) or not np.all(np.isfinite(delta)):
        raise InputError("gamma must be positive and delta finite")
    if draws < 1000:
        raise InputError("use at least 1000 draws")
    forms = _RiskForms(gamma)
    pairs = draws // 2
    bounds = list(range(0, pairs, _CHUNK_PAIRS)) + [pairs]
    scale = 1.0 / np.sqrt(gamma)

    def chunk(i):
        size = bounds[i + 1] - bounds[i]
        rng = np.random.Generator(np.random.Philox(key=[seed, i]))
        z = rng.standard_normal((size, gamma.size)) * scale
        return 0.5 * (forms.integrand(delta + z) + forms.integrand(delta - z))

    n_chunks = len(bounds) - 1
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(chunk, range(n_chunks)))
    else:
        parts = [chunk(i) for i in range(n_chunks)]
    vals = np.concatenate(parts)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size))
    return RiskEstimate(forms.ols_risk + float(vals.mean()), se, forms.ols_risk,
                        2 * pairs, seed)


@dataclass(frozen=True)
class DominanceReport:
    neg_c: np.ndarray
    neg_c_kron: np.ndarray
    max_abs_diff: float
    min_eigenvalue: float
    diagonally_dominant: bool
    is_psd: bool


def dominance_matrix_check(gamma, tol: float = 1e-8) -> DominanceReport:
    """Closed-form ``-C`` and its definiteness.

    ``(-C)_ii = gamma_i (2J-7) sum_{l!=i} gamma_l sum_m gamma_m`` and
    ``(-C)_ij = -gamma_i gamma_j (2J-7) sum_l gamma_l``; checked against the
    reduced Kronecker expression ``-Delta' C Delta``.
    """
    gamma = np.asarray(gamma, dtype=float).ravel()
    J = gamma.size
    if J < 2 or np.any(gamma <= 0):
        raise InputError("need J >= 2 positive precisions")
    total = gamma.sum()
    factor = 2 * J - 7
    neg_c = -factor * total * np.outer(gamma, gamma)
    neg_c[np.diag_indices(J)] = gamma * factor * (total - gamma) * total
    forms = _RiskForms(gamma)
    kron = -0.5 * (forms.num_form + forms.num_form.T)
    diff = float(np.max(np.abs(neg_c - kron)))
    scale = max(1.0, float(np.max(np.abs(neg_c))))
    if diff > tol * scale:
        raise ArithmeticError(f"closed-form -C disagrees with the Kronecker form by {diff:.3g}")
    min_eig = float(np.linalg.eigvalsh(neg_c).min())
    diag = np.diag(neg_c)
    off = np.sum(np.abs(neg_c), axis=1) - np.abs(diag)
    dominant = bool(np.all(diag >= off - tol * scale))
    return DominanceReport(neg_c, kron, diff, min_eig, dominant, min_eig >= -tol)


def limit_weights(gamma, delta=None, mu=None):
    """Limits of the optimal weights along close or distant sequences.

    Give ``delta`` for a close system (local parameter) or ``mu`` for a
    distant one. Returns a :class:`~pcshrink.core.WeightMatrix`.
    """
    from .core import WeightMatrix

    gamma = np.asarray(gamma, dtype=float).ravel()
    if (delta is None) == (mu is None):
        raise InputError("give exactly one of delta (close) or mu (distant)")
    loc = np.asarray(delta if delta is not None else mu, dtype=float).ravel()
    J = gamma.size
    if loc.size != J:
        raise InputError("location vector and gamma differ in length")
    op = DeltaOperator(J)
    g = np.diag(gamma)
    dloc = op.matrix @ loc
    spread = dloc @ np.kron(g, g) @ dloc
    blocks = [op.block(k) @ loc for k in range(J)]
    cross = np.array([[blocks[k] @ g @ blocks[j] for j in range(J)] for k in range(J)])
    if delta is not None:
        w = gamma[None, :] * (1.0 + cross) / (gamma.sum() + 0.5 * spread)
    else:
        if spread <= 0:
            raise InputError("distant limit is undefined when all means are equal")
        w = 2.0 * gamma[None, :] * cross / spread
    return WeightMatrix(w / w.sum(axis=1, keepdims=True))


def local_t_statistic(summary: GroupSummary, k: int, j: int) -> float:
    """``sqrt(n) (mu_k - mu_j) / sqrt(s2_k / p_k + s2_j / p_j)``."""
    var = summary.variances
    p = summary.probabilities
    if p[k] == 0 or p[j] == 0:
        raise DegenerateVarianceError("both groups must be non-empty")
    scale = var[k] / p[k] + var[j] / p[j]
    if not scale > 0:
        raise DegenerateVarianceError(f"zero scale for groups {k} and {j}")
    return float(np.sqrt(summary.n) * (summary.means[k] - summary.means[j]) / np.sqrt(scale))

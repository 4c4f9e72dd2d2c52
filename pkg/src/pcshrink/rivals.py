"""Comparison estimators: cell means (OLS), ridge (RR), generalized ridge
(GRR), discrete kernel smoothing and Mallows C_p partition selection.

RR, GRR and kernel smoothing are restricted PCS estimators. Each is stored
as a weight matrix, so the risk of any smoothing choice is the weighted
MSE of that matrix. Smoothing parameters are chosen by minimizing the
weighted MSE with ``W = diag(gamma)``, evaluated either at the true
parameters (oracle) or at the sample statistics (plug-in).

The ``_batch_*`` helpers work on stacks of problems of shape ``(R, J)``
and back both the scalar API and the Monte Carlo engine.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import WeightMatrix, optimal_weight_array
from .exceptions import (DegenerateVarianceError, InputError, InsufficientDataError,
                         OptimizationError)
from .groups import GroupedSample, GroupSummary, summarize
from .risk import weighted_mse

METHODS = ("ols", "pcs", "rr", "grr", "kernel", "cp")
MAX_CP_GROUPS = 12

RR_GRID_SIZE = 512
RR_NEGATIVE_POINTS = 64
RR_LOWER_MARGIN = 1e-6
RR_UPPER = 1e6
KERNEL_STARTS = 8
KERNEL_TOL = 1e-9
KERNEL_MAX_SWEEPS = 500
_KERNEL_GRID = 64
_BISECT_STEPS = 48
_EXTRAPOLATION = (1.0, 3.0, 9.0, 27.0)
_GOLDEN_STEPS = 100


@dataclass(frozen=True)
class RivalEstimate:
    """Estimates of a comparison method with its chosen smoothing."""

    method: str
    estimates: np.ndarray
    smoothing: dict
    weights: WeightMatrix | None = None
    names: tuple[str, ...] = field(default=())
    warnings: tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class OracleSmoothing:
    """Risk-optimal smoothing at known parameters."""

    method: str
    smoothing: dict
    weights: WeightMatrix
    risk: float


# weight builders ---------------------------------------------------------

def rr_weight_array(lam, nk) -> np.ndarray:
    """Ridge weights for scalar penalty ``lam`` (shape ``(...)``)."""
    lam = np.asarray(lam, dtype=float)
    nk = np.asarray(nk, dtype=float)
    J = nk.shape[-1]
    shrink = (J - 1) * lam[..., None] / (nk + (J - 1) * lam[..., None])
    return grr_weight_array(shrink)


def grr_weight_array(omega) -> np.ndarray:
    """Weights ``(1 - w_k)`` on the own mean and ``w_k / (J-1)`` on each other."""
    omega = np.asarray(omega, dtype=float)
    J = omega.shape[-1]
    out = np.broadcast_to((omega / (J - 1))[..., :, None], omega.shape + (J,)).copy()
    idx = np.arange(J)
    out[..., idx, idx] = 1.0 - omega
    return out


def kernel_weight_array(lam, nk) -> np.ndarray:
    """Kernel weights ``lam_j / (n_k + sum_{l!=k} lam_l)``, own ``n_k / (...)``."""
    lam = np.asarray(lam, dtype=float)
    nk = np.asarray(nk, dtype=float)
    J = nk.shape[-1]
    den = nk + lam.sum(axis=-1, keepdims=True) - lam
    out = lam[..., None, :] / den[..., :, None]
    idx = np.arange(J)
    out[..., idx, idx] = nk / den
    return out


# smoothing selectors (batched) -------------------------------------------

def _leave_out_terms(means, gamma, n):
    """Bias ``b_k`` toward the leave-k-out average and its variance ``V_k``."""
    J = means.shape[-1]
    loo = (means.sum(axis=-1, keepdims=True) - means) / (J - 1)
    inv = 1.0 / (n[..., None] * gamma)
    v = (inv.sum(axis=-1, keepdims=True) - inv) / (J - 1) ** 2
    return loo - means, v, inv


def _batch_grr(means, gamma, n):
    bias, v, inv = _leave_out_terms(means, gamma, n)
    omega = inv / (inv + v + bias ** 2)
    return omega


def _rr_objective(lam, bias, v, inv, gamma, nk):
    """Weighted MSE of ridge for penalties ``lam`` of shape ``(R, G)``."""
    J = nk.shape[-1]
    a = (J - 1) * lam[..., None] / (nk[:, None, :] + (J - 1) * lam[..., None])
    per = a ** 2 * (bias ** 2 + v)[:, None, :] + (1.0 - a) ** 2 * inv[:, None, :]
    return np.sum(gamma[:, None, :] * per, axis=-1)


def _rr_grid(lo, hi):
    neg = np.linspace(lo, 0.0, RR_NEGATIVE_POINTS + 1)[:-1]
    pos = np.geomspace(RR_LOWER_MARGIN * hi / RR_UPPER, hi,
                       RR_GRID_SIZE - RR_NEGATIVE_POINTS - 1)
    return np.concatenate([neg, [0.0], pos])


def _batch_rr(means, gamma, nk, n):
    """Grid scan over the admissible range followed by golden-section search."""
    R, J = means.shape
    bias, v, inv = _leave_out_terms(means, gamma, n)
    lo = -nk.min(axis=-1) / (J - 1) + RR_LOWER_MARGIN * n
    hi = RR_UPPER * n
    grid = np.stack([_rr_grid(lo[r], hi[r]) for r in range(R)]) if R else np.empty((0, 0))
    # a lower bound above 0 (tiny cells) leaves no negative range
    grid = np.maximum(grid, lo[:, None])
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        obj = _rr_objective(grid, bias, v, inv, gamma, nk)
    obj = np.where(np.isfinite(obj), obj, np.inf)
    best = np.argmin(obj, axis=1)
    if np.any(~np.isfinite(obj[np.arange(R), best])):
        raise OptimizationError("ridge objective is not finite anywhere on the search grid")
    rows = np.arange(R)
    left = grid[rows, np.maximum(best - 1, 0)]
    right = grid[rows, np.minimum(best + 1, grid.shape[1] - 1)]
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0

    def f(x):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            val = _rr_objective(x[:, None], bias, v, inv, gamma, nk)[:, 0]
        return np.where(np.isfinite(val), val, np.inf)

    a, b = left.copy(), right.copy()
    for _ in range(_GOLDEN_STEPS):
        c = b - inv_phi * (b - a)
        d = a + inv_phi * (b - a)
        go_left = f(c) < f(d)
        b = np.where(go_left, d, b)
        a = np.where(go_left, a, c)
    refined = 0.5 * (a + b)
    f_ref = f(refined)
    grid_best = obj[rows, best]
    lam = np.where(f_ref <= grid_best, refined, grid[rows, best])
    return lam, np.minimum(f_ref, grid_best)


def _kernel_line(lam, j, means, gamma, nk, n, scale, grid_t):
    """Exact-ish minimization of the kernel objective in coordinate ``j``."""
    I, J = means.shape
    total = lam.sum(axis=1)
    e = nk + (total - lam[:, j])[:, None] - lam
    diff = means[:, None, :] - means[:, :, None]  # [k, m] = mu_m - mu_k
    s = np.einsum("ikm,im->ik", diff, lam) - lam[:, j:j + 1] * diff[:, :, j]
    lam2g = lam ** 2 / gamma
    t = (nk ** 2 / gamma + lam2g.sum(axis=1, keepdims=True) - lam2g
         - lam2g[:, j:j + 1]) / n[:, None]
    b = diff[:, :, j]
    A = b ** 2 + 1.0 / (n * gamma[:, j])[:, None]
    B = 2.0 * s * b
    C = s ** 2 + t
    wk = gamma.copy()
    wk[:, j] = 0.0  # group j does not depend on its own penalty
    alpha = 2.0 * A * e - B
    beta = B * e - 2.0 * C

    def obj(x):
        x = x[..., None]
        return np.sum(wk[:, None, :] * (A[:, None] * x ** 2 + B[:, None] * x + C[:, None])
                      / (e[:, None] + x) ** 2, axis=-1)

    def grad(x):
        x = x[:, None]
        return np.sum(wk * (alpha * x + beta) / (e + x) ** 3, axis=-1)

    upper = RR_UPPER * n
    pts = np.concatenate([scale[:, None] * grid_t / (1.0 - grid_t), upper[:, None]], axis=1)
    vals = obj(pts)
    best = np.argmin(vals, axis=1)
    rows = np.arange(I)
    lo = pts[rows, np.maximum(best - 1, 0)]
    hi = pts[rows, np.minimum(best + 1, pts.shape[1] - 1)]
    g_lo, g_hi = grad(lo), grad(hi)
    bracket = (g_lo < 0) & (g_hi > 0)
    a, c = lo.copy(), hi.copy()
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (a + c)
        pos = grad(mid) > 0
        c = np.where(pos, mid, c)
        a = np.where(pos, a, mid)
    root = 0.5 * (a + c)
    cand = np.where(bracket, root, pts[rows, best])
    f_cand = obj(cand[:, None])[:, 0]
    return np.where(f_cand <= vals[rows, best], cand, pts[rows, best])


def _kernel_starts(means, gamma, nk, n):
    """Initial penalty vectors: zeros, PCS-implied, and fixed random draws."""
    I, J = means.shape
    scale = n / J
    starts = [np.zeros((I, J))]
    w = optimal_weight_array(means, gamma, n)
    own = np.diagonal(w, axis1=1, axis2=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_kj = nk[:, :, None] * w / own[:, :, None]
    lam_kj = np.where(own[:, :, None] > 0, lam_kj, np.nan)
    idx = np.arange(J)
    lam_kj[:, idx, idx] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        implied = np.nanmean(lam_kj, axis=1)
    starts.append(np.clip(np.nan_to_num(implied, nan=0.0), 0.0, None))
    for i in range(KERNEL_STARTS - 2):
        draw = np.random.default_rng([0x5EED, i]).uniform(0.0, 4.0, size=J)
        starts.append(scale[:, None] * draw[None, :])
    return starts


def _batch_kernel(means, gamma, nk, n):
    """Multistart coordinate descent over ``lam >= 0``.

    Returns penalties ``(I, J)``, the minimized objective and a flag for
    instances where at least one start converged.
    """
    I, J = means.shape
    grid_t = np.linspace(0.0, 1.0, _KERNEL_GRID + 1)[:-1]
    scale = n / J
    best_lam = np.zeros((I, J))
    best_obj = np.full(I, np.inf)
    any_conv = np.zeros(I, dtype=bool)
    for start in _kernel_starts(means, gamma, nk, n):
        lam = start.copy()
        cur = weighted_mse(kernel_weight_array(lam, nk), means, gamma, n)
        active = np.ones(I, dtype=bool)
        conv = np.zeros(I, dtype=bool)
        for sweep in range(KERNEL_MAX_SWEEPS):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            sub = lam[idx]
            before = sub.copy()
            args = (means[idx], gamma[idx], nk[idx], n[idx], scale[idx], grid_t)
            for j in range(J):
                sub[:, j] = _kernel_line(sub, j, *args)
            new = weighted_mse(kernel_weight_array(sub, nk[idx]), means[idx], gamma[idx], n[idx])
            # extrapolate along the sweep displacement to damp zigzagging
            step = sub - before
            for t in _EXTRAPOLATION:
                trial = np.maximum(sub + t * step, 0.0)
                val = weighted_mse(kernel_weight_array(trial, nk[idx]), means[idx], gamma[idx],
                                   n[idx])
                take = val < new
                sub[take] = trial[take]
                new = np.where(take, val, new)
            done = np.abs(cur[idx] - new) <= KERNEL_TOL * np.maximum(np.abs(cur[idx]), 1e-300)
            # abandon starts that cannot reach the best converged value at
            # their current rate of descent within the remaining sweeps
            gap = new - best_obj[idx]
            hopeless = ~done & (gap > 0) & ((cur[idx] - new) * (KERNEL_MAX_SWEEPS - sweep) < gap)
            lam[idx] = sub
            cur[idx] = new
            conv[idx[done]] = True
            active[idx[done | hopeless]] = False
        better = conv & (cur < best_obj)
        best_lam[better] = lam[better]
        best_obj[better] = cur[better]
        any_conv |= conv
    return best_lam, best_obj, any_conv


# summaries -> arrays ------------------------------------------------------

def _plugin_arrays(summary: GroupSummary):
    summary.require_nonempty()
    summary.require_positive_variances()
    gamma = summary.precisions
    return (summary.means[None, :], gamma[None, :], summary.counts[None, :].astype(float),
            np.array([float(summary.n)]))


def _finish(method, summary, weights, smoothing, notes=()):
    wm = WeightMatrix(weights / weights.sum(axis=1, keepdims=True))
    return RivalEstimate(method, wm.values @ summary.means, smoothing, wm, summary.names,
                         tuple(notes))


# public plug-in estimators -------------------------------------------------

def ols(summary: GroupSummary) -> RivalEstimate:
    """First-stage (modified cell mean) estimates; warns on empty groups."""
    notes = []
    if np.any(summary.empty):
        empty = [summary.names[j] for j in np.flatnonzero(summary.empty)]
        msg = f"empty groups {empty} are estimated as 0"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    J = summary.n_groups
    return RivalEstimate("ols", summary.means.copy(), {}, WeightMatrix(np.eye(J)),
                         summary.names, tuple(notes))


def rr_estimate(summary: GroupSummary, lam: float) -> RivalEstimate:
    """Ridge estimate for a given scalar penalty."""
    w = rr_weight_array(np.array(lam, dtype=float), summary.counts.astype(float))
    return _finish("rr", summary, w, {"lambda": float(lam)})


def grr_estimate(summary: GroupSummary, omega) -> RivalEstimate:
    """Generalized ridge estimate for given shrinkage weights ``omega_k``."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (summary.n_groups,):
        raise InputError("one GRR weight per group is required")
    return _finish("grr", summary, grr_weight_array(omega), {"omega": omega.tolist()})


def kernel_estimate(summary: GroupSummary, lam) -> RivalEstimate:
    """Kernel estimate for given nonnegative penalties ``lambda_j``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (summary.n_groups,) or np.any(lam < 0):
        raise InputError("kernel penalties must be a nonnegative vector of length J")
    w = kernel_weight_array(lam, summary.counts.astype(float))
    return _finish("kernel", summary, w, {"lambda": lam.tolist()})


def grr_plugin(summary: GroupSummary) -> RivalEstimate:
    """GRR with the closed-form MSE-optimal shrinkage at sample statistics."""
    means, gamma, nk, n = _plugin_arrays(summary)
    omega = _batch_grr(means, gamma, n)[0]
    est = grr_estimate(summary, omega)
    J = summary.n_groups
    lam = summary.counts * omega / ((J - 1) * (1.0 - omega))
    est.smoothing["lambda"] = lam.tolist()
    return est


def rr_plugin(summary: GroupSummary) -> RivalEstimate:
    """Ridge with the scalar penalty minimizing the plug-in weighted MSE."""
    means, gamma, nk, n = _plugin_arrays(summary)
    lam, obj = _batch_rr(means, gamma, nk, n)
    est = rr_estimate(summary, lam[0])
    est.smoothing["objective"] = float(obj[0])
    return est


def kernel_plugin(summary: GroupSummary) -> RivalEstimate:
    """Kernel smoothing with penalties minimizing the plug-in weighted MSE."""
    means, gamma, nk, n = _plugin_arrays(summary)
    lam, obj, ok = _batch_kernel(means, gamma, nk, n)
    if not ok[0]:
        raise OptimizationError(f"kernel coordinate descent did not converge from any of "
                                f"{KERNEL_STARTS} starts within {KERNEL_MAX_SWEEPS} sweeps")
    est = kernel_estimate(summary, lam[0])
    est.smoothing["objective"] = float(obj[0])
    return est


def pcs_rival(summary: GroupSummary) -> RivalEstimate:
    """Plug-in PCS wrapped in the common result type."""
    from .core import plugin_weights

    w = plugin_weights(summary)
    return RivalEstimate("pcs", w.values @ summary.means, {}, w, summary.names)


# Mallows C_p ---------------------------------------------------------------

def set_partitions(n_items: int) -> list[tuple[int, ...]]:
    """All set partitions of ``0 .. n_items-1`` as restricted growth strings.

    Sorted by number of blocks, then lexicographically, which is the
    tie-breaking order of :func:`mallows_cp`.
    """
    out = []

    def grow(prefix, top):
        if len(prefix) == n_items:
            out.append(tuple(prefix))
            return
        for b in range(top + 2):
            grow(prefix + [b], max(top, b))

    if n_items >= 1:
        grow([0], 0)
    out.sort(key=lambda s: (max(s) + 1, s))
    return out


def _membership(partitions, J):
    """Stacked block membership matrices, padded to the largest block count."""
    n_blocks = max(max(s) for s in partitions) + 1
    mem = np.zeros((len(partitions), J, n_blocks))
    for i, s in enumerate(partitions):
        mem[i, np.arange(J), s] = 1.0
    sizes = np.array([max(s) + 1 for s in partitions], dtype=float)
    return mem, sizes


def _cp_values(counts, sums, sse, mem, sizes):
    """C_p of every partition for stacked summaries of shape ``(R, J)``."""
    n = counts.sum(axis=-1)
    J = counts.shape[-1]
    sigma2 = sse / (n - J)
    within_cells = np.sum(np.where(counts > 0, sums ** 2 / np.maximum(counts, 1), 0.0), axis=-1)
    bc = np.einsum("rj,pjb->rpb", counts, mem)
    bs = np.einsum("rj,pjb->rpb", sums, mem)
    pooled = np.sum(np.where(bc > 0, bs ** 2 / np.maximum(bc, 1), 0.0), axis=-1)
    sse_sub = sse[:, None] + within_cells[:, None] - pooled
    return sse_sub / sigma2[:, None] - n[:, None] + 2.0 * sizes[None, :], bc, bs


def cp_criterion(summary: GroupSummary, partition) -> float:
    """Mallows C_p of the submodel pooling groups with equal block labels."""
    part = tuple(int(b) for b in partition)
    if len(part) != summary.n_groups:
        raise InputError("partition must assign a block to every group")
    _require_cp(summary)
    labels = {b: i for i, b in enumerate(dict.fromkeys(part))}
    rgs = tuple(labels[b] for b in part)
    mem, sizes = _membership([rgs], summary.n_groups)
    counts = summary.counts[None, :].astype(float)
    sums = counts * summary.means[None, :]
    cp, _, _ = _cp_values(counts, sums, np.array([summary.sse]), mem, sizes)
    return float(cp[0, 0])


def _require_cp(summary: GroupSummary):
    J = summary.n_groups
    if J > MAX_CP_GROUPS:
        raise InputError(f"C_p enumerates all set partitions; J={J} exceeds the limit of "
                         f"{MAX_CP_GROUPS}. Supply an explicit list of candidate partitions.")
    if summary.n <= J:
        raise InsufficientDataError(f"C_p needs n > J (n={summary.n}, J={J})")
    if not summary.sse > 0:
        raise DegenerateVarianceError("full-model residual variance is zero")


def _batch_cp(counts, sums, sse, partitions=None):
    J = counts.shape[-1]
    parts = partitions if partitions is not None else set_partitions(J)
    mem, sizes = _membership(parts, J)
    cp, bc, bs = _cp_values(counts, sums, sse, mem, sizes)
    choice = np.argmin(cp, axis=1)  # first minimum wins: fewer blocks, then lexicographic
    rows = np.arange(counts.shape[0])
    block_means = np.where(bc > 0, bs / np.maximum(bc, 1), 0.0)[rows, choice]
    fitted = np.einsum("rjb,rb->rj", mem[choice], block_means)
    return fitted, choice, cp[rows, choice], parts


def mallows_cp(data) -> RivalEstimate:
    """Select the group-pooling partition with the smallest Mallows C_p.

    Parameters
    ----------
    data : GroupedSample or GroupSummary
        Only the counts, means and within-group sums of squares are used.
    """
    summary = summarize(data) if isinstance(data, GroupedSample) else data
    _require_cp(summary)
    counts = summary.counts[None, :].astype(float)
    sums = counts * summary.means[None, :]
    fitted, choice, cp, parts = _batch_cp(counts, sums, np.array([summary.sse]))
    rgs = parts[int(choice[0])]
    blocks = [[summary.names[j] for j in range(len(rgs)) if rgs[j] == b]
              for b in range(max(rgs) + 1)]
    return RivalEstimate("cp", fitted[0], {"partition": blocks, "cp": float(cp[0])},
                         None, summary.names)


# oracle smoothing --------------------------------------------------------

def oracle_smoothing_rivals(mu, gamma, p, n, method: str) -> OracleSmoothing:
    """Risk-optimal smoothing of a method at the true ``(mu, gamma, p)``.

    Cell sizes enter as their expectations ``n p_k``.
    """
    mu = np.asarray(mu, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    if not (mu.shape == gamma.shape == p.shape) or mu.size < 2:
        raise InputError("mu, gamma and p must be vectors of equal length J >= 2")
    if np.any(gamma <= 0) or np.any(p <= 0):
        raise InputError("gamma and p must be positive")
    J = mu.size
    means, g, nk, nn = mu[None], gamma[None], (n * p)[None], np.array([float(n)])
    if method == "ols":
        w, smoothing = np.eye(J), {}
    elif method == "pcs":
        w, smoothing = optimal_weight_array(mu, gamma, float(n)), {}
    elif method == "grr":
        omega = _batch_grr(means, g, nn)[0]
        w, smoothing = grr_weight_array(omega), {"omega": omega.tolist()}
    elif method == "rr":
        lam, _ = _batch_rr(means, g, nk, nn)
        w, smoothing = rr_weight_array(lam[0], nk[0]), {"lambda": float(lam[0])}
    elif method == "kernel":
        lam, _, ok = _batch_kernel(means, g, nk, nn)
        if not ok[0]:
            raise OptimizationError("kernel oracle search did not converge")
        w, smoothing = kernel_weight_array(lam[0], nk[0]), {"lambda": lam[0].tolist()}
    else:
        raise InputError(f"no oracle smoothing for method {method!r}")
    w = w / w.sum(axis=1, keepdims=True)
    risk = float(weighted_mse(w, mu, gamma, float(n)))
    return OracleSmoothing(method, smoothing, WeightMatrix(w), risk)


def fit_method(summary: GroupSummary, method: str):
    """Dispatch a plug-in fit by method name."""
    table = {"ols": ols, "pcs": pcs_rival, "rr": rr_plugin, "grr": grr_plugin,
             "kernel": kernel_plugin, "cp": mallows_cp}
    if method not in table:
        raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return table[method](summary)


__all__ = ["RivalEstimate", "OracleSmoothing", "METHODS", "ols", "rr_plugin", "grr_plugin",
           "kernel_plugin", "mallows_cp", "cp_criterion", "set_partitions", "rr_estimate",
           "grr_estimate", "kernel_estimate", "oracle_smoothing_rivals", "fit_method",
           "pcs_rival", "rr_weight_array", "grr_weight_array", "kernel_weight_array"]

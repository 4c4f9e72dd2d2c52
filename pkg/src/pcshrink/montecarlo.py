"""Simulation designs, replication loops and relative weighted-MSE curves.

Every replication draws from its own counter-based stream keyed by
``(seed, delta index, replication index)``, so results do not depend on
execution order or on the number of worker threads. All estimators of a
replication are fitted to the same sample.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import optimal_weight_array, oracle_weights
from .exceptions import InputError, SimulationAborted
from .groups import VARIANCE_MODES, GroupedSample
from .rivals import (METHODS, _batch_cp, _batch_grr, _batch_kernel, _batch_rr,
                     grr_weight_array, kernel_weight_array, oracle_smoothing_rivals,
                     rr_weight_array)

ERROR_FAMILIES = ("gaussian", "lognormal")
DROP_LIMIT = 0.01

# local-alternative directions (means are direction * delta / sqrt(n))
LOCAL_DIRECTIONS = {
    "A": (0.0, 0.0, 0.0, 1.0),
    "B": (0.0, 0.0, -3.0, 1.0),
    "C": (0.0, 2.0, -3.0, 1.0),
}
# fixed-n directions of the oracle-risk designs (no sqrt(n) scaling)
ORACLE_DIRECTIONS = {
    "A": (0.0, 0.0, 0.0, 1.0),
    "B": (0.0, 0.0, 0.0, 1.0),
    "C": (0.0, 3.0, -2.0, 1.0),
}
HOMOSKEDASTIC = (1.0, 1.0, 1.0, 1.0)
HETEROSKEDASTIC = (1.0, 1.0, 1.0, 10.0)


def default_deltas(scaled: bool = True, n: int = 400) -> tuple[float, ...]:
    """41 equally spaced points on ``[0, 20]`` in local units.

    Unscaled designs use the same grid divided by ``sqrt(n)``.
    """
    grid = np.linspace(0.0, 20.0, 41)
    if not scaled:
        grid = grid / math.sqrt(n)
    return tuple(float(d) for d in grid)


@dataclass(frozen=True)
class DesignSpec:
    """Data generating process of a simulation experiment.

    Parameters
    ----------
    design : {"A", "B", "C", "custom"}
        Mean direction; ``custom`` requires ``direction``.
    sigma2 : tuple of float
        Error variances per group.
    error_family : {"gaussian", "lognormal"}
        Standard normal or standardized log-normal errors.
    n, replications, seed : int
        Sample size, replications per delta and base seed.
    deltas : tuple of float
        Grid of delta values (nonnegative).
    scaled : bool
        If true the means are ``direction * delta / sqrt(n)``; otherwise
        ``direction * delta``.
    variance_mode : str or None
        ``None`` selects pooled variances for homoskedastic designs and
        per-group variances otherwise.
    """

    design: str = "A"
    sigma2: tuple[float, ...] = HOMOSKEDASTIC
    error_family: str = "lognormal"
    n: int = 400
    replications: int = 5000
    seed: int = 0
    deltas: tuple[float, ...] = field(default_factory=default_deltas)
    scaled: bool = True
    probabilities: tuple[float, ...] | None = None
    direction: tuple[float, ...] | None = None
    variance_mode: str | None = None

    def __post_init__(self):
        sigma2 = tuple(float(s) for s in self.sigma2)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        J = len(sigma2)
        if self.design == "custom":
            if self.direction is None or len(self.direction) != J:
                raise InputError("custom designs need a direction of length J")
        elif self.design in LOCAL_DIRECTIONS:
            if J != 4:
                raise InputError(f"design {self.design} has four groups")
        else:
            raise InputError(f"unknown design {self.design!r}")
        if J < 2 or any(s <= 0 for s in sigma2):
            raise InputError("need J >= 2 positive variances")
        if self.probabilities is not None:
            p = np.asarray(self.probabilities, dtype=float)
            if p.shape != (J,) or np.any(p <= 0) or abs(p.sum() - 1) > 1e-10:
                raise InputError("probabilities must be J positive numbers summing to one")
            object.__setattr__(self, "probabilities", tuple(float(x) for x in p))
        if self.error_family not in ERROR_FAMILIES:
            raise InputError(f"error_family must be one of {ERROR_FAMILIES}")
        if self.n < 1 or self.replications < 1:
            raise InputError("n and replications must be positive")
        if not self.deltas or any(not d >= 0 for d in self.deltas):
            raise InputError("the delta grid must be nonempty and nonnegative")
        if not 0 <= self.seed < 2 ** 63:
            raise InputError("seed must be a nonnegative 63-bit integer")
        if self.variance_mode is not None and self.variance_mode not in VARIANCE_MODES:
            raise InputError(f"variance_mode must be one of {VARIANCE_MODES}")

    @property
    def n_groups(self) -> int:
        return len(self.sigma2)

    @property
    def p(self) -> np.ndarray:
        if self.probabilities is None:
            return np.full(self.n_groups, 1.0 / self.n_groups)
        return np.asarray(self.probabilities)

    @property
    def gamma(self) -> np.ndarray:
        return self.p / np.asarray(self.sigma2)

    @property
    def resolved_variance_mode(self) -> str:
        if self.variance_mode is not None:
            return self.variance_mode
        return "pooled" if len(set(self.sigma2)) == 1 else "per_group"

    def mean_vector(self, delta: float) -> np.ndarray:
        if self.design == "custom":
            direction = np.asarray(self.direction, dtype=float)
        elif self.scaled:
            direction = np.asarray(LOCAL_DIRECTIONS[self.design])
        else:
            direction = np.asarray(ORACLE_DIRECTIONS[self.design])
        scale = 1.0 / math.sqrt(self.n) if self.scaled else 1.0
        return direction * delta * scale

    def to_dict(self) -> dict:
        out = asdict(self)
        out["variance_mode"] = self.resolved_variance_mode
        return out


def simulation_design(design: str, heteroskedastic: bool = False, **kwargs) -> DesignSpec:
    """Local-alternative design with log-normal errors by default."""
    sigma2 = HETEROSKEDASTIC if heteroskedastic else HOMOSKEDASTIC
    return DesignSpec(design=design, sigma2=sigma2, **kwargs)


def oracle_design(design: str, **kwargs) -> DesignSpec:
    """Fixed-mean design for oracle risk curves: Gaussian errors, A
    homoskedastic, B and C heteroskedastic."""
    sigma2 = HOMOSKEDASTIC if design == "A" else HETEROSKEDASTIC
    n = kwargs.pop("n", 400)
    kwargs.setdefault("deltas", default_deltas(scaled=False, n=n))
    kwargs.setdefault("error_family", "gaussian")
    return DesignSpec(design=design, sigma2=sigma2, n=n, scaled=False, **kwargs)


# sampling ------------------------------------------------------------------

_LOGNORMAL_MEAN = math.exp(0.5)
_LOGNORMAL_SD = math.sqrt(math.e ** 2 - math.e)


def replication_rng(seed: int, delta_index: int, replication: int) -> np.random.Generator:
    """Counter-based stream for one replication."""
    if not (0 <= delta_index < 2 ** 32 and 0 <= replication < 2 ** 32):
        raise InputError("delta and replication indices must fit in 32 bits")
    return np.random.Generator(np.random.Philox(key=[seed, (delta_index << 32) | replication]))


def standard_errors(rng: np.random.Generator, size, family: str) -> np.ndarray:
    """Mean-zero unit-variance errors of the given family."""
    w = rng.standard_normal(size)
    if family == "gaussian":
        return w
    if family == "lognormal":
        return (np.exp(w) - _LOGNORMAL_MEAN) / _LOGNORMAL_SD
    raise InputError(f"unknown error family {family!r}")


def _draw(rng, mu, sd, p, n, family):
    labels = rng.choice(mu.size, size=n, p=p)
    y = mu[labels] + sd[labels] * standard_errors(rng, n, family)
    return labels, y


def _delta_index(spec: DesignSpec, delta: float) -> int:
    matches = [i for i, d in enumerate(spec.deltas) if d == delta]
    if not matches:
        raise InputError(f"delta {delta} is not on the design grid; pass delta_index")
    return matches[0]


def generate_sample(spec: DesignSpec, delta: float, replication_index: int,
                    delta_index: int | None = None) -> GroupedSample:
    """One simulated sample; identical for identical ``(seed, delta, replication)``."""
    if delta_index is None:
        delta_index = _delta_index(spec, delta)
    rng = replication_rng(spec.seed, delta_index, replication_index)
    labels, y = _draw(rng, spec.mean_vector(delta), np.sqrt(spec.sigma2), spec.p, spec.n,
                      spec.error_family)
    return GroupedSample(y, labels, spec.n_groups)


@dataclass
class _Batch:
    counts: np.ndarray
    means: np.ndarray
    sums: np.ndarray
    wss: np.ndarray
    digest: str


def _simulate_batch(spec: DesignSpec, mu, delta_index, reps) -> _Batch:
    """Draw ``reps`` samples and reduce each to its group summary."""
    J, n = spec.n_groups, spec.n
    sd = np.sqrt(spec.sigma2)
    labels = np.empty((reps, n), dtype=np.int64)
    y = np.empty((reps, n))
    for r in range(reps):
        labels[r], y[r] = _draw(replication_rng(spec.seed, delta_index, r), mu, sd, spec.p, n,
                                spec.error_family)
    flat = (labels + J * np.arange(reps)[:, None]).ravel()
    counts = np.bincount(flat, minlength=reps * J).reshape(reps, J).astype(float)
    sums = np.bincount(flat, weights=y.ravel(), minlength=reps * J).reshape(reps, J)
    means = sums / (counts + (counts == 0))
    resid = y - np.take_along_axis(means, labels, axis=1)
    wss = np.bincount(flat, weights=(resid * resid).ravel(),
                      minlength=reps * J).reshape(reps, J)
    h = hashlib.sha256()
    h.update(labels.tobytes())
    h.update(y.tobytes())
    return _Batch(counts, means, sums, wss, h.hexdigest())


def _plugin_precisions(batch: _Batch, mode: str):
    """Estimated precisions and a validity mask per replication."""
    counts, wss = batch.counts, batch.wss
    n = counts.sum(axis=1)
    J = counts.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == "pooled":
            var = np.repeat((wss.sum(axis=1) / (n - J))[:, None], J, axis=1)
            ok = np.all(counts >= 1, axis=1) & (n > J)
        else:
            var = wss / (counts - 1)
            ok = np.all(counts >= 2, axis=1)
        ok &= np.all(var > 0, axis=1) & np.all(np.isfinite(var), axis=1)
        gamma = np.where(ok[:, None], (counts / n[:, None]) / np.where(ok[:, None], var, 1.0), 1.0)
    return gamma, ok


def _plugin_estimates(method, batch, gamma, ok):
    """Plug-in estimates for valid replications; returns estimates and success mask."""
    counts, means = batch.counts, batch.means
    n = counts.sum(axis=1)
    est = np.zeros_like(means)
    good = ok.copy()
    idx = np.flatnonzero(ok)
    m, g, c, nn = means[idx], gamma[idx], counts[idx], n[idx]
    if method == "ols":
        return means.copy(), np.ones(len(means), dtype=bool)
    if method == "pcs":
        w = optimal_weight_array(m, g, nn)
    elif method == "grr":
        w = grr_weight_array(_batch_grr(m, g, nn))
    elif method == "rr":
        lam, _ = _batch_rr(m, g, c, nn)
        w = rr_weight_array(lam, c)
    elif method == "kernel":
        lam, _, conv = _batch_kernel(m, g, c, nn)
        w = kernel_weight_array(lam, c)
        good[idx[~conv]] = False
    elif method == "cp":
        sse = batch.wss.sum(axis=1)
        valid = (n > counts.shape[1]) & (sse > 0)
        fitted, _, _, _ = _batch_cp(counts[valid], batch.sums[valid], sse[valid])
        est[valid] = fitted
        return est, valid
    else:
        raise InputError(f"unknown estimator {method!r}")
    est[idx] = np.einsum("rkj,rj->rk", w, m)
    return est, good


@dataclass(frozen=True)
class CurvePoint:
    estimator: str
    delta: float
    mean_loss: float
    rel_wmse: float
    mc_se: float
    replications: int
    dropped: int


@dataclass
class SimulationResult:
    """Relative weighted MSE per estimator and delta."""

    spec: DesignSpec
    estimators: tuple[str, ...]
    points: list[CurvePoint]
    kind: str = "plug-in"
    digests: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)

    def curve(self, estimator: str, what: str = "rel_wmse") -> np.ndarray:
        return np.array([getattr(p, what) for p in self.points if p.estimator == estimator])

    @property
    def deltas(self) -> np.ndarray:
        return np.asarray(self.spec.deltas)

    def metadata(self) -> dict:
        return {"kind": self.kind, "estimators": list(self.estimators), **self.spec.to_dict()}

    def to_csv(self, fh=None, metadata: dict | None = None) -> str:
        """Long-format CSV; ``metadata`` goes to leading ``#`` comment lines."""
        buf = io.StringIO()
        for key, value in (metadata or {}).items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["design", "error_family", "variance_mode", "estimator", "delta",
                         "rel_wmse", "mc_se", "R", "seed"])
        mode = self.spec.resolved_variance_mode if self.kind == "plug-in" else "oracle"
        for p in self.points:
            writer.writerow([self.spec.design, self.spec.error_family, mode, p.estimator,
                             repr(p.delta), repr(p.rel_wmse), repr(p.mc_se), p.replications,
                             self.spec.seed])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _summarize_losses(losses: dict, estimators, delta, dropped):
    base = losses["ols"]
    b_bar = base.mean()
    R = base.size
    out = []
    for name in estimators:
        a = losses[name]
        ratio = a.mean() / b_bar
        if name == "ols":
            se = 0.0
        else:
            resid = a - ratio * base
            se = float(np.sqrt(resid.var(ddof=1) / R) / b_bar) if R > 1 else float("nan")
        out.append(CurvePoint(name, delta, float(a.mean()), float(ratio), se, R, dropped))
    return out


def _check_estimators(estimators):
    est = tuple(estimators)
    bad = [e for e in est if e not in METHODS]
    if bad:
        raise InputError(f"unknown estimators {bad}; choose from {METHODS}")
    return ("ols",) + tuple(e for e in est if e != "ols")


def _run(spec, estimators, threads, task, keep_losses, kind):
    estimators = _check_estimators(estimators)
    jobs = list(enumerate(spec.deltas))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda job: task(*job, estimators), jobs))
    else:
        parts = [task(i, d, estimators) for i, d in jobs]
    points, digests, losses = [], {}, {}
    for (i, delta), (pts, digest, loss) in zip(jobs, parts):
        points.extend(pts)
        digests[i] = digest
        if keep_losses:
            losses[i] = loss
    return SimulationResult(spec, estimators, points, kind, digests, losses)


def run_design(spec: DesignSpec, estimators=METHODS, threads: int = 1,
               keep_losses: bool = False) -> SimulationResult:
    """Plug-in estimators over the delta grid.

    Loss is ``sum_k gamma_k (est_k - mu_k)^2`` with the true precisions.
    A replication where any estimator cannot be computed (an empty or
    degenerate cell) is dropped for all estimators; more than 1% drops
    at any delta aborts the run.
    """
    mode = spec.resolved_variance_mode
    gamma_true = spec.gamma

    def task(di, delta, estimators):
        mu = spec.mean_vector(delta)
        batch = _simulate_batch(spec, mu, di, spec.replications)
        gamma, ok = _plugin_precisions(batch, mode)
        ests, keep = {}, np.ones(spec.replications, dtype=bool)
        for name in estimators:
            ests[name], good = _plugin_estimates(name, batch, gamma, ok)
            keep &= good
        dropped = int((~keep).sum())
        if dropped and dropped >= DROP_LIMIT * spec.replications:
            raise SimulationAborted(f"delta={delta}: {dropped} of {spec.replications} "
                                    "replications had empty or degenerate cells")
        loss = {k: np.sum(gamma_true * (v[keep] - mu) ** 2, axis=1) for k, v in ests.items()}
        return _summarize_losses(loss, estimators, delta, dropped), batch.digest, loss

    return _run(spec, estimators, threads, task, keep_losses, "plug-in")


def oracle_weight_set(spec: DesignSpec, delta: float, estimators) -> dict:
    """Fixed weight matrices of every estimator at the true parameters."""
    mu = spec.mean_vector(delta)
    out = {}
    for name in estimators:
        if name == "ols":
            out[name] = np.eye(spec.n_groups)
        elif name == "pcs":
            out[name] = oracle_weights(mu, spec.gamma, spec.n).values
        elif name == "cp":
            raise InputError("C_p has no oracle smoothing")
        else:
            out[name] = oracle_smoothing_rivals(mu, spec.gamma, spec.p, spec.n, name).weights.values
    return out


def run_oracle_design(spec: DesignSpec, estimators=("ols", "pcs", "kernel", "grr", "rr"),
                      threads: int = 1, keep_losses: bool = False) -> SimulationResult:
    """Oracle-smoothed estimators: weights are fixed per delta at their
    risk-optimal values and applied to the simulated cell means."""
    gamma_true = spec.gamma

    def task(di, delta, estimators):
        mu = spec.mean_vector(delta)
        weights = oracle_weight_set(spec, delta, estimators)
        batch = _simulate_batch(spec, mu, di, spec.replications)
        loss = {k: np.sum(gamma_true * (batch.means @ w.T - mu) ** 2, axis=1)
                for k, w in weights.items()}
        return _summarize_losses(loss, estimators, delta, 0), batch.digest, loss

    return _run(spec, estimators, threads, task, keep_losses, "oracle")


# distributional and risk cross-checks ---------------------------------------

def _fixed_design(mu, sigma2, p, n, seed, family="gaussian"):
    return DesignSpec(design="custom", sigma2=tuple(sigma2), error_family=family, n=n,
                      replications=1, seed=seed, deltas=(0.0,), scaled=False,
                      probabilities=tuple(p), direction=tuple(mu))


def standardized_pcs_errors(mu, sigma2, p, n: int, replications: int, seed: int, k: int,
                            penalties=None, family: str = "gaussian",
                            variance_mode: str = "per_group") -> np.ndarray:
    """``sqrt(n) (mu_pcs_k - mu_k - bias_k) / sqrt(sigma2_k / p_k)`` per replication.

    With ``penalties`` (a ``J x J`` array, scaled by the caller) the
    weights follow from the realized cell counts and the bias
    ``sum_j w_kj (mu_j - mu_k)`` of those weights is removed. Without
    penalties the plug-in weights are used and no centering is applied,
    the relevant bias being zero in distant systems.
    """
    mu = np.asarray(mu, dtype=float)
    spec = _fixed_design(mu, sigma2, p, n, seed, family)
    batch = _simulate_batch(spec, mu, 0, replications)
    if penalties is not None:
        lam = np.asarray(penalties, dtype=float)
        den = batch.counts + lam.sum(axis=1)
        w = lam[None] / den[:, :, None]
        J = mu.size
        w[:, np.arange(J), np.arange(J)] = batch.counts / den
        bias = np.einsum("rkj,j->rk", w, mu) - mu
        keep = np.ones(replications, dtype=bool)
    else:
        gamma, keep = _plugin_precisions(batch, variance_mode)
        if (~keep).sum() >= DROP_LIMIT * replications and (~keep).any():
            raise SimulationAborted("too many degenerate replications")
        w = optimal_weight_array(batch.means[keep], gamma[keep], batch.counts[keep].sum(axis=1))
        bias = np.zeros((int(keep.sum()), mu.size))
    est = np.einsum("rkj,rj->rk", w, batch.means[keep])
    scale = math.sqrt(sigma2[k] / p[k])
    return math.sqrt(n) * (est[:, k] - mu[k] - bias[:, k]) / scale


def empirical_scaled_loss(mu, sigma2, p, n: int, replications: int, seed: int,
                          zeta: float = 1e4, family: str = "gaussian",
                          variance_mode: str = "per_group") -> tuple[float, float]:
    """Trimmed expected scaled loss ``E[min(n * loss, zeta)]`` of plug-in PCS.

    Returns the Monte Carlo mean and its standard error.
    """
    mu = np.asarray(mu, dtype=float)
    p = np.asarray(p, dtype=float)
    gamma_true = p / np.asarray(sigma2, dtype=float)
    spec = _fixed_design(mu, sigma2, p, n, seed, family)
    batch = _simulate_batch(spec, mu, 0, replications)
    gamma, keep = _plugin_precisions(batch, variance_mode)
    if (~keep).any() and (~keep).sum() >= DROP_LIMIT * replications:
        raise SimulationAborted("too many degenerate replications")
    w = optimal_weight_array(batch.means[keep], gamma[keep], batch.counts[keep].sum(axis=1))
    est = np.einsum("rkj,rj->rk", w, batch.means[keep])
    loss = np.minimum(n * np.sum(gamma_true * (est - mu) ** 2, axis=1), zeta)
    return float(loss.mean()), float(loss.std(ddof=1) / math.sqrt(loss.size))

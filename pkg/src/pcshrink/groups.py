"""Grouped observations, their sufficient statistics and the pairwise
difference operator.

Groups are indexed ``0 .. J-1`` throughout the package; ``names`` carries the
human-readable label of each group.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DegenerateVarianceError, InputError, InsufficientDataError

VARIANCE_MODES = ("per_group", "pooled")


def _default_names(n_groups: int) -> tuple[str, ...]:
    return tuple(str(j + 1) for j in range(n_groups))


@dataclass(frozen=True)
class GroupedSample:
    """Outcomes together with the group each observation belongs to.

    Parameters
    ----------
    outcomes : array_like, shape (n,)
        Real-valued outcomes.
    labels : array_like of int, shape (n,)
        Group index of every observation, in ``0 .. n_groups - 1``.
    n_groups : int
        Number of groups ``J``; groups may be empty.
    names : sequence of str, optional
        Group labels used in reports. Defaults to ``"1" .. "J"``.
    """

    outcomes: np.ndarray
    labels: np.ndarray
    n_groups: int
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float).ravel()
        lab = np.asarray(self.labels).ravel()
        if y.shape != lab.shape:
            raise InputError(f"outcomes ({y.size}) and labels ({lab.size}) differ in length")
        if y.size < 1:
            raise InputError("a sample needs at least one observation")
        if self.n_groups < 2:
            raise InputError(f"need at least two groups, got J={self.n_groups}")
        if not np.all(np.isfinite(y)):
            raise InputError("outcomes must be finite")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(np.equal(np.mod(lab, 1), 0)):
                raise InputError("labels must be integers")
            lab = lab.astype(np.int64)
        if lab.min() < 0 or lab.max() >= self.n_groups:
            raise InputError(f"labels must lie in 0..{self.n_groups - 1}")
        names = tuple(self.names) if self.names else _default_names(self.n_groups)
        if len(names) != self.n_groups:
            raise InputError("one name per group is required")
        y.setflags(write=False)
        lab = lab.astype(np.int64, copy=False)
        lab.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return int(self.outcomes.size)


@dataclass(frozen=True)
class GroupSummary:
    """Per-group sufficient statistics.

    Every estimator in the package is a function of this summary only.
    ``within_ss[j]`` is the sum of squared deviations of group ``j`` around
    its own mean; variances are derived from it according to
    ``variance_mode``.
    """

    counts: np.ndarray
    means: np.ndarray
    within_ss: np.ndarray
    variance_mode: str = "per_group"
    names: tuple[str, ...] = field(default=())
    variance_floor: float | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64).ravel()
        means = np.asarray(self.means, dtype=float).ravel()
        wss = np.asarray(self.within_ss, dtype=float).ravel()
        if not (counts.shape == means.shape == wss.shape):
            raise InputError("counts, means and within_ss must have equal length")
        if counts.size < 2:
            raise InputError("need at least two groups")
        if np.any(counts < 0) or counts.sum() < 1:
            raise InputError("counts must be nonnegative with a positive total")
        if np.any(wss < 0) or not np.all(np.isfinite(means)):
            raise InputError("within-group sums of squares must be >= 0 and means finite")
        if self.variance_mode not in VARIANCE_MODES:
            raise InputError(f"variance_mode must be one of {VARIANCE_MODES}")
        if self.variance_floor is not None and not self.variance_floor > 0:
            raise InputError("variance_floor must be positive")
        names = tuple(self.names) if self.names else _default_names(counts.size)
        if len(names) != counts.size:
            raise InputError("one name per group is required")
        for arr in (counts, means, wss):
            arr.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "within_ss", wss)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_moments(cls, means, variances, counts, names=(), variance_mode="per_group"):
        """Build a summary from published cell means, variances and counts."""
        counts = np.asarray(counts, dtype=np.int64)
        variances = np.asarray(variances, dtype=float)
        wss = np.where(counts > 1, (counts - 1) * variances, 0.0)
        return cls(counts, means, wss, variance_mode=variance_mode, names=tuple(names))

    @property
    def n_groups(self) -> int:
        return int(self.counts.size)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.n

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def sse(self) -> float:
        """Residual sum of squares of the saturated (cell-mean) model."""
        return float(self.within_ss.sum())

    @property
    def raw_variances(self) -> np.ndarray:
        """Variances with ``nan`` where they are undefined."""
        if self.variance_mode == "pooled":
            dof = self.n - self.n_groups
            pooled = self.sse / dof if dof > 0 else np.nan
            var = np.full(self.n_groups, pooled)
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                var = np.where(self.counts >= 2, self.within_ss / (self.counts - 1), np.nan)
        if self.variance_floor is not None:
            var = np.where(np.isnan(var), var, np.maximum(var, self.variance_floor))
        return var

    @property
    def variances(self) -> np.ndarray:
        """Group variances; raises if any group lacks enough data."""
        var = self.raw_variances
        bad = np.flatnonzero(np.isnan(var))
        if bad.size:
            if self.variance_mode == "pooled":
                raise InsufficientDataError(
                    f"pooled variance needs n > J (n={self.n}, J={self.n_groups})")
            j = int(bad[0])
            raise InsufficientDataError(
                f"group {self.names[j]!r} has n={self.counts[j]} observations; "
                "per-group variances need at least 2", group=j)
        return var

    @property
    def precisions(self) -> np.ndarray:
        """Estimated precisions ``p_j / sigma2_j`` (``inf`` for zero variance)."""
        var = self.variances
        with np.errstate(divide="ignore"):
            return np.where(var > 0, self.probabilities / np.where(var > 0, var, 1.0), np.inf)

    def require_positive_variances(self) -> np.ndarray:
        """Return the variances, refusing degenerate (zero) ones."""
        var = self.variances
        bad = np.flatnonzero(var <= 0)
        if bad.size:
            j = int(bad[0])
            raise DegenerateVarianceError(
                f"group {self.names[j]!r} has zero sample variance; "
                "set a variance floor to regularize", group=j)
        return var

    def require_nonempty(self) -> None:
        if np.any(self.empty):
            j = int(np.flatnonzero(self.empty)[0])
            raise InsufficientDataError(f"group {self.names[j]!r} is empty", group=j)

    def with_variance_mode(self, mode: str) -> "GroupSummary":
        return GroupSummary(self.counts, self.means, self.within_ss, mode, self.names,
                            self.variance_floor)

    def with_variance_floor(self, floor: float | None) -> "GroupSummary":
        return GroupSummary(self.counts, self.means, self.within_ss, self.variance_mode,
                            self.names, floor)

    def subset(self, indices: Sequence[int]) -> "GroupSummary":
        """Summary restricted to ``indices``; probabilities renormalize."""
        idx = np.asarray(indices, dtype=np.int64)
        return GroupSummary(self.counts[idx], self.means[idx], self.within_ss[idx],
                            self.variance_mode, tuple(self.names[i] for i in idx),
                            self.variance_floor)


def summarize(sample: GroupedSample, variance_mode: str = "per_group") -> GroupSummary:
    """Compute counts, modified cell means and within-group sums of squares.

    The mean of an empty group is 0 (the count in the denominator is
    replaced by one). Per-group variances use divisor ``n_j - 1``; the
    pooled variance uses ``n - J``.
    """
    J = sample.n_groups
    counts = np.bincount(sample.labels, minlength=J)
    sums = np.bincount(sample.labels, weights=sample.outcomes, minlength=J)
    means = sums / (counts + (counts == 0))
    resid = sample.outcomes - means[sample.labels]
    wss = np.bincount(sample.labels, weights=resid * resid, minlength=J)
    return GroupSummary(counts, means, wss, variance_mode=variance_mode, names=sample.names)


class DeltaOperator:
    """Dense pairwise-difference matrix ``(I kron 1) - (1 kron I)``.

    ``matrix @ mu`` stacks ``mu[k] - mu[j]`` in row-major ``(k, j)`` order.
    """

    def __init__(self, n_groups: int):
        if n_groups < 2:
            raise InputError("the difference operator needs J >= 2")
        self.n_groups = n_groups
        eye = np.eye(n_groups)
        ones = np.ones((n_groups, 1))
        mat = np.kron(eye, ones) - np.kron(ones, eye)
        mat.setflags(write=False)
        self.matrix = mat

    def block(self, k: int) -> np.ndarray:
        """The ``J x J`` partition mapping ``mu`` to ``(mu[k] - mu[j])_j``."""
        J = self.n_groups
        return self.matrix[k * J:(k + 1) * J]

    def __matmul__(self, other):
        return self.matrix @ other

    def __repr__(self):
        return f"DeltaOperator(J={self.n_groups})"


def delta_operator(n_groups: int) -> DeltaOperator:
    return DeltaOperator(n_groups)


def read_grouped_csv(path, y_column: str = "y", columns: Sequence[str] | None = None
                     ) -> GroupedSample:
    """Read a raw-data CSV into a :class:`GroupedSample`.

    Groups are the observed combinations of the categorical columns (all
    columns other than ``y_column`` unless ``columns`` is given), numbered in
    lexicographic order of the category tuples. Group names join the tuple
    with ``"|"``.
    """
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if y_column not in header:
            raise InputError(f"CSV {path} has no {y_column!r} column")
        cats = list(columns) if columns else [c for c in header if c != y_column]
        missing = [c for c in cats if c not in header]
        if missing or not cats:
            raise InputError(f"categorical columns not found: {missing or 'none given'}")
        ys, keys = [], []
        for lineno, row in enumerate(reader, start=2):
            raw = (row.get(y_column) or "").strip()
            if raw == "":
                raise InputError(f"line {lineno}: missing {y_column!r}")
            try:
                ys.append(float(raw))
            except ValueError:
                raise InputError(f"line {lineno}: {y_column!r} is not a number: {raw!r}") from None
            keys.append(tuple((row.get(c) or "").strip() for c in cats))
    if not ys:
        raise InputError(f"CSV {path} has no data rows")
    levels = sorted(set(keys))
    index = {k: i for i, k in enumerate(levels)}
    labels = np.fromiter((index[k] for k in keys), dtype=np.int64, count=len(keys))
    names = tuple("|".join(k) for k in levels)
    return GroupedSample(np.asarray(ys), labels, len(levels), names)

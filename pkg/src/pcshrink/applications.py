"""Difference-in-differences from published cell summaries and block-wise
smoothing of panel cell means."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import PcsEstimate, pcs_estimate, plugin_weights
from .exceptions import InputError, PCSError
from .groups import GroupedSample, GroupSummary, summarize

DID_CELLS = ("NJ_before", "NJ_after", "PEN_before", "PEN_after")
FIXTURE = "table_a1.csv"


def _read_rows(fh, source):
    reader = csv.DictReader(fh)
    need = {"label", "mean", "variance", "n"}
    missing = need - set(reader.fieldnames or [])
    if missing:
        raise InputError(f"{source}: missing columns {sorted(missing)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            rows.append({**row, "mean": float(row["mean"]), "variance": float(row["variance"]),
                         "n": int(row["n"])})
        except (TypeError, ValueError):
            raise InputError(f"{source} line {lineno}: mean, variance and n must be numeric") from None
    if not rows:
        raise InputError(f"{source}: no data rows")
    return rows


def summary_from_rows(rows, variance_mode: str = "per_group") -> GroupSummary:
    """Build a summary from published cells; counts must be >= 2 and variances > 0."""
    for r in rows:
        if r["n"] < 2 or not r["variance"] > 0:
            raise InputError(f"cell {r['label']!r}: published summaries need n >= 2 and a "
                             "positive variance")
    return GroupSummary.from_moments([r["mean"] for r in rows], [r["variance"] for r in rows],
                                     [r["n"] for r in rows], [r["label"] for r in rows],
                                     variance_mode)


def read_summary_csv(path, group: str | None = None) -> GroupSummary:
    """Read a ``label, mean, variance, n`` CSV (optionally with a ``chain`` column).

    If a ``chain`` column is present, ``group`` selects its rows.
    """
    with open(Path(path), newline="") as fh:
        rows = _read_rows(fh, path)
    return summary_from_rows(_select(rows, group, path))


def _select(rows, group, source):
    if "chain" in rows[0]:
        chains = list(dict.fromkeys(r["chain"] for r in rows))
        if group is None:
            if len(chains) > 1:
                raise InputError(f"{source} holds several panels {chains}; choose one")
            return rows
        chosen = [r for r in rows if r["chain"] == group]
        if not chosen:
            raise InputError(f"panel {group!r} not found; available: {chains}")
        return chosen
    if group is not None:
        raise InputError(f"{source} has no chain column")
    return rows


def load_card_krueger(chain: str | None = None):
    """Bundled fast-food employment summaries (New Jersey vs Pennsylvania).

    Returns the summary of one ``chain`` or a dict of all five panels:
    ``All chains``, ``Burger King``, ``KFC``, ``Roys`` and ``Wendys``. Cells
    are ordered ``NJ_before, NJ_after, PEN_before, PEN_after``.
    """
    text = resources.files("pcshrink").joinpath("data").joinpath(FIXTURE).read_text()
    rows = _read_rows(io.StringIO(text), FIXTURE)
    chains = list(dict.fromkeys(r["chain"] for r in rows))
    if chain is not None:
        return summary_from_rows(_select(rows, chain, FIXTURE))
    return {c: summary_from_rows(_select(rows, c, FIXTURE)) for c in chains}


@dataclass(frozen=True)
class DiDReport:
    """Cell means of a 2x2 design and their difference-in-differences."""

    method: str
    nj_before: float
    nj_after: float
    pen_before: float
    pen_after: float
    names: tuple[str, ...] = field(default=DID_CELLS)

    @property
    def means(self) -> np.ndarray:
        return np.array([self.nj_before, self.nj_after, self.pen_before, self.pen_after])

    @property
    def did(self) -> float:
        return (self.nj_after - self.nj_before) - (self.pen_after - self.pen_before)


def _did_order(summary: GroupSummary) -> np.ndarray:
    if set(summary.names) == set(DID_CELLS):
        return np.array([summary.names.index(c) for c in DID_CELLS])
    return np.arange(4)


def did_from_summary(summary: GroupSummary, method: str = "pcs") -> DiDReport:
    """DiD from four cells, either raw means (``ols``) or plug-in PCS means.

    Cells named ``NJ_before, NJ_after, PEN_before, PEN_after`` are matched
    by name; otherwise that positional order is assumed. PCS smooths all
    four cells jointly.
    """
    if summary.n_groups != 4:
        raise InputError(f"a 2x2 DiD needs exactly 4 cells, got {summary.n_groups}")
    if method == "ols":
        means = summary.means
    elif method == "pcs":
        means = plugin_weights(summary).values @ summary.means
    else:
        raise InputError(f"DiD supports methods 'ols' and 'pcs', not {method!r}")
    order = _did_order(summary)
    vals = [float(means[i]) for i in order]
    return DiDReport(method, *vals, names=tuple(summary.names[i] for i in order))


@dataclass(frozen=True)
class BlockSmoothing:
    """Cell estimates after smoothing within each declared block."""

    estimates: np.ndarray
    first_stage: np.ndarray
    blocks: dict
    fits: dict
    names: tuple[str, ...]
    warnings: tuple[str, ...] = ()


def _resolve_block(cells, names):
    out = []
    for c in cells:
        if isinstance(c, (int, np.integer)) and not isinstance(c, bool):
            if not 0 <= c < len(names):
                raise InputError(f"cell index {c} out of range")
            out.append(int(c))
        elif c in names:
            out.append(names.index(c))
        else:
            raise InputError(f"unknown cell {c!r}")
    return out


def blockwise_panel_smooth(data, blocks: Mapping[str, Sequence], variance_mode: str = "per_group",
                           skip_degenerate: bool = False) -> BlockSmoothing:
    """Plug-in PCS applied separately within each block of cells.

    Parameters
    ----------
    data : GroupedSample or GroupSummary
        Cell-level data.
    blocks : mapping
        Block name to the cells (names or indices) it contains. Blocks must
        not overlap; cells outside every block keep their cell mean.
    skip_degenerate : bool
        Pass a block through unsmoothed when one of its cells cannot be
        used, instead of raising.
    """
    summary = summarize(data, variance_mode) if isinstance(data, GroupedSample) else \
        data.with_variance_mode(variance_mode)
    names = summary.names
    est = summary.means.astype(float).copy()
    seen: dict[int, str] = {}
    notes, fits, resolved = [], {}, {}
    for block, cells in blocks.items():
        idx = _resolve_block(cells, list(names))
        for i in idx:
            if i in seen:
                raise InputError(f"cell {names[i]!r} appears in blocks {seen[i]!r} and {block!r}")
            seen[i] = block
        resolved[block] = idx
        if len(idx) < 2:
            notes.append(f"block {block!r} has a single cell; left unsmoothed")
            continue
        local = summary.subset(idx)
        try:
            fit = pcs_estimate(local, plugin_weights(local), "plug-in")
        except PCSError as exc:
            cell = getattr(exc, "group", None)
            where = f" (cell {local.names[cell]!r})" if cell is not None else ""
            msg = f"block {block!r}{where}: {exc}"
            if not skip_degenerate:
                raise type(exc)(msg) from exc
            notes.append(msg + "; left unsmoothed")
            continue
        est[idx] = fit.estimates
        fits[block] = fit
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return BlockSmoothing(est, summary.means.copy(), resolved, fits, names, tuple(notes))


__all__ = ["DiDReport", "BlockSmoothing", "DID_CELLS", "load_card_krueger", "read_summary_csv",
           "summary_from_rows", "did_from_summary", "blockwise_panel_smooth", "PcsEstimate"]

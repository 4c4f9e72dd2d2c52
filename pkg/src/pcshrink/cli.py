"""Command-line interface: ``pcshrink {fit,weights,simulate,risk}``.

Exit codes
----------
0 success; 1 internal error; 2 usage error; 3 unknown method;
4 malformed input; 5 configuration error (conflicting or missing
settings); 6 estimation failure; 7 file I/O error.

Errors are reported on stderr as a one-line JSON record.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .applications import blockwise_panel_smooth, did_from_summary, read_summary_csv
from .core import PenaltyMatrix, pcs_from_penalties, penalties_from_weights
from .exceptions import (DegenerateVarianceError, ExistenceError, InputError,
                         InsufficientDataError, OptimizationError, PCSError,
                         SimulationAborted)
from .groups import VARIANCE_MODES, read_grouped_csv, summarize
from .montecarlo import DesignSpec, default_deltas, run_design, run_oracle_design
from .risk import asymptotic_risk_pcs, dominance_matrix_check
from .rivals import METHODS, fit_method

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_METHOD, EXIT_INPUT, EXIT_CONFIG, EXIT_ESTIMATION, \
    EXIT_IO = range(8)
SEED_ENV = "PCSHRINK_SEED"
WEIGHT_METHODS = ("pcs", "ols", "rr", "grr", "kernel")
ORACLE_METHODS = ("ols", "pcs", "rr", "grr", "kernel")


class UnknownMethodError(PCSError):
    pass


class ConfigError(PCSError):
    pass


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UnknownMethodError):
        return EXIT_METHOD
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DegenerateVarianceError, InsufficientDataError, ExistenceError,
                        OptimizationError, SimulationAborted)):
        return EXIT_ESTIMATION
    if isinstance(exc, (InputError, csv.Error, UnicodeDecodeError, json.JSONDecodeError)):
        return EXIT_INPUT
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_INTERNAL


# serialization ---------------------------------------------------------------

def _clean(obj):
    """Convert numpy containers and non-finite floats to JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def config_digest(config: dict) -> str:
    text = json.dumps(_clean(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def metadata(config: dict, seed=None) -> dict:
    return {"tool": "pcshrink", "version": __version__, "seed": seed,
            "config_digest": config_digest(config), "config": _clean(config)}


def _write(text: str, output: str | None):
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(output).write_text(text)


def _emit_json(payload: dict, output):
    _write(json.dumps(_clean(payload), indent=2, sort_keys=False) + "\n", output)


# input helpers -------------------------------------------------------------

def _check_method(method: str, allowed) -> str:
    if method not in allowed:
        raise UnknownMethodError(f"unknown method {method!r}; choose from {', '.join(allowed)}")
    return method


def _is_summary_csv(path) -> bool:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    cols = {h.strip() for h in header}
    return {"label", "mean", "variance", "n"} <= cols


def _load_summary(args):
    path = args.input
    if _is_summary_csv(path):
        if args.y_column != "y":
            raise ConfigError("--y-column applies to raw data only")
        summary = read_summary_csv(path, args.panel)
        summary = summary.with_variance_mode(args.variance_mode)
    else:
        if args.panel is not None:
            raise ConfigError("--panel applies to summary CSV files only")
        summary = summarize(read_grouped_csv(path, args.y_column), args.variance_mode)
    if args.variance_floor is not None:
        summary = summary.with_variance_floor(args.variance_floor)
    return summary


def parse_config(path) -> dict:
    """Read a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        if not isinstance(data, dict):
            raise InputError("a JSON config must be an object")
        return data
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path} line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _parse_value(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    if "," in value:
        return [_parse_value(v.strip()) for v in value.split(",")]
    return value.strip("'\"")


def _resolve_seed(cli_seed, config: dict):
    cfg_seed = config.get("seed")
    if cli_seed is not None and cfg_seed is not None and int(cfg_seed) != cli_seed:
        raise ConfigError(f"seed given as {cli_seed} on the command line and {cfg_seed} in "
                          "the config file")
    seed = cli_seed if cli_seed is not None else cfg_seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if seed is None:
        raise ConfigError(f"a seed is required (--seed, config 'seed' or ${SEED_ENV})")
    return int(seed)


# subcommands -----------------------------------------------------------------

def cmd_fit(args) -> int:
    modes = [bool(args.did), args.blocks is not None]
    if sum(modes) > 1:
        raise ConfigError("--did and --blocks are mutually exclusive")
    method = _check_method(args.method, METHODS)
    config = {"command": "fit", "input": str(args.input), "method": method, "did": args.did,
              "blocks": args.blocks, "panel": args.panel, "variance_mode": args.variance_mode,
              "variance_floor": args.variance_floor, "y_column": args.y_column}
    if args.did:
        if method not in ("ols", "pcs"):
            raise ConfigError("--did supports --method ols or pcs")
        summary = _load_summary(args)
        rep = did_from_summary(summary, method)
        payload = {"method": method, "group_labels": list(rep.names),
                   "estimates": rep.means, "did": rep.did}
    elif args.blocks is not None:
        if method != "pcs":
            raise ConfigError("--blocks smooths with plug-in PCS; use --method pcs")
        if _is_summary_csv(args.input):
            raise ConfigError("--blocks needs raw data (a CSV with a y column)")
        blocks = json.loads(Path(args.blocks).read_text())
        if not isinstance(blocks, dict):
            raise InputError("the block file must map block names to lists of cell labels")
        sample = read_grouped_csv(args.input, args.y_column)
        res = blockwise_panel_smooth(sample, blocks, args.variance_mode, args.skip_degenerate)
        payload = {"method": "pcs-blockwise", "group_labels": list(res.names),
                   "estimates": res.estimates, "first_stage": res.first_stage,
                   "blocks": {b: [res.names[i] for i in idx] for b, idx in res.blocks.items()},
                   "warnings": list(res.warnings)}
    else:
        summary = _load_summary(args)
        est = fit_method(summary, method)
        payload = {"method": method, "group_labels": list(est.names),
                   "estimates": est.estimates, "smoothing": est.smoothing,
                   "warnings": list(est.warnings)}
    payload["metadata"] = metadata(config)
    _emit_json(payload, args.output)
    return EXIT_OK


def cmd_weights(args) -> int:
    if args.penalties is not None and args.method != "pcs":
        raise ConfigError("--penalties fixes the PCS penalties; do not combine with --method")
    method = _check_method(args.method, WEIGHT_METHODS)
    summary = _load_summary(args)
    config = {"command": "weights", "input": str(args.input), "method": method,
              "penalties": args.penalties, "variance_mode": args.variance_mode,
              "variance_floor": args.variance_floor, "panel": args.panel}
    notes = []
    if args.penalties is not None:
        lam = PenaltyMatrix(np.asarray(json.loads(Path(args.penalties).read_text()), float))
        est = pcs_from_penalties(summary, lam)
        weights, source, notes = est.weights, "fixed-lambda", list(est.warnings)
    else:
        est = fit_method(summary, method)
        weights, source = est.weights, f"plug-in {method}"
    try:
        penalties = penalties_from_weights(weights, summary).values
    except ExistenceError as exc:
        penalties = None
        notes.append(str(exc))
    payload = {"method": method, "source": source, "group_labels": list(summary.names),
               "weights": weights.values, "penalties": penalties,
               "estimates": weights.values @ summary.means, "warnings": notes,
               "metadata": metadata(config)}
    _emit_json(payload, args.output)
    return EXIT_OK


_SPEC_KEYS = {"command", "design", "sigma2", "heteroskedastic", "error_family", "n", "replications",
              "seed", "deltas", "delta_max", "delta_points", "variance_mode", "estimators",
              "oracle", "probabilities", "direction", "scaled"}


def build_simulation(config: dict, args) -> tuple[DesignSpec, tuple, bool]:
    unknown = set(config) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if config.get("command", "simulate") != "simulate":
        raise ConfigError(f"config was written by {config['command']!r}, not simulate")
    # null entries (as written into output metadata) mean "use the default"
    cfg = {k: v for k, v in config.items() if v is not None and k != "command"}
    for key in ("design", "replications", "n", "error_family", "variance_mode"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.estimators is not None:
        cfg["estimators"] = args.estimators.split(",")
    if args.oracle:
        cfg["oracle"] = True
    cfg["seed"] = _resolve_seed(args.seed, config)
    oracle = bool(cfg.pop("oracle", False))
    design = cfg.pop("design", "A")
    if "sigma2" in cfg and "heteroskedastic" in cfg:
        raise ConfigError("give either sigma2 or heteroskedastic, not both")
    het = bool(cfg.pop("heteroskedastic", design != "A" if oracle else False))
    sigma2 = tuple(cfg.pop("sigma2", (1.0, 1.0, 1.0, 10.0) if het else (1.0,) * 4))
    n = int(cfg.pop("n", 400))
    scaled = bool(cfg.pop("scaled", not oracle))
    if "deltas" in cfg and ("delta_max" in cfg or "delta_points" in cfg):
        raise ConfigError("give either deltas or delta_max/delta_points")
    if "deltas" in cfg:
        deltas = tuple(float(d) for d in np.atleast_1d(cfg.pop("deltas")))
    elif "delta_max" in cfg or "delta_points" in cfg:
        grid = np.linspace(0.0, float(cfg.pop("delta_max", 20.0)), int(cfg.pop("delta_points", 41)))
        deltas = tuple(float(d) for d in (grid if scaled else grid / math.sqrt(n)))
    else:
        deltas = default_deltas(scaled, n)
    estimators = cfg.pop("estimators", ORACLE_METHODS if oracle else METHODS)
    if isinstance(estimators, str):
        estimators = estimators.split(",")
    estimators = tuple(e.strip() for e in estimators)
    for e in estimators:
        _check_method(e, ORACLE_METHODS if oracle else METHODS)
    if oracle and cfg.get("variance_mode") is not None:
        raise ConfigError("oracle runs use true variances; variance_mode does not apply")
    cfg.setdefault("error_family", "gaussian" if oracle else "lognormal")
    for key in ("probabilities", "direction"):
        if key in cfg:
            cfg[key] = tuple(float(x) for x in cfg[key])
    spec = DesignSpec(design=design, sigma2=sigma2, n=n, deltas=deltas, scaled=scaled, **cfg)
    return spec, estimators, oracle


def cmd_simulate(args) -> int:
    config = parse_config(args.config) if args.config else {}
    spec, estimators, oracle = build_simulation(config, args)
    threads = args.threads or os.cpu_count() or 1
    runner = run_oracle_design if oracle else run_design
    result = runner(spec, estimators, threads=threads)
    resolved = {"command": "simulate", "oracle": oracle, "estimators": list(estimators),
                **spec.to_dict()}
    if oracle:
        resolved["variance_mode"] = None
    meta = metadata(resolved, spec.seed)
    header = {"tool": meta["tool"], "version": meta["version"], "seed": spec.seed,
              "config_digest": meta["config_digest"],
              "config": json.dumps(meta["config"], sort_keys=True, separators=(",", ":"))}
    _write(result.to_csv(metadata=header), args.output)
    return EXIT_OK


def cmd_risk(args) -> int:
    config = parse_config(args.config) if args.config else {}
    for key, val in (("delta", args.delta), ("gamma", args.gamma), ("draws", args.draws)):
        if val is not None:
            config[key] = val
    allowed = {"command", "mu", "delta", "sigma2", "p", "gamma", "n", "draws", "seed"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown risk config keys: {sorted(unknown)}")
    if config.pop("command", "risk") != "risk":
        raise ConfigError("config was not written by the risk command")
    seed = _resolve_seed(args.seed, config)
    if ("mu" in config) == ("delta" in config):
        raise ConfigError("give exactly one of mu or delta")
    if "gamma" in config and ("sigma2" in config or "p" in config):
        raise ConfigError("give gamma or (sigma2, p), not both")
    if "gamma" in config:
        gamma = np.asarray(config["gamma"], dtype=float)
    else:
        if "sigma2" not in config:
            raise ConfigError("risk needs gamma or sigma2 (with optional p)")
        sigma2 = np.asarray(config["sigma2"], dtype=float)
        p = np.asarray(config.get("p", np.full(sigma2.size, 1.0 / sigma2.size)), dtype=float)
        gamma = p / sigma2
    if "mu" in config:
        if "n" not in config:
            raise ConfigError("mu needs the sample size n to convert to delta = sqrt(n) mu")
        delta = math.sqrt(float(config["n"])) * np.asarray(config["mu"], dtype=float)
    else:
        delta = np.asarray(config["delta"], dtype=float)
    draws = int(config.get("draws", 200_000))
    threads = args.threads or os.cpu_count() or 1
    est = asymptotic_risk_pcs(gamma, delta, draws=draws, seed=seed, threads=threads)
    dom = dominance_matrix_check(gamma)
    resolved = {"command": "risk", "gamma": gamma, "delta": delta, "draws": draws, "seed": seed}
    payload = {"risk": est.value, "mc_se": est.std_error, "ols_risk": est.ols_risk,
               "relative_risk": est.value / est.ols_risk, "draws": est.draws,
               "dominance": {"neg_c": dom.neg_c, "min_eigenvalue": dom.min_eigenvalue,
                             "diagonally_dominant": dom.diagonally_dominant,
                             "positive_semidefinite": dom.is_psd},
               "metadata": metadata(resolved, seed)}
    _emit_json(payload, args.output)
    return EXIT_OK


# parser ----------------------------------------------------------------------

def _add_data_options(p):
    p.add_argument("input", help="raw CSV (a 'y' column plus categorical columns) or summary "
                                 "CSV (label, mean, variance, n[, chain])")
    p.add_argument("--variance-mode", choices=VARIANCE_MODES, default="per_group",
                   help="per-group variances (divisor n_j - 1) or one pooled residual "
                        "variance (divisor n - J)")
    p.add_argument("--variance-floor", type=float, default=None, metavar="EPS",
                   help="replace variances below EPS by EPS (off by default)")
    p.add_argument("--panel", default=None,
                   help="panel to use from a summary CSV with a chain column")
    p.add_argument("--y-column", default="y", help="outcome column of raw data (default y)")
    p.add_argument("-o", "--output", default=None, help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcshrink", description="Pairwise cross-smoothing of categorical group means.",
        epilog="Exit codes: 0 ok, 1 internal, 2 usage, 3 unknown method, 4 malformed input, "
               "5 configuration error, 6 estimation failure, 7 I/O error.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate group means")
    _add_data_options(fit)
    fit.add_argument("--method", default="pcs",
                     help=f"one of {', '.join(METHODS)} (default pcs: plug-in MSE-optimal "
                          "weights)")
    fit.add_argument("--did", action="store_true",
                     help="difference-in-differences from a 4-cell summary "
                          "(NJ_before, NJ_after, PEN_before, PEN_after)")
    fit.add_argument("--blocks", default=None, metavar="FILE",
                     help="JSON file mapping block names to cell labels; smooth within blocks")
    fit.add_argument("--skip-degenerate", action="store_true",
                     help="leave blocks with unusable cells unsmoothed instead of failing")
    fit.set_defaults(func=cmd_fit)

    w = sub.add_parser("weights", help="print the weight matrix and the equivalent penalties")
    _add_data_options(w)
    w.add_argument("--method", default="pcs", help=f"one of {', '.join(WEIGHT_METHODS)}")
    w.add_argument("--penalties", default=None, metavar="FILE",
                   help="JSON J x J penalty matrix (zero diagonal) instead of plug-in weights")
    w.set_defaults(func=cmd_weights)

    sim = sub.add_parser("simulate", help="Monte Carlo relative weighted MSE curves (CSV)")
    sim.add_argument("--config", default=None, help="JSON or key = value design file")
    sim.add_argument("--design", choices=("A", "B", "C", "custom"), default=None)
    sim.add_argument("--replications", type=int, default=None)
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--error-family", choices=("gaussian", "lognormal"), default=None)
    sim.add_argument("--variance-mode", choices=VARIANCE_MODES, default=None)
    sim.add_argument("--estimators", default=None, help="comma-separated method names")
    sim.add_argument("--oracle", action="store_true",
                     help="oracle smoothing at the true parameters (fixed-mean designs)")
    sim.add_argument("--seed", type=int, default=None, help=f"base seed (or ${SEED_ENV})")
    sim.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: all cores; output does not depend on it)")
    sim.add_argument("-o", "--output", default=None)
    sim.set_defaults(func=cmd_simulate)

    risk = sub.add_parser("risk", help="asymptotic weighted risk of plug-in PCS")
    risk.add_argument("--config", default=None,
                      help="JSON or key = value file with mu or delta, sigma2 and p (or "
                           "gamma), n, draws, seed")
    risk.add_argument("--delta", type=lambda s: [float(x) for x in s.split(",")], default=None,
                      help="local parameter, comma separated")
    risk.add_argument("--gamma", type=lambda s: [float(x) for x in s.split(",")], default=None,
                      help="precisions p_j / sigma2_j, comma separated")
    risk.add_argument("--draws", type=int, default=None)
    risk.add_argument("--seed", type=int, default=None)
    risk.add_argument("--threads", type=int, default=None)
    risk.add_argument("-o", "--output", default=None)
    risk.set_defaults(func=cmd_risk)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        sys.stderr.write(json.dumps(record) + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())

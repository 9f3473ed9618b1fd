"""Command-line interface: simulate, fit, select, compare, predict and rerun.

Every command writes ``manifest.json`` next to its outputs.  The manifest
records the command and all of its parameters, so ``crowdsparse rerun
manifest.json`` repeats the run and reproduces its CSV files byte for byte.

Exit codes: 0 on success, 2 for invalid input, 3 when fitting fails
numerically.  Errors are reported on stderr as a one-line JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import modelfile
from .baselines import majority_logistic, oracle_logistic
from .data import DataError, Dataset, SplitSpec, load_csv, load_features_csv, load_votes_csv
from .data import split, standardize
from .em import CrowdParams, EmConfig, EmError, fit_map_em, posterior_with_votes, predict_proba
from .selection import (compare_methods, default_grid, majority_init, select_lambda,
                        select_lambda_cv)
from .simulate import ConfigError, generate, load_config, write_scenario
from .wl1 import SolverError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
METHODS = ("em", "em-sparse", "majority", "oracle")


class UsageError(ValueError):
    """Invalid combination of command-line options."""


# -- helpers -------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_column(path: Path, name: str, values) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(name + "\n")
        fh.writelines(_fmt(v) + "\n" for v in values)
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _parse_grid(text: Optional[str]):
    if text is None:
        return None
    try:
        values = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--grid must be a comma-separated list of numbers, got {text!r}")
    if not values:
        raise UsageError("--grid is empty")
    return tuple(sorted(values, reverse=True))


def _load(args) -> Dataset:
    return load_csv(args.features, args.votes, args.labels)


def _maybe_standardize(ds: Dataset, args):
    if not args.standardize:
        return ds, None
    return standardize(ds)


@contextmanager
def _executor(jobs: int):
    if jobs is None or jobs <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield pool


def _em_config(args, lam: float = 0.0) -> EmConfig:
    return EmConfig(lam=lam, restarts=args.restarts, seed=args.seed, em_tol=args.em_tol,
                    max_em_iters=args.max_em_iters)


def _grid_for(train: Dataset, args):
    grid = _parse_grid(args.grid)
    return grid if grid is not None else default_grid(train, size=args.grid_size)


def _select(ds: Dataset, args, executor):
    """Selection report by held-out split (default) or by cross-validation."""
    cfg = _em_config(args)
    if args.cv:
        return select_lambda_cv(ds, _grid_for(ds, args), args.cv, cfg, executor)
    train, test = split(ds, SplitSpec(args.test_fraction, args.seed))
    return select_lambda(train, test, _grid_for(train, args), cfg, None, executor)


# -- commands --------------------------------------------------------------------------


def cmd_simulate(args, out: Path, executor) -> dict:
    cfg = load_config(args.config)
    scn = generate(cfg, args.bayes_mc)
    paths = write_scenario(scn, out)
    return {"outputs": {k: str(v) for k, v in paths.items()}, "seeds": {"seed": cfg.seed}}


def cmd_fit(args, out: Path, executor) -> dict:
    raw = _load(args)
    ds, record = _maybe_standardize(raw, args)
    method = args.method
    info: dict = {"method": method}
    outputs = {}
    if method in ("majority", "oracle"):
        lam = 0.0 if args.lambda_ is None else args.lambda_
        if method == "oracle" and not ds.has_labels:
            raise UsageError("--method oracle needs --labels")
        fitter = majority_logistic if method == "majority" else oracle_logistic
        coef = fitter(ds, lam).values
        params = CrowdParams(np.zeros(ds.d), np.zeros(ds.k), coef)
        model = modelfile.SavedModel(params, lam, method, False, record)
        outputs["posterior"] = _write_column(out / "posterior.csv", "probability",
                                             predict_proba(params, ds.features))
    else:
        if method == "em":
            lam = 0.0 if args.lambda_ is None else args.lambda_
        elif args.lambda_ is not None:
            lam = args.lambda_
        else:
            report = _select(ds, args, executor)
            outputs["select_report"] = report.write_csv(out / "select_report.csv")
            lam = report.chosen_lambda
        res = fit_map_em(ds, _em_config(args, lam), majority_init(ds), (), executor)
        model = modelfile.SavedModel(res.params, lam, method, res.flipped, record)
        outputs["posterior"] = _write_column(out / "posterior.csv", "posterior", res.posterior)
        info.update(converged=res.converged, restart_index=res.restart_index,
                    penalized_observed=res.penalized_observed)
    info["lambda"] = lam
    outputs["model"] = modelfile.save(model, out / "model.txt")
    return {"outputs": {k: str(v) for k, v in outputs.items()}, "result": info}


def cmd_select(args, out: Path, executor) -> dict:
    ds, _ = _maybe_standardize(_load(args), args)
    report = _select(ds, args, executor)
    path = report.write_csv(out / "select_report.csv")
    return {"outputs": {"select_report": str(path)},
            "result": {"chosen_lambda": report.chosen_lambda, "chosen_by": report.chosen_by,
                       "n_prime": report.n_prime}}


def cmd_compare(args, out: Path, executor) -> dict:
    ds, _ = _maybe_standardize(_load(args), args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    if "oracle" in methods and not ds.has_labels:
        raise UsageError("the oracle method needs --labels")
    train, test = split(ds, SplitSpec(args.test_fraction, args.seed))
    rules = {"always-1": lambda x: np.ones(x.shape[0], dtype=np.int8)} if args.dummy else None
    report = compare_methods(train, test, _em_config(args), _grid_for(train, args), methods,
                             rules, executor)
    outputs = {"compare": str(report.write_methods_csv(out / "compare.csv"))}
    if "em-sparse" in methods:
        outputs["select_report"] = str(report.write_csv(out / "select_report.csv"))
    return {"outputs": outputs,
            "result": {"s_hat_minimizers": [m.method for m in report.methods if m.s_hat_min],
                       "r_hat_minimizers": [m.method for m in report.methods if m.r_hat_min]}}


def cmd_predict(args, out: Path, executor) -> dict:
    model = modelfile.load(args.model)
    x = model.prepare(load_features_csv(args.features))
    if args.votes is None:
        prob = predict_proba(model.params, x)
    else:
        votes = load_votes_csv(args.votes)
        if votes.shape[0] != x.shape[0]:
            raise UsageError(f"{votes.shape[0]} vote rows for {x.shape[0]} feature rows")
        prob = posterior_with_votes(model.params, x, votes)
    path = _write_column(out / "predictions.csv", "probability", np.atleast_1d(prob))
    return {"outputs": {"predictions": str(path)}}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "select": cmd_select,
            "compare": cmd_compare, "predict": cmd_predict}

# parameters that may differ between a run and its rerun without changing results
_VOLATILE = ("out", "jobs", "command", "manifest")
_PATH_PARAMS = ("features", "votes", "labels", "model", "config")


# -- parser ----------------------------------------------------------------------------


def _add_data(p, labels=True):
    p.add_argument("--features", required=True, help="features CSV, one row per unit")
    p.add_argument("--votes", required=True, help="votes CSV (0, 1 or empty per expert)")
    if labels:
        p.add_argument("--labels", help="optional true labels CSV (enables r_hat)")
    p.add_argument("--standardize", action="store_true",
                   help="z-score features before fitting (off by default)")


def _add_em(p):
    p.add_argument("--restarts", type=int, default=30, help="random EM starts (default 30)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--em-tol", type=float, default=1e-6,
                   help="relative objective change that stops EM (default 1e-6)")
    p.add_argument("--max-em-iters", type=int, default=200)


def _add_grid(p):
    p.add_argument("--grid", help="comma-separated lambda values (sorted descending)")
    p.add_argument("--grid-size", type=int, default=30,
                   help="size of the default log-spaced grid (default 30)")
    p.add_argument("--test-fraction", type=float, default=0.3,
                   help="held-out share of units for scoring (default 0.3)")


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdsparse",
                                     description="Sparse crowd-labelled logistic regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate features, votes and labels from a config")
    p.add_argument("config", help="YAML simulation config")
    p.add_argument("--bayes-mc", type=int, default=0,
                   help="Monte-Carlo draws for the Bayes risk (0 skips it)")
    _add_common(p)

    p = sub.add_parser("fit", help="fit one model and write model.txt and posterior.csv")
    _add_data(p)
    p.add_argument("--method", choices=METHODS, default="em")
    p.add_argument("--lambda", dest="lambda_", type=float,
                   help="penalty; em-sparse without it selects lambda on a held-out split")
    p.add_argument("--cv", type=int, default=0, help="select lambda by K-fold cross-validation")
    _add_em(p)
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("select", help="score a lambda grid and write select_report.csv")
    _add_data(p)
    p.add_argument("--cv", type=int, default=0, help="score by K-fold cross-validation")
    _add_em(p)
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("compare", help="score several methods and write compare.csv")
    _add_data(p)
    p.add_argument("--methods", default="em,em-sparse,majority",
                   help="comma-separated subset of em, em-sparse, majority, oracle")
    p.add_argument("--dummy", action="store_true", help="add an always-1 classifier")
    _add_em(p)
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("predict", help="apply a model file to new features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--votes", help="optional partial votes for the new units")
    _add_common(p)

    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the recorded one)")
    p.add_argument("--jobs", type=int, help="worker processes (default: the recorded value)")
    return parser


# -- running -------------------------------------------------------------------------


def _parameters(args) -> dict:
    params = {}
    for key, value in sorted(vars(args).items()):
        if key in _VOLATILE:
            continue
        if key in _PATH_PARAMS and value is not None:
            value = str(Path(value).resolve())
        params[key] = value
    return params


def _inputs(params: dict) -> dict:
    return {k: {"path": params[k], "sha256": _sha256(params[k])}
            for k in _PATH_PARAMS if params.get(k) is not None}


def execute(command: str, args) -> dict:
    """Run ``command`` with parsed ``args`` and write its manifest; returns the manifest."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = _parameters(args)
    started = time.time()
    with _executor(args.jobs) as pool:
        result = COMMANDS[command](args, out, pool)
    manifest = {"command": command,
                "parameters": params,
                "inputs": _inputs(params),
                "out": str(out.resolve()),
                "jobs": args.jobs,
                "version": __version__,
                "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
                "wall_clock_seconds": round(time.time() - started, 3)}
    manifest.update(result)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def rerun(manifest_path, out=None, jobs=None) -> dict:
    """Repeat the run described by a manifest, optionally into another directory."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command = manifest["command"]
        params = dict(manifest["parameters"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"unreadable manifest {manifest_path}: {exc}") from None
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    params["out"] = out if out is not None else manifest.get("out")
    params["jobs"] = jobs if jobs is not None else manifest.get("jobs", 1)
    if params["out"] is None:
        raise UsageError("manifest has no output directory; pass --out")
    return execute(command, argparse.Namespace(**params))


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            rerun(args.manifest, args.out, args.jobs)
        else:
            execute(args.command, args)
    except (EmError, SolverError, FloatingPointError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except (UsageError, DataError, ConfigError, modelfile.ModelFileError, ValueError,
            OSError) as exc:
        return _fail("validation", exc, EXIT_INVALID)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

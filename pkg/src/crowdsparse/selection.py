"""Choosing the penalty and comparing methods without ground truth.

Predictions are scored against the experts' votes on held-out units.  The
surrogate score ``s_hat`` is the average disagreement between a predicted
label and the available votes, first per unit and then over units.  When the
experts' errors do not depend on the classifier, ``s_hat`` is an affine,
increasing function of the true risk, so its minimizer tracks the risk
minimizer.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .baselines import majority_lambda_max, majority_logistic, oracle_logistic
from .data import Dataset, kfold_indices
from .em import EmConfig, EmError, FitResult, classify, fit_map_em
from .simulate import SimulationConfig, _draw_features, expert_error_prob, generate, truth_prob
from .wl1 import SolverConfig, SolverError


# -- scores ----------------------------------------------------------------------


def _labels(predictions, n: int) -> np.ndarray:
    z = np.asarray(predictions).ravel()
    if z.size != n:
        raise ValueError(f"{z.size} predictions for {n} units")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("predictions must be 0/1 labels")
    return z.astype(np.int8)


def _unit_disagreement(labels: np.ndarray, ds: Dataset) -> np.ndarray:
    """Per unit, the fraction of available votes that differ from ``labels``."""
    differ = (ds.votes != labels[:, None]) & ds.available
    return differ.sum(axis=1) / ds.available.sum(axis=1)


def surrogate_score(predictions, ds: Dataset) -> float:
    """Mean over units of the fraction of available votes the prediction disagrees with."""
    z = _labels(predictions, ds.n)
    return float(np.mean(_unit_disagreement(z, ds)))


def empirical_risk(predictions, true_labels) -> float:
    t = np.asarray(true_labels).ravel()
    z = _labels(predictions, t.size)
    return float(np.mean(z != t))


@dataclass(frozen=True)
class ScoreBreakdown:
    s_hat: float
    weighted_term: float
    expert_error_term: float


def score_decomposition(predictions, ds: Dataset) -> ScoreBreakdown:
    """Split ``s_hat`` into a risk part and the experts' own error rate.

    With ``e_i`` the fraction of unit ``i``'s votes that are wrong,
    ``s_hat = mean_i (1 - 2 e_i) [z_i != Z_i] + mean_i e_i``.  The two terms
    are computed from the true labels, independently of ``s_hat``.
    """
    if ds.true_labels is None:
        raise ValueError("score decomposition needs true labels")
    z = _labels(predictions, ds.n)
    truth = ds.true_labels
    expert_err = _unit_disagreement(truth.astype(np.int8), ds)
    wrong = (z != truth).astype(np.float64)
    return ScoreBreakdown(s_hat=surrogate_score(z, ds),
                          weighted_term=float(np.mean((1.0 - 2.0 * expert_err) * wrong)),
                          expert_error_term=float(np.mean(expert_err)))


# -- reports -----------------------------------------------------------------------

REPORT_COLUMNS = ("lambda", "s_hat", "r_hat", "nnz_gamma", "nnz_beta", "converged")
METHOD_COLUMNS = ("method",) + REPORT_COLUMNS + ("s_hat_min", "r_hat_min")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass(frozen=True)
class MethodScore:
    method: str
    lam: Optional[float]
    s_hat: float
    r_hat: Optional[float]
    nnz_gamma: Optional[int]
    nnz_beta: Optional[int]
    converged: Optional[bool]
    s_hat_min: bool = False
    r_hat_min: bool = False


@dataclass(frozen=True, eq=False)
class SelectionReport:
    """Scores along a lambda grid, the chosen lambda and, optionally, method scores.

    ``s_hat`` and ``r_hat`` are NaN where the fit failed (``failed`` is set) and
    ``r_hat`` is None when the scoring set has no labels.
    """

    grid: tuple
    s_hat: np.ndarray
    r_hat: Optional[np.ndarray]
    nnz_gamma: np.ndarray
    nnz_beta: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    chosen_lambda: float
    chosen_by: str = "s_hat"
    n_prime: int = 0
    fits: tuple = field(default=(), repr=False)
    methods: tuple = ()
    chosen_index: int = -1

    @property
    def chosen_fit(self) -> Optional[FitResult]:
        return self.fits[self.chosen_index] if self.fits and self.chosen_index >= 0 else None

    def rows(self) -> list[tuple]:
        out = []
        for j, lam in enumerate(self.grid):
            out.append((lam, self.s_hat[j], None if self.r_hat is None else self.r_hat[j],
                        int(self.nnz_gamma[j]), int(self.nnz_beta[j]), bool(self.converged[j])))
        return out

    def write_csv(self, path) -> Path:
        """One row per lambda with the columns of ``REPORT_COLUMNS``."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in self.rows():
                w.writerow([_fmt(v) for v in row])
        return path

    def write_methods_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METHOD_COLUMNS)
            for m in self.methods:
                w.writerow([m.method] + [_fmt(v) for v in (
                    m.lam, m.s_hat, m.r_hat, m.nnz_gamma, m.nnz_beta, m.converged,
                    m.s_hat_min, m.r_hat_min)])
        return path


def _first_min(values: np.ndarray, failed: np.ndarray) -> int:
    """Index of the smallest value among non-failed entries, earliest on ties."""
    best = None
    for j, v in enumerate(values):
        if failed[j]:
            continue
        if best is None or v < values[best]:
            best = j
    if best is None:
        raise EmError("every lambda in the grid failed to fit")
    return best


# -- lambda grid -------------------------------------------------------------------


def default_grid(ds: Dataset, size: int = 30, ratio: float = 1e-3,
                 solver: Optional[SolverConfig] = None) -> tuple:
    """``size`` log-spaced values from the majority-vote problem's lambda_max down to ``ratio`` times it."""
    if size < 1:
        raise ValueError("grid size must be at least 1")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    top = majority_lambda_max(ds, solver)
    if not top > 0:
        raise ValueError("majority-vote problem has lambda_max 0; supply a grid")
    if size == 1:
        return (float(top),)
    return tuple(float(v) for v in np.geomspace(top, top * ratio, size))


def _check_grid(grid: Sequence[float]) -> tuple:
    g = tuple(float(v) for v in grid)
    if not g:
        raise ValueError("lambda grid is empty")
    if any(not (math.isfinite(v) and v >= 0) for v in g):
        raise ValueError("lambda values must be finite and non-negative")
    if any(b > a for a, b in zip(g, g[1:])):
        raise ValueError("lambda grid must be sorted in descending order")
    return g


def majority_init(ds: Dataset, solver: Optional[SolverConfig] = None) -> np.ndarray:
    """Mean of the random beta starts: the unpenalized majority-vote logistic fit."""
    return majority_logistic(ds, 0.0, solver).values


def fit_path(train: Dataset, grid: Sequence[float], config: EmConfig,
             init_beta_mean=None, executor: Optional[Executor] = None) -> list:
    """MAP-EM at each lambda of a descending grid.

    Every lambda gets ``config.restarts`` random starts plus a warm start from
    the previous lambda's winner.  A repeated lambda reuses its fit.  Failed
    fits are returned as the exception instance.
    """
    grid = _check_grid(grid)
    if init_beta_mean is None:
        init_beta_mean = majority_init(train, config.solver)
    fits = []
    prev: Optional[FitResult] = None
    for j, lam in enumerate(grid):
        if j > 0 and lam == grid[j - 1]:
            fits.append(fits[-1])
            continue
        extra = () if prev is None else (prev.params,)
        try:
            res = fit_map_em(train, replace(config, lam=lam), init_beta_mean, extra, executor)
        except (EmError, SolverError) as exc:
            fits.append(exc)
            continue
        fits.append(res)
        prev = res
    return fits


def _score_fits(fits, grid, test: Dataset, chosen_by="s_hat") -> SelectionReport:
    m = len(grid)
    s = np.full(m, np.nan)
    r = np.full(m, np.nan) if test.has_labels else None
    ng = np.zeros(m, dtype=np.int64)
    nb = np.zeros(m, dtype=np.int64)
    conv = np.zeros(m, dtype=bool)
    failed = np.zeros(m, dtype=bool)
    for j, f in enumerate(fits):
        if not isinstance(f, FitResult):
            failed[j] = True
            continue
        z = classify(f.params, test.features)
        s[j] = surrogate_score(z, test)
        if r is not None:
            r[j] = empirical_risk(z, test.true_labels)
        ng[j], nb[j], conv[j] = f.params.nnz_gamma(), f.params.nnz_beta(), f.converged
    best = _first_min(s, failed)
    return SelectionReport(tuple(grid), s, r, ng, nb, conv, failed, grid[best], chosen_by,
                           test.n, tuple(fits), chosen_index=best)


def select_lambda(train: Dataset, test: Dataset, grid: Sequence[float], config: EmConfig,
                  init_beta_mean=None, executor: Optional[Executor] = None) -> SelectionReport:
    """Fit along ``grid`` on ``train`` and choose the lambda minimizing ``s_hat`` on ``test``.

    Ties go to the larger lambda (the sparser model).  Failed lambdas are
    flagged and excluded; ``r_hat`` is filled when ``test`` has labels.
    """
    grid = _check_grid(grid)
    fits = fit_path(train, grid, config, init_beta_mean, executor)
    return _score_fits(fits, grid, test)


# -- cross-validation ----------------------------------------------------------------


def _cv_predictions(ds: Dataset, folds: int, grid: tuple, config: EmConfig,
                    executor: Optional[Executor]) -> tuple[np.ndarray, np.ndarray]:
    """Held-out labels for every unit at every lambda (-1 where the fold's fit failed)."""
    if folds < 2 or folds > ds.n:
        raise ValueError(f"folds must be between 2 and n={ds.n}")
    parts = kfold_indices(ds.n, folds, config.seed)
    if any(p.size == 0 for p in parts) or any(p.size == ds.n for p in parts):
        raise ValueError("degenerate fold")
    pred = np.full((len(grid), ds.n), -1, dtype=np.int8)
    fold_of = np.empty(ds.n, dtype=np.int64)
    for f, held in enumerate(parts):
        fold_of[held] = f
        train = ds.subset(np.setdiff1d(np.arange(ds.n), held))
        fits = fit_path(train, grid, config, None, executor)
        x = ds.features[held]
        for j, fit in enumerate(fits):
            if isinstance(fit, FitResult):
                pred[j, held] = classify(fit.params, x)
    return pred, fold_of


def _pooled(pred_row: np.ndarray, ds: Dataset):
    if np.any(pred_row < 0):
        return math.nan, math.nan
    s = surrogate_score(pred_row, ds)
    r = empirical_risk(pred_row, ds.true_labels) if ds.has_labels else math.nan
    return s, r


def cross_validated_score(ds: Dataset, folds: int, lam: float, config: EmConfig,
                          executor: Optional[Executor] = None) -> float:
    """``s_hat`` of the out-of-fold predictions, each from a fit on the other folds.

    Units are assigned to folds by ``config.seed``; every unit counts once, so
    this is the unit-weighted average of the per-fold scores.
    """
    pred, _ = _cv_predictions(ds, folds, (float(lam),), config, executor)
    s, _ = _pooled(pred[0], ds)
    if math.isnan(s):
        raise EmError("a fold failed to fit")
    return s


def fold_scores(ds: Dataset, folds: int, lam: float, config: EmConfig,
                executor: Optional[Executor] = None) -> np.ndarray:
    """Per-fold ``s_hat`` of the held-out predictions."""
    pred, fold_of = _cv_predictions(ds, folds, (float(lam),), config, executor)
    out = []
    for f in range(folds):
        idx = np.flatnonzero(fold_of == f)
        out.append(surrogate_score(pred[0, idx], ds.subset(idx)))
    return np.array(out)


def select_lambda_cv(ds: Dataset, grid: Sequence[float], folds: int, config: EmConfig,
                     executor: Optional[Executor] = None) -> SelectionReport:
    """``select_lambda`` with cross-validated scores; sparsity columns come from a full-data path."""
    grid = _check_grid(grid)
    pred, _ = _cv_predictions(ds, folds, grid, config, executor)
    fits = fit_path(ds, grid, config, None, executor)
    m = len(grid)
    s = np.full(m, np.nan)
    r = np.full(m, np.nan) if ds.has_labels else None
    ng = np.zeros(m, dtype=np.int64)
    nb = np.zeros(m, dtype=np.int64)
    conv = np.zeros(m, dtype=bool)
    failed = np.zeros(m, dtype=bool)
    for j in range(m):
        sj, rj = _pooled(pred[j], ds)
        f = fits[j]
        if math.isnan(sj) or not isinstance(f, FitResult):
            failed[j] = True
            continue
        s[j] = sj
        if r is not None:
            r[j] = rj
        ng[j], nb[j], conv[j] = f.params.nnz_gamma(), f.params.nnz_beta(), f.converged
    best = _first_min(s, failed)
    return SelectionReport(grid, s, r, ng, nb, conv, failed, grid[best], "cv_s_hat", ds.n,
                           tuple(fits), chosen_index=best)


# -- method comparison -----------------------------------------------------------------


def _logistic_labels(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (coef[0] + x @ coef[1:] >= 0).astype(np.int8)


def _tune_logistic(fitter, train: Dataset, test: Dataset, grid: tuple,
                   solver: Optional[SolverConfig]):
    """Fit along ``grid`` with warm starts and keep the lambda with the smallest ``s_hat``."""
    best = None
    init = None
    for lam in grid:
        c = fitter(train, lam, solver, init)
        init = c.values
        z = _logistic_labels(c.values, test.features)
        s = surrogate_score(z, test)
        if best is None or s < best[1]:
            best = (lam, s, c, z)
    return best


def compare_methods(train: Dataset, test: Dataset, config: EmConfig,
                    grid: Optional[Sequence[float]] = None,
                    methods: Sequence[str] = ("em", "em-sparse", "majority"),
                    classifiers: Optional[Mapping[str, Callable[[np.ndarray], np.ndarray]]] = None,
                    executor: Optional[Executor] = None) -> SelectionReport:
    """Score several methods on ``test`` and flag the minimizers of ``s_hat`` and ``r_hat``.

    Methods: ``em`` (MAP-EM at lambda 0), ``em-sparse`` (MAP-EM at the
    ``s_hat``-selected lambda), ``majority`` and ``oracle`` (L1 logistic
    regression on majority-vote or true training labels, lambda chosen by
    ``s_hat``).  ``classifiers`` adds fixed rules mapping test features to
    labels.  The returned report carries the ``em-sparse`` grid when that
    method is included.  Every tied minimizer is flagged.
    """
    known = {"em", "em-sparse", "majority", "oracle"}
    unknown = [m for m in methods if m not in known]
    if unknown:
        raise ValueError(f"unknown method(s): {', '.join(unknown)}")
    if not methods and not classifiers:
        raise ValueError("no methods to compare")
    if grid is None:
        grid = default_grid(train, solver=config.solver)
    grid = _check_grid(grid)
    init = majority_init(train, config.solver)
    has_r = test.has_labels
    rows = []
    report = None

    def em_row(name, res: FitResult, lam):
        z = classify(res.params, test.features)
        return MethodScore(name, lam, surrogate_score(z, test),
                           empirical_risk(z, test.true_labels) if has_r else None,
                           res.params.nnz_gamma(), res.params.nnz_beta(), res.converged)

    for name in methods:
        if name == "em":
            res = fit_map_em(train, replace(config, lam=0.0), init, (), executor)
            rows.append(em_row(name, res, 0.0))
        elif name == "em-sparse":
            report = select_lambda(train, test, grid, config, init, executor)
            rows.append(em_row(name, report.chosen_fit, report.chosen_lambda))
        else:
            fitter = majority_logistic if name == "majority" else oracle_logistic
            lam, s, c, z = _tune_logistic(fitter, train, test, grid, config.solver)
            rows.append(MethodScore(name, lam, s,
                                    empirical_risk(z, test.true_labels) if has_r else None,
                                    None, int(np.count_nonzero(c.values[1:])), c.converged))
    for name, rule in (classifiers or {}).items():
        z = _labels(rule(test.features), test.n)
        rows.append(MethodScore(name, None, surrogate_score(z, test),
                                empirical_risk(z, test.true_labels) if has_r else None,
                                None, None, None))
    s_min = min(r.s_hat for r in rows)
    r_min = min(r.r_hat for r in rows) if has_r else None
    rows = tuple(replace(r, s_hat_min=r.s_hat == s_min,
                         r_hat_min=has_r and r.r_hat == r_min) for r in rows)
    if report is None:
        empty = np.zeros(0)
        report = SelectionReport((), empty, None, empty.astype(np.int64), empty.astype(np.int64),
                                 empty.astype(bool), empty.astype(bool), math.nan, "none",
                                 test.n)
    return replace(report, methods=rows)


# -- theory checks ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeviationCheck:
    """Sup-deviation of ``s_hat`` from ``(1 - 2 eps) R + eps`` over a threshold family.

    ``per_replication[j]`` holds one value per replication at ``n_prime[j]``;
    ``mean`` is their average.
    """

    n_prime: tuple
    mean: np.ndarray
    per_replication: np.ndarray
    eps_bar: float
    thresholds: np.ndarray
    population_risk: np.ndarray


def threshold_family(values: np.ndarray, size: int = 50) -> np.ndarray:
    """Cut points at evenly spaced interior quantiles of ``values``."""
    return np.quantile(values, (np.arange(size) + 0.5) / size)


def threshold_predictions(x: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """``len(thresholds) x n`` labels of the classifiers ``1{x > t}``."""
    return (x[None, :] > thresholds[:, None]).astype(np.int8)


def theory_check_deviation(generator: SimulationConfig, n_prime_list: Sequence[int],
                           replications: int, family_size: int = 50, feature: int = 0,
                           population_n: int = 400_000, seed: int = 0) -> DeviationCheck:
    """Monte-Carlo estimate of ``max_t |s_hat(t) - ((1 - 2 eps) R(t) + eps)|``.

    The family is ``1{x_feature > t}`` over ``family_size`` cut points.  ``R(t)``
    and ``eps`` (the mean expert error rate) are computed on an independent
    sample of ``population_n`` feature draws using the generator's exact
    label and error probabilities.  The generator is responsible for meeting
    the assumptions under which the deviation should vanish.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    if generator.features.csv is not None:
        raise ValueError("theory check needs a known feature generator")
    ns = tuple(int(n) for n in n_prime_list)
    if not ns or min(ns) < 1:
        raise ValueError("n_prime values must be positive")
    pop_rng = np.random.default_rng([seed, 1])
    xp = _draw_features(generator, population_n, pop_rng)
    p = truth_prob(generator, xp)
    eps = float(np.mean(expert_error_prob(generator, xp)))
    cuts = threshold_family(xp[:, feature], family_size)
    below = xp[None, :, feature] <= cuts[:, None]
    risk = np.mean(np.where(below, p[None, :], 1.0 - p[None, :]), axis=1)
    target = (1.0 - 2.0 * eps) * risk + eps
    seeds = np.random.SeedSequence([seed, 2]).spawn(len(ns) * replications)
    out = np.empty((len(ns), replications))
    for a, n in enumerate(ns):
        for b in range(replications):
            ss = seeds[a * replications + b]
            cfg = replace(generator, n=n, seed=int(ss.generate_state(1)[0]))
            ds = generate(cfg).dataset
            preds = threshold_predictions(ds.features[:, feature], cuts)
            s = np.array([surrogate_score(z, ds) for z in preds])
            out[a, b] = np.max(np.abs(s - target))
    return DeviationCheck(ns, out.mean(axis=1), out, eps, cuts, risk)

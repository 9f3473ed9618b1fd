"""Weighted L1-regularized binary logistic regression.

The solver maximizes

    sum_i w_i [y_i log mu_i + (1 - y_i) log(1 - mu_i)] - lam * sum_j pf_j |b_j|

with ``mu_i = logistic(x_i . b)``.  Setting ``pf_j = 0`` leaves a coefficient
(an intercept, an expert offset) unpenalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg.blas import dsyrk
from scipy.special import expit, log_expit

from . import _kernels


class SolverError(RuntimeError):
    """Raised when the solver cannot produce finite coefficients."""


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7
    max_outer: int = 100
    max_inner: int = 1000
    weight_clamp: float = 1e-10
    stall_tol: float = 1e-11

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be at least 1")
        if not self.weight_clamp > 0:
            raise ValueError("weight_clamp must be positive")
        if not self.stall_tol >= 0:
            raise ValueError("stall_tol must be non-negative")


@dataclass(frozen=True, eq=False)
class WeightedProblem:
    rows: np.ndarray
    weights: np.ndarray
    responses: np.ndarray
    penalty_factor: np.ndarray
    lam: float

    def __post_init__(self):
        X = np.asarray(self.rows, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("rows must be a 2-d design matrix")
        m, p = X.shape
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        y = np.asarray(self.responses, dtype=np.float64).ravel()
        pf = np.asarray(self.penalty_factor, dtype=np.float64).ravel()
        if m == 0 or p == 0:
            raise ValueError("empty problem")
        if w.shape != (m,) or y.shape != (m,) or pf.shape != (p,):
            raise ValueError("weights/responses/penalty_factor do not match the design")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be finite, non-negative and not all zero")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("responses must be binary")
        if not np.all(np.isfinite(pf)) or np.any(pf < 0):
            raise ValueError("penalty factors must be finite and non-negative")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be finite and non-negative")
        object.__setattr__(self, "rows", X)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "penalty_factor", pf)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_coef(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True, eq=False)
class Coefficients:
    values: np.ndarray
    converged: bool
    outer_iterations: int
    objective_trace: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = field(default=None, repr=False)

    def nonzero(self, mask: Optional[np.ndarray] = None) -> int:
        v = self.values if mask is None else self.values[mask]
        return int(np.count_nonzero(v))


def soft_threshold(z: float, t: float) -> float:
    if t < 0:
        raise ValueError("threshold must be non-negative")
    return float(np.sign(z) * max(abs(z) - t, 0.0))


def objective(problem: WeightedProblem, coef: np.ndarray) -> float:
    """Penalized weighted log-likelihood at ``coef`` (the quantity ``fit`` maximizes)."""
    eta = problem.rows @ coef
    y, w = problem.responses, problem.weights
    ll = np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta)))
    return float(ll - problem.lam * np.sum(problem.penalty_factor * np.abs(coef)))


def gradient(problem: WeightedProblem, coef: np.ndarray) -> np.ndarray:
    """Gradient of the unpenalized weighted log-likelihood."""
    mu = expit(problem.rows @ coef)
    return problem.rows.T @ (problem.weights * (problem.responses - mu))


def _compact(problem: WeightedProblem):
    """Drop zero-weight rows and merge Appendix-style row pairs.

    When the second half of the design repeats the first half with responses
    1 then 0, each pair is one row with weight ``w1 + w0`` and fractional
    response ``w1 / (w1 + w0)``; the objective is unchanged.
    """
    X, w, y = problem.rows, problem.weights, problem.responses
    m = X.shape[0]
    h = m // 2
    if (m % 2 == 0 and h > 0 and np.all(y[:h] == 1) and np.all(y[h:] == 0)
            and np.array_equal(X[:h], X[h:])):
        tot = w[:h] + w[h:]
        keep = tot > 0
        return X[:h][keep], tot[keep], w[:h][keep] / tot[keep]
    keep = w > 0
    return X[keep], w[keep], y[keep]


def fit(problem: WeightedProblem, config: Optional[SolverConfig] = None,
        init: Optional[np.ndarray] = None) -> Coefficients:
    """Solve a weighted L1 logistic problem.

    Outer iterations take a penalized Newton (IRLS) step built from the
    quadratic model at the current point; the step is computed by cyclic
    coordinate descent with soft-thresholding and accepted with backtracking,
    so the objective is monotone up to rounding.  ``converged`` is set when an outer
    iteration moves no coefficient by more than ``config.tol``.

    Parameters
    ----------
    problem : WeightedProblem
    config : SolverConfig, optional
    init : array of length ``problem.n_coef``, optional
        Warm start; zeros by default.
    """
    X, w, y = _compact(problem)
    return solve_collapsed(X, w, y, problem.penalty_factor, problem.lam,
                           config, init)


def _hessian(base, ncat, t, agg):
    """IRLS Hessian of a factored design from aggregated working weights."""
    kf = base.shape[1]
    p = ncat + kf
    H = np.zeros((p, p))
    if kf:
        # the transpose of a C-ordered array is Fortran-ordered: no copy
        upper = dsyrk(1.0, (base * np.sqrt(t)[:, None]).T, trans=0)
        H[ncat:, ncat:] = upper + np.triu(upper, 1).T
    if ncat:
        H[np.arange(ncat), np.arange(ncat)] = agg[:, :ncat].sum(axis=0)
        if kf:
            cross = agg[:, :ncat].T @ base
            H[:ncat, ncat:] = cross
            H[ncat:, :ncat] = cross.T
    return H


def _irls(base, group, tag, ncat, w, y, pf, lam, coef, config: SolverConfig, hessian=None):
    """Proximal-Newton (IRLS) ascent with a coordinate-descent inner solve.

    Each outer step maximizes a penalized quadratic model of the weighted
    log-likelihood at the current point and is accepted with backtracking,
    so the objective never decreases.  The model's curvature matrix is the
    IRLS Hessian, recomputed only when a step needs backtracking or stops
    contracting; a slightly stale one (or ``hessian`` from the caller) still
    leads to the same optimum.  Stops, on a step taken with a fresh Hessian,
    when no coefficient moves by more than ``tol`` or when the gain falls
    below ``stall_tol`` times the total weight (a divergent, separable problem
    whose objective has flattened out).

    Returns (coef, converged, iterations, trace, hessian).
    """
    thresh = lam * pf
    free = np.flatnonzero(thresh == 0).astype(np.int64)
    wsum = float(w.sum())
    args = (base, group, tag, ncat, w, y, pf, lam)
    obj = _kernels.penalized_loglik(*args, coef)
    trace = [obj]
    converged = False
    H = hessian
    refresh = H is None
    prev_change = np.inf
    it = 0
    while it < config.max_outer:
        it += 1
        t, u, agg, gcat = _kernels.working_weights(base, group, tag, ncat, w, y, coef,
                                                   config.weight_clamp)
        g = np.concatenate([gcat[:ncat], base.T @ u])
        if refresh:
            H = _hessian(base, ncat, t, agg)
        cand = _kernels._lasso_qp(H, g, coef, thresh, free, config.tol * 0.1, config.max_inner)
        step = cand - coef
        new_obj = _kernels.penalized_loglik(*args, cand)
        # losses below this are rounding, not evidence against the step
        floor = obj - 1e-13 * (wsum + abs(obj))
        s = 1.0
        halvings = 0
        while not new_obj >= floor and halvings < 40:
            s *= 0.5
            halvings += 1
            cand = coef + s * step
            new_obj = _kernels.penalized_loglik(*args, cand)
        if not new_obj >= floor:
            if not refresh:
                # retry from a fresh Hessian before giving up
                refresh = True
                continue
            # no ascent left at working precision
            trace.append(obj)
            converged = True
            break
        change = float(np.max(np.abs(cand - coef)))
        gain = new_obj - obj
        coef, obj = cand, new_obj
        trace.append(obj)
        if change < config.tol or gain <= config.stall_tol * (wsum + abs(obj)):
            if refresh:
                converged = True
                break
            # small steps under stale curvature prove nothing; confirm with a fresh one
            refresh = True
            continue
        refresh = halvings > 0 or change > 0.25 * prev_change
        prev_change = change
    return coef, converged, it, np.array(trace), H


def solve_collapsed(X: np.ndarray, w: np.ndarray, y: np.ndarray, penalty_factor: np.ndarray,
                    lam: float, config: Optional[SolverConfig] = None,
                    init: Optional[np.ndarray] = None) -> Coefficients:
    """``fit`` on an already-validated problem whose responses may be fractional.

    A row with weight ``w`` and response ``y`` in [0, 1] stands for the pair
    (weight ``w*y``, response 1) and (weight ``w*(1-y)``, response 0).
    """
    m = X.shape[0]
    return solve_factored(X, np.arange(m), np.zeros(m, dtype=np.int64), 0, w, y,
                          penalty_factor, lam, config, init)


def solve_factored(base: np.ndarray, group: np.ndarray, tag: np.ndarray, ncat: int,
                   w: np.ndarray, y: np.ndarray, penalty_factor: np.ndarray, lam: float,
                   config: Optional[SolverConfig] = None,
                   init: Optional[np.ndarray] = None,
                   hessian: Optional[np.ndarray] = None) -> Coefficients:
    """``solve_collapsed`` for a design given in factored form.

    Row ``r`` of the design is ``[onehot(tag[r], ncat), base[group[r]]]``, so
    coefficients are ``ncat`` category offsets followed by one per column of
    ``base``.  Many rows sharing a base row makes the Hessian cheap to form.
    ``hessian`` seeds the curvature matrix, typically the ``hessian`` of a
    previous solve of a nearby problem on the same design.
    """
    config = config or SolverConfig()
    p = ncat + base.shape[1]
    pf = np.ascontiguousarray(penalty_factor, dtype=np.float64)
    coef0 = np.zeros(p) if init is None else np.array(init, dtype=np.float64)
    if coef0.shape != (p,) or not np.all(np.isfinite(coef0)):
        raise ValueError("init must be a finite vector matching the design width")
    base = np.asarray(base, dtype=np.float64)
    # With free category offsets on every row, centering the shared columns is
    # an exact reparametrization and keeps coordinate descent well conditioned.
    shift = None
    if ncat > 0 and not np.any(pf[:ncat]):
        shift = base.mean(axis=0)
        base = base - shift
        coef0[:ncat] += shift @ coef0[ncat:]
    if hessian is not None and np.shape(hessian) != (p, p):
        hessian = None
    coef, converged, it, trace, H = _irls(
        np.ascontiguousarray(base), np.ascontiguousarray(group, dtype=np.int64),
        np.ascontiguousarray(tag, dtype=np.int64), int(ncat),
        np.ascontiguousarray(w, dtype=np.float64), np.ascontiguousarray(y, dtype=np.float64),
        pf, float(lam), coef0, config, hessian)
    if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(trace))):
        raise SolverError("non-finite objective during weighted L1 logistic fit")
    if shift is not None:
        coef[:ncat] -= shift @ coef[ncat:]
    return Coefficients(coef, bool(converged), int(it), trace, H)


def kkt_violation(problem: WeightedProblem, coefs) -> float:
    """Largest violation of the subgradient optimality conditions.

    For a penalized coefficient at zero the condition is ``|g_j| <= lam*pf_j``;
    otherwise ``g_j - lam*pf_j*sign(b_j) = 0``, where ``g`` is the gradient of
    the weighted log-likelihood.
    """
    b = np.asarray(getattr(coefs, "values", coefs), dtype=np.float64)
    g = gradient(problem, b)
    t = problem.lam * problem.penalty_factor
    pen = t > 0
    at_zero = pen & (b == 0)
    viol = np.abs(g - t * np.sign(b))
    viol[at_zero] = np.maximum(np.abs(g[at_zero]) - t[at_zero], 0.0)
    return float(viol.max())


def lambda_max(problem: WeightedProblem, config: Optional[SolverConfig] = None) -> float:
    """Smallest lambda at which every penalized coefficient is zero.

    Fits the unpenalized coefficients alone and takes the largest scaled
    gradient magnitude over penalized columns.
    """
    pf = problem.penalty_factor
    free = pf == 0
    b = np.zeros(problem.n_coef)
    if free.any():
        sub = WeightedProblem(problem.rows[:, free], problem.weights, problem.responses,
                              np.zeros(int(free.sum())), 0.0)
        b[free] = fit(sub, config).values
    g = np.abs(gradient(problem, b))
    pen = ~free
    if not pen.any():
        return 0.0
    return float(np.max(g[pen] / pf[pen]))

"""MAP-EM for the latent-label logistic model with L1 penalties.

Model, per unit ``i`` with features ``x_i``:

* ``Z_i ~ Bernoulli(mu_i)``, ``mu_i = logistic(beta_0 + beta . x_i)``;
* expert ``k`` reports ``Y_ik = Z_i`` with probability ``logistic(alpha_k + gamma . x_i)``,
  independently across experts given ``Z_i`` and ``x_i``.

``gamma`` and ``beta[1:]`` carry the L1 penalty; ``alpha`` and ``beta[0]`` do not.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import ABSENT, Dataset
from .wl1 import SolverConfig, SolverError, WeightedProblem, solve_factored


class EmError(RuntimeError):
    """Raised when no EM restart yields a finite objective."""


@dataclass(frozen=True, eq=False)
class CrowdParams:
    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "gamma", "beta"):
            a = np.array(getattr(self, name), dtype=np.float64).ravel()
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, a)
        if self.beta.shape[0] != self.gamma.shape[0] + 1:
            raise ValueError("beta must hold an intercept plus one coefficient per feature")

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    @property
    def k(self) -> int:
        return self.gamma.shape[0]

    def __neg__(self) -> "CrowdParams":
        # adding 0.0 keeps zero coefficients as +0.0
        return CrowdParams(-self.alpha + 0.0, -self.gamma + 0.0, -self.beta + 0.0)

    def penalty(self) -> float:
        return float(np.abs(self.gamma).sum() + np.abs(self.beta[1:]).sum())

    def nnz_gamma(self) -> int:
        return int(np.count_nonzero(self.gamma))

    def nnz_beta(self) -> int:
        return int(np.count_nonzero(self.beta[1:]))

    @classmethod
    def zeros(cls, d: int, k: int) -> "CrowdParams":
        return cls(np.zeros(d), np.zeros(k), np.zeros(k + 1))


@dataclass(frozen=True)
class EmConfig:
    lam: float = 0.0
    restarts: int = 30
    seed: int = 0
    em_tol: float = 1e-6
    max_em_iters: int = 200
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be at least 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    params: CrowdParams
    posterior: np.ndarray
    objective_trace: np.ndarray
    penalized_observed: float
    flipped: bool = False
    converged: bool = False
    restart_index: int = 0
    restart_objectives: tuple = ()


# -- model quantities --------------------------------------------------------------


def expected_agreement(z, y):
    """``1 + 2zy - z - y``: probability that a vote ``y`` matches a label with mean ``z``."""
    return 1 + 2 * np.asarray(z) * np.asarray(y) - np.asarray(z) - np.asarray(y)


def truth_logit(params: CrowdParams, features: np.ndarray) -> np.ndarray:
    return params.beta[0] + np.asarray(features, dtype=np.float64) @ params.beta[1:]


def expert_logit(params: CrowdParams, features: np.ndarray) -> np.ndarray:
    """``alpha_k + gamma . x_i`` as an n x d matrix."""
    return params.alpha[None, :] + (np.asarray(features, dtype=np.float64) @ params.gamma)[:, None]


def _check_dims(params: CrowdParams, ds: Dataset):
    if params.d != ds.d or params.k != ds.k:
        raise ValueError(
            f"parameters are for d={params.d}, k={params.k}; data has d={ds.d}, k={ds.k}")


def _vote_signs(ds: Dataset) -> np.ndarray:
    # +1 for a 1-vote, -1 for a 0-vote, 0 where absent; cached on the dataset
    cached = ds.__dict__.get("_vote_signs")
    if cached is None:
        cached = np.where(ds.available, 2.0 * ds.votes - 1.0, 0.0)
        cached.flags.writeable = False
        ds.__dict__["_vote_signs"] = cached
    return cached


def _observed_and_posterior(params: CrowdParams, ds: Dataset):
    """Per-unit log P(votes | x) and the posterior P(Z = 1 | votes, x), sharing the logits."""
    _check_dims(params, ds)
    a = expert_logit(params, ds.features)
    eta = truth_logit(params, ds.features)
    sa = _vote_signs(ds) * a
    m = ds.available
    given1 = np.where(m, log_expit(sa), 0.0).sum(axis=1)
    given0 = np.where(m, log_expit(-sa), 0.0).sum(axis=1)
    terms = np.logaddexp(log_expit(eta) + given1, log_expit(-eta) + given0)
    return terms, expit(eta + sa.sum(axis=1))


def observed_loglik_terms(params: CrowdParams, ds: Dataset) -> np.ndarray:
    """Per-unit log P(votes | x), marginalizing the latent label."""
    return _observed_and_posterior(params, ds)[0]


def _penalized(terms: np.ndarray, params: CrowdParams, lam: float) -> float:
    val = float(terms.sum()) - lam * params.penalty()
    if not np.isfinite(val):
        raise EmError("non-finite observed objective")
    return val


def penalized_observed(params: CrowdParams, ds: Dataset, lam: float) -> float:
    """Observed-data log-likelihood minus the L1 penalty: the MAP-EM target."""
    return _penalized(observed_loglik_terms(params, ds), params, lam)


def complete_log_posterior(params: CrowdParams, z, ds: Dataset, lam: float) -> float:
    """Complete-data log-likelihood at (soft) labels ``z`` minus the L1 penalty.

    The expression is linear in ``z``, so fractional labels give the expected
    complete-data objective used by the M-step.
    """
    _check_dims(params, ds)
    z = np.asarray(z, dtype=np.float64)
    a = expert_logit(params, ds.features)
    dik = expected_agreement(z[:, None], ds.votes)
    experts = np.where(ds.available, dik * log_expit(a) + (1 - dik) * log_expit(-a), 0.0)
    eta = truth_logit(params, ds.features)
    truth = z * log_expit(eta) + (1 - z) * log_expit(-eta)
    val = float(experts.sum() + truth.sum()) - lam * params.penalty()
    if not np.isfinite(val):
        raise EmError("non-finite complete-data objective")
    return val


def e_step(params: CrowdParams, ds: Dataset) -> np.ndarray:
    """Posterior mean of each latent label given votes and features, in log-odds form."""
    _check_dims(params, ds)
    a = expert_logit(params, ds.features)
    log_odds = truth_logit(params, ds.features) + (_vote_signs(ds) * a).sum(axis=1)
    return expit(log_odds)


# -- M-step ------------------------------------------------------------------------


def _vote_index(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Unit and expert index of every available vote, cached on the dataset."""
    cached = ds.__dict__.get("_vote_index")
    if cached is None:
        unit, expert = np.nonzero(ds.available)
        cached = (unit.astype(np.int64), expert.astype(np.int64))
        ds.__dict__["_vote_index"] = cached
    return cached


def _expert_design(ds: Dataset) -> np.ndarray:
    """One row per available vote: expert indicators then the unit's features."""
    unit, expert = _vote_index(ds)
    design = np.zeros((unit.size, ds.d + ds.k))
    design[np.arange(unit.size), expert] = 1.0
    design[:, ds.d:] = ds.features[unit]
    return design


def build_expert_problem(posterior, ds: Dataset, lam: float) -> WeightedProblem:
    """Expert-side subproblem: one row per available vote, doubled.

    The first copy of each row has weight ``d_ik`` and response 1, the second
    weight ``1 - d_ik`` and response 0.  Columns are one indicator per expert
    (unpenalized offsets ``alpha``) followed by the features (``gamma``).
    """
    unit, expert = _vote_index(ds)
    dik = expected_agreement(np.asarray(posterior)[unit], ds.votes[unit, expert])
    design = _expert_design(ds)
    m = design.shape[0]
    pf = np.r_[np.zeros(ds.d), np.ones(ds.k)]
    return WeightedProblem(np.vstack([design, design]), np.r_[dik, 1 - dik],
                           np.r_[np.ones(m), np.zeros(m)], pf, lam)


def build_truth_problem(posterior, ds: Dataset, lam: float) -> WeightedProblem:
    """Label-side subproblem: each unit twice, weights ``z_i`` (response 1) and ``1 - z_i``."""
    z = np.asarray(posterior, dtype=np.float64)
    design = np.hstack([np.ones((ds.n, 1)), ds.features])
    pf = np.r_[0.0, np.ones(ds.k)]
    return WeightedProblem(np.vstack([design, design]), np.r_[z, 1 - z],
                           np.r_[np.ones(ds.n), np.zeros(ds.n)], pf, lam)


def m_step(posterior, ds: Dataset, lam: float, solver: Optional[SolverConfig] = None,
           init: Optional[CrowdParams] = None, state: Optional[dict] = None) -> CrowdParams:
    """Maximize the expected penalized complete-data objective.

    The objective separates into the expert-side and label-side problems of
    ``build_expert_problem`` and ``build_truth_problem``, solved independently.
    Each is passed to the solver in collapsed form (one row per vote or unit,
    weight 1, response ``d_ik`` or ``z_i``), which has the same objective as the
    doubled layout, with the design factored into indicators and shared
    feature rows.  ``init`` warm-starts both.  ``state``, when given, carries
    the solvers' curvature matrices from one call to the next.
    """
    solver = solver or SolverConfig()
    state = {} if state is None else state
    z = np.asarray(posterior, dtype=np.float64)
    unit, expert = _vote_index(ds)
    dik = expected_agreement(z[unit], ds.votes[unit, expert])
    x = np.ascontiguousarray(ds.features)
    pf_ex = np.r_[np.zeros(ds.d), np.ones(ds.k)]
    pf_tr = np.r_[0.0, np.ones(ds.k)]
    ex_init = tr_init = None
    if init is not None:
        ex_init = np.r_[init.alpha, init.gamma]
        tr_init = init.beta
    ex = solve_factored(x, unit, expert, ds.d, np.ones(unit.size), dik, pf_ex, lam, solver,
                        ex_init, state.get("expert"))
    tr = solve_factored(x, np.arange(ds.n), np.zeros(ds.n, dtype=np.int64), 1, np.ones(ds.n), z,
                        pf_tr, lam, solver, tr_init, state.get("truth"))
    state["expert"], state["truth"] = ex.hessian, tr.hessian
    return CrowdParams(ex.values[: ds.d], ex.values[ds.d:], tr.values)


# -- prediction --------------------------------------------------------------------


def predict_proba(params: CrowdParams, x) -> np.ndarray | float:
    """P(Z = 1 | x) for one feature vector or a matrix of them."""
    x = np.asarray(x, dtype=np.float64)
    p = expit(truth_logit(params, np.atleast_2d(x)))
    return float(p[0]) if x.ndim == 1 else p


def classify(params: CrowdParams, features) -> np.ndarray:
    return (predict_proba(params, np.atleast_2d(features)) >= 0.5).astype(np.int8)


def predict_with_votes(params: CrowdParams, x, partial_votes: Mapping[int, int]) -> float:
    """P(Z = 1 | x, votes) for a new unit seen by any subset of the experts."""
    x = np.asarray(x, dtype=np.float64)
    log_odds = float(truth_logit(params, x[None, :])[0])
    if partial_votes:
        base = float(x @ params.gamma)
        for k, y in partial_votes.items():
            if not 0 <= k < params.d:
                raise ValueError(f"expert index {k} out of range")
            if y not in (0, 1):
                raise ValueError("votes must be 0 or 1")
            log_odds += (2 * y - 1) * (params.alpha[k] + base)
    return float(expit(log_odds))


def posterior_with_votes(params: CrowdParams, features, votes) -> np.ndarray:
    """``predict_with_votes`` for many units; ``votes`` is n x d with ``ABSENT`` cells."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    v = np.asarray(votes)
    if v.shape != (x.shape[0], params.d):
        raise ValueError(f"votes must be {x.shape[0]} x {params.d}")
    if not np.all((v == 0) | (v == 1) | (v == ABSENT)):
        raise ValueError("votes must be 0, 1 or absent")
    signs = np.where(v == ABSENT, 0.0, 2.0 * v - 1.0)
    return expit(truth_logit(params, x) + (signs * expert_logit(params, x)).sum(axis=1))


# -- sign disambiguation -----------------------------------------------------------


def disambiguate_sign(result: FitResult, ds: Dataset) -> FitResult:
    """Choose between theta and -theta by agreement with the majority vote.

    Both induce the same distribution of votes.  Ties keep theta.
    """
    from .baselines import majority_vote

    mv = majority_vote(ds).labels
    keep = int(np.sum(classify(result.params, ds.features) == mv))
    flip = int(np.sum(classify(-result.params, ds.features) == mv))
    if flip > keep:
        return replace(result, params=-result.params, posterior=1.0 - result.posterior,
                       flipped=not result.flipped)
    return result


# -- restarts ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _RestartOutcome:
    params: Optional[CrowdParams]
    trace: np.ndarray
    objective: float
    converged: bool


def run_em(ds: Dataset, start: CrowdParams, config: EmConfig) -> _RestartOutcome:
    """Alternate E- and M-steps from ``start``.

    Stops when the penalized observed objective changes by less than
    ``em_tol`` relative to its magnitude, or after ``max_em_iters``.
    """
    params = start
    terms, post = _observed_and_posterior(params, ds)
    prev = _penalized(terms, params, config.lam)
    trace = []
    converged = False
    state: dict = {}
    for _ in range(config.max_em_iters):
        # post is the E-step at the current params
        params = m_step(post, ds, config.lam, config.solver, init=params, state=state)
        terms, post = _observed_and_posterior(params, ds)
        obj = _penalized(terms, params, config.lam)
        trace.append(obj)
        if abs(obj - prev) <= config.em_tol * max(1.0, abs(prev)):
            converged = True
            break
        prev = obj
    return _RestartOutcome(params, np.array(trace), trace[-1], converged)


def _safe_run(ds, start, config):
    try:
        return run_em(ds, start, config)
    except (SolverError, EmError, FloatingPointError):
        return _RestartOutcome(None, np.empty(0), -np.inf, False)


def random_start(rng: np.random.Generator, d: int, k: int, beta_mean) -> CrowdParams:
    """Offsets and difficulty coefficients ~ N(0, 1); beta ~ N(beta_mean, 1)."""
    alpha = rng.normal(size=d)
    gamma = rng.normal(size=k)
    beta = np.asarray(beta_mean, dtype=np.float64) + rng.normal(size=k + 1)
    return CrowdParams(alpha, gamma, beta)


def restart_starts(config: EmConfig, d: int, k: int, beta_mean) -> list[CrowdParams]:
    beta_mean = np.asarray(beta_mean, dtype=np.float64).ravel()
    if beta_mean.shape != (k + 1,):
        raise ValueError(f"init_beta_mean must have length {k + 1}")
    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    return [random_start(np.random.default_rng(s), d, k, beta_mean) for s in seeds]


def fit_map_em(ds: Dataset, config: EmConfig, init_beta_mean,
               extra_starts: Sequence[CrowdParams] = (),
               executor: Optional[Executor] = None) -> FitResult:
    """Fit the model by MAP-EM from ``config.restarts`` random starts.

    Each restart draws its start from its own seed stream, so results do not
    depend on execution order.  ``extra_starts`` (e.g. a warm start from a
    neighbouring lambda) are run after the random ones.  The restart with the
    highest penalized observed log-likelihood wins, ties going to the lowest
    index, and its sign is then resolved against the majority vote.
    """
    starts = restart_starts(config, ds.d, ds.k, init_beta_mean) + list(extra_starts)
    if executor is None:
        outcomes = [_safe_run(ds, s, config) for s in starts]
    else:
        outcomes = list(executor.map(_safe_run, [ds] * len(starts), starts,
                                     [config] * len(starts)))
    objectives = tuple(o.objective for o in outcomes)
    best = int(np.argmax(objectives))
    win = outcomes[best]
    if win.params is None or not np.isfinite(win.objective):
        raise EmError("all EM restarts failed to produce a finite objective")
    result = FitResult(params=win.params, posterior=e_step(win.params, ds),
                       objective_trace=win.trace, penalized_observed=win.objective,
                       flipped=False, converged=win.converged, restart_index=best,
                       restart_objectives=objectives)
    return disambiguate_sign(result, ds)

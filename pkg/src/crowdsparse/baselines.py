"""Majority-vote imputation and logistic baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .wl1 import Coefficients, SolverConfig, WeightedProblem, fit, lambda_max


@dataclass(frozen=True, eq=False)
class MajorityLabels:
    labels: np.ndarray
    tie_count: int


def majority_vote(ds: Dataset) -> MajorityLabels:
    """Label 1 when at least half of a unit's available votes are 1.

    Exact ties resolve to 1 so downstream results stay reproducible.
    """
    ones = np.where(ds.available, ds.votes, 0).sum(axis=1)
    total = ds.available.sum(axis=1)
    labels = (2 * ones >= total).astype(np.int8)
    return MajorityLabels(labels, int(np.sum(2 * ones == total)))


def logistic_problem(features: np.ndarray, labels: np.ndarray, lam: float) -> WeightedProblem:
    """Unit-weight problem with an unpenalized intercept column."""
    X = np.hstack([np.ones((features.shape[0], 1)), features])
    pf = np.r_[0.0, np.ones(features.shape[1])]
    return WeightedProblem(X, np.ones(X.shape[0]), labels, pf, lam)


def majority_logistic(ds: Dataset, lam: float, solver: Optional[SolverConfig] = None,
                      init: Optional[np.ndarray] = None) -> Coefficients:
    """L1 logistic regression on majority-vote labels; coefficients are (intercept, slopes)."""
    return fit(logistic_problem(ds.features, majority_vote(ds).labels, lam), solver, init)


def oracle_logistic(ds: Dataset, lam: float, solver: Optional[SolverConfig] = None,
                    init: Optional[np.ndarray] = None) -> Coefficients:
    """L1 logistic regression on the true labels (simulation benchmark only)."""
    if ds.true_labels is None:
        raise ValueError("oracle fit needs true labels")
    return fit(logistic_problem(ds.features, ds.true_labels, lam), solver, init)


def majority_lambda_max(ds: Dataset, solver: Optional[SolverConfig] = None) -> float:
    return lambda_max(logistic_problem(ds.features, majority_vote(ds).labels, 0.0), solver)

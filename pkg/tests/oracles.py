"""Independent reference implementations used as test oracles.

None of these share code with the package: they are slow, direct
transcriptions of the definitions.
"""

import itertools
import math

import numpy as np


def newton_logreg(X, w, y, iters=100, tol=1e-13):
    """Unpenalized weighted logistic regression by damped Newton with line search."""
    X = np.asarray(X, float)
    w = np.asarray(w, float)
    y = np.asarray(y, float)
    b = np.zeros(X.shape[1])

    def loglik(b):
        eta = X @ b
        return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))

    for _ in range(iters):
        mu = 1.0 / (1.0 + np.exp(-(X @ b)))
        g = X.T @ (w * (y - mu))
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.solve(H, g)
        t, f0 = 1.0, loglik(b)
        while loglik(b + t * step) < f0 - 1e-12 and t > 1e-10:
            t /= 2
        b = b + t * step
        if np.max(np.abs(t * step)) < tol:
            break
    return b


def _sigmoid(t):
    return 1.0 / (1.0 + math.exp(-t))


def unit_joint(alpha, gamma, beta, x, votes, z):
    """P(Z = z, votes | x) for one unit, votes given as a list with None for absent."""
    pz = _sigmoid(beta[0] + float(np.dot(beta[1:], x)))
    p = pz if z == 1 else 1 - pz
    for k, y in enumerate(votes):
        if y is None:
            continue
        right = _sigmoid(alpha[k] + float(np.dot(gamma, x)))
        p *= right if y == z else 1 - right
    return p


def posterior_by_enumeration(alpha, gamma, beta, x, votes):
    p1 = unit_joint(alpha, gamma, beta, x, votes, 1)
    p0 = unit_joint(alpha, gamma, beta, x, votes, 0)
    return p1 / (p0 + p1)


def loglik_by_enumeration(alpha, gamma, beta, features, vote_rows):
    """Observed-data log-likelihood summed over every joint label configuration."""
    n = len(vote_rows)
    total = 0.0
    for zs in itertools.product((0, 1), repeat=n):
        p = 1.0
        for i, z in enumerate(zs):
            p *= unit_joint(alpha, gamma, beta, features[i], vote_rows[i], z)
        total += p
    return math.log(total)


def surrogate_by_loop(labels, vote_rows):
    """Average over units of the share of available votes differing from the label."""
    per_unit = []
    for z, row in zip(labels, vote_rows):
        seen = [y for y in row if y is not None]
        per_unit.append(sum(1 for y in seen if y != z) / len(seen))
    return sum(per_unit) / len(per_unit)


def vote_rows(votes, absent=-1):
    return [[None if v == absent else int(v) for v in row] for row in np.asarray(votes)]


def posteriors_by_joint_enumeration(alpha, gamma, beta, features, vote_rows):
    """P(Z_i = 1 | all votes, all features) by summing over every joint labelling."""
    n = len(vote_rows)
    num = [0.0] * n
    total = 0.0
    for zs in itertools.product((0, 1), repeat=n):
        p = 1.0
        for i, z in enumerate(zs):
            p *= unit_joint(alpha, gamma, beta, features[i], vote_rows[i], z)
        total += p
        for i, z in enumerate(zs):
            if z:
                num[i] += p
    return [v / total for v in num]

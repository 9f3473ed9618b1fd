"""Compiled inner loops for the weighted L1 logistic solver.

The outer proximal-Newton loop lives in ``wl1``; these kernels evaluate the
objective, aggregate IRLS weights and solve the penalized quadratic model.

Designs are passed in factored form: row ``r`` of the design is
``[onehot(tag[r], ncat), base[group[r]]]``.  Expert-side problems use one
category per expert and share each unit's feature row across its votes; a
plain dense design is ``ncat = 0`` with ``group = arange(m)``.

Responses may be fractional in [0, 1]; this is how row pairs that share a design
row (one with response 1, one with response 0) are solved in collapsed form.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _softplus(t):
    if t > 0.0:
        return t + np.log1p(np.exp(-t))
    return np.log1p(np.exp(t))


@njit(cache=True)
def _sigmoid(t):
    if t >= 0.0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return e / (1.0 + e)


@njit(cache=True)
def linear_predictor(base, group, tag, ncat, coef):
    shared = base @ np.ascontiguousarray(coef[ncat:])
    m = group.shape[0]
    eta = np.empty(m)
    for r in range(m):
        e = shared[group[r]]
        if ncat > 0:
            e += coef[tag[r]]
        eta[r] = e
    return eta


@njit(cache=True)
def penalized_loglik(base, group, tag, ncat, w, y, pf, lam, coef):
    eta = linear_predictor(base, group, tag, ncat, coef)
    total = 0.0
    for r in range(eta.shape[0]):
        total += w[r] * (y[r] * eta[r] - _softplus(eta[r]))
    pen = 0.0
    for j in range(coef.shape[0]):
        pen += pf[j] * abs(coef[j])
    return total - lam * pen


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _lasso_qp(H, g, coef, thresh, free, tol, max_sweeps):
    """Maximize ``g.s - s'Hs/2 - sum thresh_j |coef_j + s_j|`` over the step ``s``.

    Penalized coordinates are updated cyclically; the unpenalized block is
    re-solved exactly after every sweep.  Returns the new coefficients.
    """
    p = coef.shape[0]
    c = coef.copy()
    q = np.zeros(p)  # H @ (c - coef)
    nf = free.shape[0]
    pen = np.ones(p, dtype=np.bool_)
    for t in range(nf):
        pen[free[t]] = False
    Hff = np.empty((nf, nf))
    for a in range(nf):
        for b in range(nf):
            Hff[a, b] = H[free[a], free[b]]
    ridge = 0.0
    for a in range(nf):
        ridge += Hff[a, a]
    ridge = 1e-13 * ridge + 1e-300
    for a in range(nf):
        Hff[a, a] += ridge
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            if not pen[j]:
                continue
            h = H[j, j]
            if h <= 0.0:
                new = 0.0
            else:
                new = _soft(h * c[j] + g[j] - q[j], thresh[j]) / h
            delta = new - c[j]
            if delta != 0.0:
                c[j] = new
                for i in range(p):
                    q[i] += H[i, j] * delta
                if abs(delta) > biggest:
                    biggest = abs(delta)
        if nf > 0:
            rhs = np.empty(nf)
            for a in range(nf):
                j = free[a]
                # g_F - H_FP s_P, with q = H s holding the free block's share too
                rhs[a] = g[j] - q[j]
                for b in range(nf):
                    rhs[a] += H[j, free[b]] * (c[free[b]] - coef[free[b]])
            sol = np.linalg.solve(Hff, rhs)
            for a in range(nf):
                j = free[a]
                delta = coef[j] + sol[a] - c[j]
                if delta != 0.0:
                    c[j] += delta
                    for i in range(p):
                        q[i] += H[i, j] * delta
                    if abs(delta) > biggest:
                        biggest = abs(delta)
        if biggest < tol:
            break
    return c


@njit(cache=True)
def working_weights(base, group, tag, ncat, w, y, coef, wclamp):
    """Per-row IRLS weights aggregated onto base rows.

    Returns ``t`` (total weight per base row), ``agg`` (weight per base row
    and category), ``g`` (gradient with the shared block left as the per-base-row
    residual sums ``u``) and ``hcat`` (the diagonal category block).
    """
    nb = base.shape[0]
    eta = linear_predictor(base, group, tag, ncat, coef)
    t = np.zeros(nb)
    u = np.zeros(nb)
    agg = np.zeros((nb, max(ncat, 1)))
    gcat = np.zeros(max(ncat, 1))
    for r in range(group.shape[0]):
        mu = _sigmoid(eta[r])
        v = mu * (1.0 - mu)
        if v < wclamp:
            v = wclamp
        wr = w[r] * v
        res = w[r] * (y[r] - mu)
        i = group[r]
        t[i] += wr
        u[i] += res
        if ncat > 0:
            c = tag[r]
            agg[i, c] += wr
            gcat[c] += res
    return t, u, agg, gcat

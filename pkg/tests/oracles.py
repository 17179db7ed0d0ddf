"""Reference computations that share no code with the package.

``lp_phi`` solves the worst-case allocation as a linear program and
``grid_phi`` enumerates the K-grid of risk functions directly.
"""

import itertools

import numpy as np
from scipy.optimize import linprog


def lp_phi(p, lam, ups, ve, mu):
    """min E[f VE]/mu over lam <= f <= ups with E f = mu."""
    p, lam, ups, ve = (np.asarray(x, dtype=float) for x in (p, lam, ups, ve))
    res = linprog(c=p * ve / mu, A_eq=(p / mu)[None, :], b_eq=[1.0],
                  bounds=list(zip(lam, ups)), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def grid_phi(p, lam, ups, ve, mu, K=200):
    """Brute-force minimum over f_j in {lam_j + k/K (ups_j - lam_j)} with
    |E f - mu| <= max gap / K."""
    p, lam, ups, ve = (np.asarray(x, dtype=float) for x in (p, lam, ups, ve))
    d = p.size
    ks = np.arange(K + 1) / K
    axes = [lam[j] + ks * (ups[j] - lam[j]) for j in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    ef = sum(p[j] * mesh[j] for j in range(d))
    obj = sum(p[j] * ve[j] * mesh[j] for j in range(d)) / mu
    tol = np.max(ups - lam) / K
    ok = np.abs(ef - mu) <= tol
    return float(obj[ok].min())


def vertex_phi(p, lam, ups, ve, mu):
    """Exhaustive search over allocations that fill one point partially and
    every other point at an end of its interval (small d only)."""
    p, lam, ups, ve = (np.asarray(x, dtype=float) for x in (p, lam, ups, ve))
    d = p.size
    best = np.inf
    for free in range(d):
        for ends in itertools.product((0, 1), repeat=d - 1):
            f = np.empty(d)
            others = [j for j in range(d) if j != free]
            for j, e in zip(others, ends):
                f[j] = ups[j] if e else lam[j]
            rest = mu - np.sum(p[others] * f[others])
            if p[free] == 0:
                continue
            x = rest / p[free]
            if lam[free] - 1e-12 <= x <= ups[free] + 1e-12:
                f[free] = x
                best = min(best, float(np.sum(p * f * ve) / mu))
    return best

"""Exact discrete laws for gradient checks.

A law is a target marginal on a finite biomarker support plus, for each
trial, a joint table P_s(w, a, y) of shape (K, 2, 2).  Perturbing along a
bounded mean-zero score h multiplies each table by (1 + eps h).
"""

from dataclasses import dataclass

import numpy as np

from partialbridge.bridge import population_bridge, population_phi


@dataclass
class DiscreteLaw:
    w: np.ndarray
    p_star: np.ndarray
    tables: list

    @classmethod
    def from_components(cls, w, p_star, trials):
        tables = []
        for t in trials:
            P = np.zeros((w.size, 2, 2))
            for a in (0, 1):
                pa = t["g"] if a else 1 - t["g"]
                m = t["m1"] if a else t["m0"]
                P[:, a, 1] = t["p_w"] * pa * m
                P[:, a, 0] = t["p_w"] * pa * (1 - m)
            tables.append(P)
        return cls(np.asarray(w, float), np.asarray(p_star, float), tables)

    def components(self):
        out = []
        for P in self.tables:
            pw = P.sum(axis=(1, 2))
            out.append({
                "p_w": pw,
                "g": P[:, 1, :].sum(axis=1) / pw,
                "m0": P[:, 0, 1] / P[:, 0, :].sum(axis=1),
                "m1": P[:, 1, 1] / P[:, 1, :].sum(axis=1),
            })
        return out

    def perturbed(self, eps, h_star, h_tables):
        return DiscreteLaw(self.w, self.p_star * (1 + eps * h_star),
                           [P * (1 + eps * h) for P, h in zip(self.tables, h_tables)])

    def engine(self, bounds):
        return population_bridge(self.p_star, self.w, self.components(), bounds)

    def phi(self, bounds, mu, monotone=False):
        spec = bounds.spec
        comps = self.components()
        w = self.w
        M0 = [c["m0"] for c in comps]
        M1 = [c["m1"] for c in comps]
        S = len(comps)
        lam = spec.ell[0](w) + sum(spec.ell[s + 1](w) * M0[s] for s in range(S))
        ups = spec.u[0](w) + sum(spec.u[s + 1](w) * M0[s] for s in range(S))
        num = spec.v[0](w) * spec.d1(w) + sum(spec.v[s + 1](w) * M1[s] for s in range(S))
        den = spec.v[0](w) * spec.d0(w) + sum(spec.v[s + 1](w) * M0[s] for s in range(S))
        return population_phi(self.p_star, lam, ups, 1 - num / den, mu, keys=w if monotone else None)


def random_scores(law, rng):
    """Bounded scores centred under each component law."""
    h_star = rng.uniform(-1, 1, law.w.size)
    h_star -= np.sum(law.p_star * h_star)
    hs = []
    for P in law.tables:
        h = rng.uniform(-1, 1, P.shape)
        hs.append(h - np.sum(P * h))
    return h_star, hs


def pathwise(law, gradients, h_star, hs):
    """Sum over sources of E_s[grad_s h_s] with gradients from the engine."""
    total = np.sum(law.p_star * gradients[0] * h_star)
    for P, g, h in zip(law.tables, gradients[1:], hs):
        total += np.sum(P.ravel() * g * h.ravel())
    return float(total)


def central_difference(law, bounds, mu, h_star, hs, step=1e-4, monotone=False):
    up = law.perturbed(step, h_star, hs).phi(bounds, mu, monotone).phi
    down = law.perturbed(-step, h_star, hs).phi(bounds, mu, monotone).phi
    return (up - down) / (2 * step)


def one_sided(law, bounds, mu, h_star, hs, step=1e-4, monotone=False):
    base = law.phi(bounds, mu, monotone).phi
    fwd = (law.perturbed(step, h_star, hs).phi(bounds, mu, monotone).phi - base) / step
    bwd = (base - law.perturbed(-step, h_star, hs).phi(bounds, mu, monotone).phi) / step
    return fwd, bwd


def random_law(rng, K=4, S=2):
    w = np.sort(rng.uniform(0, 1, K))
    while np.unique(w).size < K:
        w = np.sort(rng.uniform(0, 1, K))
    trials = [dict(p_w=rng.dirichlet(np.ones(K)), g=rng.uniform(0.3, 0.7, K),
                   m0=rng.uniform(0.2, 0.6, K), m1=rng.uniform(0.05, 0.3, K)) for _ in range(S)]
    return DiscreteLaw.from_components(w, rng.dirichlet(np.ones(K)), trials)

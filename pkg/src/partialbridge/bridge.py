"""Worst-case risk allocation, hybrid TMLE/one-step estimation and inference.

Everything downstream of the nuisance fits works on a flat set of weighted
points: the target-sample biomarkers followed by the observed records of each
trial.  For a fixed allocation ``beta`` (one value per point) both corrected
estimators are affine in ``beta``::

    omega_hat(beta) = sum_j mass_j * (om_a[j] + om_b[j] * beta[j])
    gamma_hat(beta) = sum_j mass_j * (ga_a[j] + ga_b[j] * beta[j])

where for target points ``om_a + om_b * beta`` is the worst-case risk UR and
for trial points it is the (IPCW-weighted) gradient of omega.  The threshold
search, the interpolation step and the gradients are all read off these four
arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .data import MultiTrialData, ValidatedBounds, validate_bounds
from .errors import (
    B5NotDeclared,
    BridgeError,
    EstimationError,
    InfeasibleMu,
    OrderViolation,
    ZeroDenominator,
    ZeroOmega,
)
from .nuisance import TrialNuisance, irls_logistic

INTERIOR = "interior"
MU_TOO_BIG = "mu_too_big"
MU_TOO_SMALL = "mu_too_small"


class FluctuationDivergence(UserWarning):
    """The targeting regression did not converge; the update was skipped."""


# --- evaluable curves -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class VeMinusCurve:
    """``VE_-(w) = 1 - [v0 d1 + sum v_s m_s(1,w)] / [v0 d0 + sum v_s m_s(0,w)]``.

    Values below ``-floor`` are raised to it.
    """

    nuisances: tuple
    bounds: ValidatedBounds

    def parts(self, w):
        spec = self.bounds.spec
        w = np.asarray(w, dtype=float)
        num = spec.v[0](w) * spec.d1(w)
        den = spec.v[0](w) * spec.d0(w)
        for s, nu in enumerate(self.nuisances, start=1):
            vs = spec.v[s](w)
            num = num + vs * nu.m1(w)
            den = den + vs * nu.m0(w)
        return num, den

    def __call__(self, w):
        num, den = self.parts(w)
        bad = ~(den > 0)
        if np.any(bad):
            w0 = float(np.asarray(w, dtype=float).ravel()[np.argmax(bad.ravel())])
            raise ZeroDenominator(f"VE_- denominator is not positive at w={w0:.6g}", w=w0)
        return np.maximum(1.0 - num / den, self.bounds.spec.ve_floor)


def ve_minus(nuisances, bounds: ValidatedBounds) -> VeMinusCurve:
    return VeMinusCurve(tuple(nuisances), bounds)


@dataclass(frozen=True, eq=False)
class RiskEnvelope:
    """Pointwise bounds ``lower(w) <= E_star[Y | A=0, w] <= upper(w)``."""

    nuisances: tuple
    bounds: ValidatedBounds

    def lower(self, w):
        spec = self.bounds.spec
        out = spec.ell[0](w)
        for s, nu in enumerate(self.nuisances, start=1):
            out = out + spec.ell[s](w) * nu.m0(w)
        return out

    def upper(self, w):
        spec = self.bounds.spec
        out = spec.u[0](w)
        for s, nu in enumerate(self.nuisances, start=1):
            out = out + spec.u[s](w) * nu.m0(w)
        return out

    def check(self, w):
        w = np.asarray(w, dtype=float)
        gap = self.upper(w) - self.lower(w)
        bad = gap < self.bounds.spec.delta_min
        if np.any(bad):
            w0 = float(w[np.argmax(bad)])
            raise OrderViolation(
                f"upper minus lower risk bound is below delta_min={self.bounds.spec.delta_min:g} at w={w0:.6g}",
                w=w0,
            )
        return self


def risk_envelope(nuisances, bounds: ValidatedBounds, check_at=None) -> RiskEnvelope:
    env = RiskEnvelope(tuple(nuisances), bounds)
    if check_at is not None:
        env.check(check_at)
    return env


# --- records and results --------------------------------------------------

@dataclass(frozen=True)
class WorstCaseAllocation:
    """Solved allocation.  ``beta`` holds one value per engine point.

    ``theta`` is a threshold on VE_- (or on w for the monotone variant; then
    ``direction`` is set).  Infinite thresholds mark the boundary cases.
    """

    theta: float
    eta: float
    case: str
    beta: np.ndarray = field(repr=False)
    omega0: float = 0.0
    omega1: float = 0.0
    multiplier: float = float("nan")
    direction: str | None = None

    def beta_at(self, key):
        """Evaluate the allocation at new threshold-scale values ``key``."""
        key = np.asarray(key, dtype=float)
        if self.direction == "decreasing":
            key = -key
        theta = -self.theta if self.direction == "decreasing" else self.theta
        return (key < theta) + self.eta * (key == theta)


@dataclass(frozen=True)
class BridgeEstimate:
    mu: float
    phi_hat: float
    omega_hat: float
    gamma_hat: float
    allocation: WorstCaseAllocation
    gradients: tuple = field(repr=False)
    sigma2: tuple = ()
    sigma_n: float = 0.0
    lcb: float = 0.0
    z: float = 1.64
    n_min: int = 1
    score_residual: float = 0.0
    plausible: bool = True
    v: tuple = ()

    @property
    def case(self):
        return self.allocation.case

    @property
    def theta_hat(self):
        return self.allocation.theta

    @property
    def eta_hat(self):
        return self.allocation.eta

    @property
    def sigma2_n(self):
        return self.sigma_n ** 2

    @property
    def omega_gap(self):
        return abs(self.omega_hat - self.mu)

    def row(self):
        return {
            "mu": self.mu,
            "phi_hat": self.phi_hat,
            "sigma_n": self.sigma_n,
            "lcb": self.lcb,
            "case": self.case,
            "theta_hat": format_extended(self.theta_hat),
            "omega_hat": self.omega_hat,
            "gamma_hat": self.gamma_hat,
            "score_residual": self.score_residual,
        }


def format_extended(x):
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    return x


def lower_confidence_bound(phi_hat, sigma_n, n_min, z=1.64) -> float:
    return phi_hat - z * sigma_n / math.sqrt(n_min)


# --- threshold scan -------------------------------------------------------

def scan_threshold(keys, const_total, slope_mass, mu):
    """Solve ``theta = sup{t : omega(1{key < t}) <= mu}`` exactly.

    ``omega`` as a function of the threshold is a step function that jumps at
    the distinct key values; it need not be monotone.  Returns
    ``(theta, eta, k, prefix, group_values)`` where ``prefix[k]`` is omega
    with every key group below index ``k`` switched on.
    """
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    values, starts = np.unique(sorted_keys, return_index=True)
    jumps = np.add.reduceat(slope_mass[order], starts) if keys.size else np.empty(0)
    prefix = const_total + np.concatenate([[0.0], np.cumsum(jumps)])
    n_groups = values.size
    if prefix[n_groups] <= mu:
        return math.inf, 0.0, n_groups, prefix, values
    ok = np.flatnonzero(prefix[:n_groups] <= mu)
    if ok.size == 0:
        return -math.inf, 0.0, -1, prefix, values
    k = int(ok[-1])
    a, b = prefix[k], jumps[k]
    eta = 0.0 if b == 0 else float(np.clip((mu - a) / b, 0.0, 1.0))
    return float(values[k]), eta, k, prefix, values


# --- the estimation engine ------------------------------------------------

@dataclass(frozen=True, eq=False)
class Bridge:
    """Fitted estimation context shared by every mu and every weight choice.

    Point arrays run over the target points followed by observed trial
    records.  ``M0``/``M1`` hold each trial's (fluctuated) regression at every
    point, ``G``/``R`` the own-trial propensity and ratio (unused at target
    points), ``ipcw`` the two-phase weight, ``mass`` the empirical measure.
    """

    bounds: ValidatedBounds
    w: np.ndarray
    source: np.ndarray
    a: np.ndarray
    y: np.ndarray
    mass: np.ndarray
    ipcw: np.ndarray
    M0: np.ndarray
    M1: np.ndarray
    G: np.ndarray
    R: np.ndarray
    sizes: tuple
    record_pos: np.ndarray
    full_mass: tuple
    z: float = 1.64
    nuisances: tuple | None = None
    fluctuation: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_trials(self):
        return self.M0.shape[0]

    @property
    def n_min(self):
        return min(self.sizes)

    @property
    def is_target(self):
        return self.source == 0

    def with_v(self, v) -> "Bridge":
        spec = self.bounds.spec.with_v(v)
        vb = ValidatedBounds(spec, self.bounds.path, self.bounds.ratio)
        return replace(self, bounds=vb, _cache={})

    # -- pointwise quantities --------------------------------------------

    def _bound_values(self):
        if "bounds" not in self._cache:
            spec = self.bounds.spec
            S = self.n_trials
            ell = np.stack([spec.ell[s](self.w) for s in range(S + 1)])
            u = np.stack([spec.u[s](self.w) for s in range(S + 1)])
            self._cache["bounds"] = (ell, u)
        return self._cache["bounds"]

    def envelope(self):
        if "env" not in self._cache:
            ell, u = self._bound_values()
            lam = ell[0] + np.sum(ell[1:] * self.M0, axis=0)
            ups = u[0] + np.sum(u[1:] * self.M0, axis=0)
            gap = ups - lam
            bad = gap < self.bounds.spec.delta_min
            if np.any(bad):
                w0 = float(self.w[np.argmax(bad)])
                raise OrderViolation(
                    f"upper minus lower risk bound is below delta_min={self.bounds.spec.delta_min:g}"
                    f" at w={w0:.6g}", w=w0)
            self._cache["env"] = (lam, ups)
        return self._cache["env"]

    def ve(self):
        if "ve" not in self._cache:
            spec = self.bounds.spec
            v = np.stack([spec.v[s](self.w) for s in range(self.n_trials + 1)])
            num = v[0] * spec.d1(self.w) + np.sum(v[1:] * self.M1, axis=0)
            den = v[0] * spec.d0(self.w) + np.sum(v[1:] * self.M0, axis=0)
            bad = ~(den > 0)
            if np.any(bad):
                w0 = float(self.w[np.argmax(bad)])
                raise ZeroDenominator(f"VE_- denominator is not positive at w={w0:.6g}", w=w0)
            ve = np.maximum(1.0 - num / den, spec.ve_floor)
            self._cache["ve"] = (ve, den, v)
        return self._cache["ve"]

    def coefficients(self):
        """Per-point gradient-scale coefficients ``(om_a, om_b, ga_a, ga_b)``."""
        if "coef" in self._cache:
            return self._cache["coef"]
        lam, ups = self.envelope()
        ve, den, v = self.ve()
        ell, u = self._bound_values()
        tgt = self.is_target
        om_a = np.where(tgt, lam, 0.0)
        om_b = np.where(tgt, ups - lam, 0.0)
        ga_a = np.where(tgt, lam * ve, 0.0)
        ga_b = np.where(tgt, (ups - lam) * ve, 0.0)
        for s in range(1, self.n_trials + 1):
            idx = np.flatnonzero(self.source == s)
            if idx.size == 0:
                continue
            a = self.a[idx]
            g = self.G[idx]
            pa = np.where(a == 1, g, 1.0 - g)
            m_own = np.where(a == 1, self.M1[s - 1, idx], self.M0[s - 1, idx])
            res = self.y[idx] - m_own
            r = self.R[idx] * self.ipcw[idx]
            r0 = np.where(a == 0, res / pa, 0.0)
            # derivative of VE_- in m_s(0,w) is v_s (1 - VE_-) / den; in m_s(1,w) it is -v_s / den
            dve = v[s, idx] * np.where(a == 0, 1.0 - ve[idx], -1.0) * res / (pa * den[idx])
            ls, us = ell[s, idx], u[s, idx]
            om_a[idx] = r * r0 * ls
            om_b[idx] = r * r0 * (us - ls)
            ga_a[idx] = r * (r0 * ve[idx] * ls + lam[idx] * dve)
            ga_b[idx] = r * (r0 * ve[idx] * (us - ls) + (ups[idx] - lam[idx]) * dve)
        self._cache["coef"] = (om_a, om_b, ga_a, ga_b)
        return self._cache["coef"]

    # -- estimators -------------------------------------------------------

    def omega_hat(self, beta) -> float:
        om_a, om_b, _, _ = self.coefficients()
        beta = np.broadcast_to(np.asarray(beta, dtype=float), self.w.shape)
        return float(np.sum(self.mass * (om_a + om_b * beta)))

    def gamma_hat(self, beta) -> float:
        _, _, ga_a, ga_b = self.coefficients()
        beta = np.broadcast_to(np.asarray(beta, dtype=float), self.w.shape)
        return float(np.sum(self.mass * (ga_a + ga_b * beta)))

    def trial_score(self, beta) -> float:
        """``sum_s Q_s grad Omega_s^beta``: the pooled trial correction."""
        om_a, om_b, _, _ = self.coefficients()
        beta = np.broadcast_to(np.asarray(beta, dtype=float), self.w.shape)
        tr = ~self.is_target
        return float(np.sum((self.mass * (om_a + om_b * beta))[tr]))

    def keys(self, monotone=None):
        if monotone is None:
            return self.ve()[0]
        if monotone == "increasing":
            return self.w
        if monotone == "decreasing":
            return -self.w
        raise ValueError(f"monotone must be 'increasing' or 'decreasing', got {monotone!r}")

    def solve_allocation(self, mu, monotone=None) -> WorstCaseAllocation:
        om_a, om_b, _, _ = self.coefficients()
        keys = self.keys(monotone)
        const = float(np.sum(self.mass * om_a))
        theta, eta, k, prefix, values = scan_threshold(keys, const, self.mass * om_b, mu)
        omega0, omega1 = float(prefix[0]), float(prefix[-1])
        if math.isinf(theta):
            beta = np.full(self.w.shape, 1.0 if theta > 0 else 0.0)
        else:
            beta = (keys < theta) + eta * (keys == theta)
        if omega0 < mu < omega1:
            case = INTERIOR
        elif mu >= omega1:
            case = MU_TOO_BIG
        else:
            case = MU_TOO_SMALL
        mult = float("nan")
        if not math.isinf(theta):
            mult = theta if monotone is None else float(self.ve()[0][np.argmax(keys == theta)])
        if monotone == "decreasing":
            theta = -theta
        return WorstCaseAllocation(theta, eta, case, beta, omega0, omega1, mult, monotone)

    def estimate(self, mu, monotone=None, z=None) -> BridgeEstimate:
        z = self.z if z is None else z
        alloc = self.solve_allocation(mu, monotone)
        beta = alloc.beta
        om_a, om_b, ga_a, ga_b = self.coefficients()
        ve = self.ve()[0]
        omega = self.omega_hat(beta)
        gamma = self.gamma_hat(beta)
        if not omega > 0:
            raise ZeroOmega(f"omega_hat = {omega:.6g} is not positive at mu={mu:g}")
        phi = gamma / omega
        mult = alloc.multiplier if alloc.case == INTERIOR else gamma / omega

        grad_om = om_a + om_b * beta
        grad_ga = ga_a + ga_b * beta
        tgt = self.is_target
        # centre the target pieces on their plug-in means so they average to zero
        tmass = self.mass[tgt]
        ur = grad_om[tgt]
        urve = grad_ga[tgt]
        grad_om = grad_om.copy()
        grad_ga = grad_ga.copy()
        grad_om[tgt] = ur - np.sum(tmass * ur)
        grad_ga[tgt] = urve - np.sum(tmass * urve)
        grad_phi = (grad_ga - mult * grad_om) / omega

        gradients, sigma2 = self._per_source(grad_phi)
        sigma_n = math.sqrt(sum(self.n_min / n * s2 for n, s2 in zip(self.sizes, sigma2)))
        lcb = lower_confidence_bound(phi, sigma_n, self.n_min, z)
        ur_t = ur
        vacc = ur_t * (1.0 - ve[tgt])
        plausible = bool(phi <= 1.0 and np.all((vacc >= 0) & (vacc <= 1)))
        v = tuple(float(f(0.0)) if f.is_constant else f.to_json() for f in self.bounds.spec.v)
        return BridgeEstimate(
            mu=float(mu), phi_hat=phi, omega_hat=omega, gamma_hat=gamma, allocation=alloc,
            gradients=gradients, sigma2=tuple(sigma2), sigma_n=sigma_n, lcb=lcb, z=z,
            n_min=self.n_min, score_residual=abs(self.trial_score(beta)), plausible=plausible, v=v,
        )

    def _per_source(self, values):
        gradients, sigma2 = [], []
        for s in range(self.n_trials + 1):
            idx = np.flatnonzero(self.source == s)
            full = np.zeros(self.sizes[s])
            full[self.record_pos[idx]] = values[idx]
            base = self.full_mass[s]
            mean = float(np.sum(base * full))
            gradients.append(full)
            sigma2.append(float(np.sum(base * (full - mean) ** 2)))
        return tuple(gradients), sigma2

    def gradients(self, estimate: BridgeEstimate):
        return estimate.gradients

    def mu_feasible_range(self, z=None):
        """``(omega_hat(0), omega_hat(1), lower - z se, upper + z se)``."""
        z = self.z if z is None else z
        out = []
        for level in (0.0, 1.0):
            om_a, om_b, _, _ = self.coefficients()
            beta = np.full(self.w.shape, level)
            grad = om_a + om_b * beta
            tgt = self.is_target
            grad = grad.copy()
            grad[tgt] = grad[tgt] - np.sum(self.mass[tgt] * grad[tgt])
            _, s2 = self._per_source(grad)
            se = math.sqrt(sum(self.n_min / n * v for n, v in zip(self.sizes, s2)) / self.n_min)
            out.append((self.omega_hat(beta), se))
        (lo, se0), (hi, se1) = out
        return lo, hi, lo - z * se0, hi + z * se1

    def curve(self, mu_grid, monotone=None, z=None):
        rows = []
        for mu in mu_grid:
            try:
                rows.append(self.estimate(mu, monotone, z))
            except BridgeError as exc:
                rows.append(CurveError(float(mu), type(exc).__name__, str(exc)))
        return CurveResult(tuple(rows))


@dataclass(frozen=True)
class CurveError:
    mu: float
    error: str
    message: str

    def row(self):
        nan = float("nan")
        return {"mu": self.mu, "phi_hat": nan, "sigma_n": nan, "lcb": nan,
                "case": f"error:{self.error}", "theta_hat": nan, "omega_hat": nan,
                "gamma_hat": nan, "score_residual": nan}


CURVE_COLUMNS = ("mu", "phi_hat", "sigma_n", "lcb", "case", "theta_hat", "omega_hat",
                 "gamma_hat", "score_residual")


@dataclass(frozen=True)
class CurveResult:
    rows: tuple

    def frame(self):
        import pandas as pd

        return pd.DataFrame([r.row() for r in self.rows], columns=list(CURVE_COLUMNS))

    def pointwise_min_lcb(self):
        """Smallest mu-specific lower bound over the grid (pointwise, not simultaneous)."""
        vals = [r.lcb for r in self.rows if isinstance(r, BridgeEstimate)]
        return min(vals) if vals else float("nan")


def curve(bridge: Bridge, mu_grid, monotone=None) -> CurveResult:
    return bridge.curve(mu_grid, monotone)


# --- targeting step -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FluctuationResult:
    """Fitted targeting coefficients and the updated regressions.

    ``eps`` is ``(eps_u,)`` on the univariate path and ``(eps_l, eps_u)`` on
    the bivariate one.  Only the control-arm regression is updated.
    """

    eps: tuple
    path: str
    converged: bool
    nuisances: tuple
    score: float = 0.0


def clever_covariates(bounds: ValidatedBounds, s, nu: TrialNuisance, n_s, w, r=None, g=None):
    """Covariates ``ell_s r / (n_s (1-g))`` and ``u_s r / (n_s (1-g))`` at ``w``."""
    spec = bounds.spec
    r = nu.r(w) if r is None else r
    g = nu.g(w) if g is None else g
    base = r / (n_s * (1.0 - g))
    return spec.ell[s](w) * base, spec.u[s](w) * base


def _updated_m0(m0, eps, cov_l, cov_u):
    off = logit(m0)
    if len(eps) == 1:
        return expit(off + eps[0] * cov_u)
    return expit(off + eps[0] * cov_l + eps[1] * cov_u)


class _FluctuatedM0:
    """Updated control-arm regression, extrapolated flat beyond the trial's
    observed biomarker range like the initial fit."""

    def __init__(self, nu, bounds, s, n_s, eps, support):
        self.nu, self.bounds, self.s, self.n_s, self.eps = nu, bounds, s, n_s, eps
        self.support = support

    def clamp(self, w):
        return np.clip(np.asarray(w, dtype=float), *self.support)

    def __call__(self, w):
        w = self.clamp(w)
        cl, cu = clever_covariates(self.bounds, self.s, self.nu, self.n_s, w)
        return _updated_m0(self.nu.m0(w), self.eps, cl, cu)


def fit_fluctuation(y, offset, cov_l, cov_u, weights, path):
    """Targeting regression on pooled control records.  Returns ``(eps, converged)``."""
    X = cov_u[:, None] if path == "univariate" else np.column_stack([cov_l, cov_u])
    keep = np.any(X != 0, axis=1) & (weights > 0)
    dim = X.shape[1]
    if not keep.any():
        return (0.0,) * dim, True
    Xk = X[keep]
    active = np.any(Xk != 0, axis=0)
    coef = np.zeros(dim)
    fit = irls_logistic(Xk[:, active], y[keep], weights[keep], offset[keep], max_iter=100, tol=1e-12)
    if not fit.converged or not np.all(np.isfinite(fit.coef)):
        warnings.warn("targeting regression did not converge; using eps = 0", FluctuationDivergence,
                      stacklevel=2)
        return (0.0,) * dim, False
    coef[active] = fit.coef
    return tuple(float(c) for c in coef), True


def fluctuate(nuisances, bounds: ValidatedBounds, data: MultiTrialData, weights=None) -> FluctuationResult:
    """Fit the pooled targeting regression and update each control-arm regression."""
    ys, offs, cls, cus, wts = [], [], [], [], []
    for s, (nu, trial) in enumerate(zip(nuisances, data.trials), start=1):
        wt = np.ones(trial.n) if weights is None else np.asarray(weights[s - 1], dtype=float)
        ctrl = (trial.a == 0) & (wt > 0)
        w = trial.w[ctrl]
        cl, cu = clever_covariates(bounds, s, nu, trial.n, w)
        ys.append(trial.y[ctrl].astype(float))
        offs.append(logit(nu.m0(w)))
        cls.append(cl)
        cus.append(cu)
        wts.append(wt[ctrl])
    y, off, cl, cu, wt = (np.concatenate(x) for x in (ys, offs, cls, cus, wts))
    eps, ok = fit_fluctuation(y, off, cl, cu, wt, bounds.path)
    updated = []
    for s, (nu, trial) in enumerate(zip(nuisances, data.trials), start=1):
        seen = trial.w[trial.observed if weights is None else np.asarray(weights[s - 1]) > 0]
        support = (float(np.min(seen)), float(np.max(seen)))
        updated.append(replace(nu, m0=_FluctuatedM0(nu, bounds, s, trial.n, eps, support)))
    p = _updated_m0(np.clip(expit(off), 0, 1), eps, cl, cu)
    score = float(np.sum(wt * cu * (y - p)))
    return FluctuationResult(eps, bounds.path, ok, tuple(updated), score)


# --- assembling a Bridge from data ----------------------------------------

def build_bridge(data: MultiTrialData, bounds: ValidatedBounds, nuisances, weights=None, z=1.64,
                 targeted=True) -> Bridge:
    """Evaluate (optionally fluctuated) nuisances at every point and return the engine.

    ``weights`` gives per-trial IPCW factors (zero where the biomarker is
    missing); None means full data.
    """
    S = data.n_trials
    nuisances = tuple(nuisances)
    if len(nuisances) != S:
        raise ValueError("need one nuisance bundle per trial")
    wts = [np.ones(t.n) if weights is None else np.asarray(weights[i], dtype=float)
           for i, t in enumerate(data.trials)]

    w_parts = [data.star]
    src = [np.zeros(data.star.size, dtype=np.int64)]
    a_parts = [np.zeros(data.star.size, dtype=np.int64)]
    y_parts = [np.zeros(data.star.size, dtype=np.int64)]
    mass = [np.full(data.star.size, 1.0 / data.star.size)]
    ipcw = [np.ones(data.star.size)]
    pos = [np.arange(data.star.size)]
    for s, (t, wt) in enumerate(zip(data.trials, wts), start=1):
        keep = wt > 0
        w_parts.append(t.w[keep])
        src.append(np.full(int(keep.sum()), s, dtype=np.int64))
        a_parts.append(t.a[keep])
        y_parts.append(t.y[keep])
        mass.append(np.full(int(keep.sum()), 1.0 / t.n))
        ipcw.append(wt[keep])
        pos.append(np.flatnonzero(keep))
    w = np.concatenate(w_parts)
    source = np.concatenate(src)

    fluct = None
    if targeted:
        fluct = fluctuate(nuisances, bounds, data, None if weights is None else wts)
        nuisances = fluct.nuisances

    # evaluate the expensive ratio/propensity pieces once per trial
    M0 = np.empty((S, w.size))
    M1 = np.empty((S, w.size))
    G = np.zeros(w.size)
    R = np.zeros(w.size)
    for s, nu in enumerate(nuisances, start=1):
        base = nu.m0.nu if isinstance(nu.m0, _FluctuatedM0) else None
        m1 = nu.m1(w)
        if base is not None:
            # own-trial points lie inside the clamp range, so r and g there are unchanged
            wc = nu.m0.clamp(w)
            r_all = base.r(wc)
            g_all = base.g(wc)
            cl, cu = clever_covariates(bounds, s, base, data.trials[s - 1].n, wc, r_all, g_all)
            m0 = _updated_m0(base.m0(wc), nu.m0.eps, cl, cu)
        else:
            r_all, g_all, m0 = nu.r(w), nu.g(w), nu.m0(w)
        M0[s - 1], M1[s - 1] = m0, m1
        own = source == s
        G[own], R[own] = g_all[own], r_all[own]

    full_mass = tuple([np.full(data.star.size, 1.0 / data.star.size)]
                      + [np.full(t.n, 1.0 / t.n) for t in data.trials])
    return Bridge(
        bounds=bounds, w=w, source=source, a=np.concatenate(a_parts), y=np.concatenate(y_parts),
        mass=np.concatenate(mass), ipcw=np.concatenate(ipcw), M0=M0, M1=M1, G=G, R=R,
        sizes=data.sizes, record_pos=np.concatenate(pos), full_mass=full_mass, z=z,
        nuisances=nuisances, fluctuation=fluct,
    )


def fit_nuisances(data: MultiTrialData, config, weights=None):
    from .nuisance import fit_trial_nuisance

    out = []
    for i, t in enumerate(data.trials):
        wt = None if weights is None else weights[i]
        out.append(fit_trial_nuisance(data.star, t, config, wt, index=i + 1))
    return tuple(out)


def prepare(data: MultiTrialData, bounds_spec, config, weights=None, nuisances=None) -> Bridge:
    """Validate bounds, fit nuisances, fluctuate and return the estimation engine."""
    validated = validate_bounds(bounds_spec, data, eps_m=config.eps_m)
    if nuisances is None:
        nuisances = fit_nuisances(data, config, weights)
    return build_bridge(data, validated, nuisances, weights, config.z)


def phi_estimate(mu, bridge: Bridge, monotone=None) -> BridgeEstimate:
    return bridge.estimate(mu, monotone)


# --- adaptive weights -----------------------------------------------------

def simplex_grid(n_parts, resolution):
    """All weight vectors with entries in ``{0, 1/res, ..., 1}`` summing to one,
    plus the uniform vector."""
    def rec(k, remaining):
        if k == 1:
            yield (remaining,)
            return
        for i in range(remaining + 1):
            for rest in rec(k - 1, remaining - i):
                yield (i,) + rest
    grid = [tuple(i / resolution for i in combo) for combo in rec(n_parts, resolution)]
    uniform = tuple([1.0 / n_parts] * n_parts)
    if uniform not in grid:
        grid.append(uniform)
    return grid


@dataclass(frozen=True)
class AdaptiveResult:
    v: tuple
    estimate: BridgeEstimate
    sigma2_by_v: dict


def adaptive_weights(bridge: Bridge, mu, resolution=20, b5=False, monotone=None) -> AdaptiveResult:
    """Constant convex weights minimizing the estimated variance at ``mu``.

    Requires the declaration that conditional efficacy is common across
    trials and that the pseudo-trial gets no weight.
    """
    if not b5:
        raise B5NotDeclared("adaptive weights need the common-efficacy declaration (b5: true)")
    spec = bridge.bounds.spec
    if not spec.v[0].is_zero():
        raise B5NotDeclared("adaptive weights need zero pseudo-trial weight")
    S = bridge.n_trials
    if S == 1:
        est = bridge.with_v((0.0, 1.0)).estimate(mu, monotone)
        return AdaptiveResult((1.0,), est, {(1.0,): est.sigma2_n})
    uniform = tuple([1.0 / S] * S)
    results = {}
    for cand in simplex_grid(S, resolution):
        try:
            est = bridge.with_v((0.0,) + cand).estimate(mu, monotone)
        except EstimationError:
            continue
        if math.isfinite(est.sigma2_n):
            results[cand] = est
    if not results:
        raise EstimationError("no candidate weight vector produced an estimate")
    dist = {c: sum((x - y) ** 2 for x, y in zip(c, uniform)) for c in results}
    best = min(results, key=lambda c: (results[c].sigma2_n, dist[c]))
    return AdaptiveResult(best, results[best], {c: e.sigma2_n for c, e in results.items()})


# --- population mode ------------------------------------------------------

@dataclass(frozen=True)
class PopulationResult:
    phi: float
    theta: float
    eta: float
    omega: float
    gamma: float
    case: str
    beta: np.ndarray = field(repr=False)


def population_phi(p, lam, ups, ve, mu, keys=None) -> PopulationResult:
    """Exact bound parameter on a finite support with known components.

    ``keys`` replaces ``ve`` as the thresholding variable (the monotone
    variant passes the support points themselves).
    """
    p, lam, ups, ve = (np.asarray(x, dtype=float) for x in (p, lam, ups, ve))
    k = ve if keys is None else np.asarray(keys, dtype=float)
    const = float(np.sum(p * lam))
    theta, eta, _, prefix, _ = scan_threshold(k, const, p * (ups - lam), mu)
    omega0, omega1 = float(prefix[0]), float(prefix[-1])
    if math.isinf(theta):
        beta = np.full(p.shape, 1.0 if theta > 0 else 0.0)
    else:
        beta = (k < theta) + eta * (k == theta)
    ur = lam + (ups - lam) * beta
    omega = float(np.sum(p * ur))
    gamma = float(np.sum(p * ur * ve))
    if omega0 < mu < omega1:
        case = INTERIOR
        if keys is None:
            # theta - deficit/mu keeps the result exactly monotone in mu
            deficit = float(np.sum(p * ur * (theta - ve)))
            phi = theta - deficit / mu
        else:
            phi = gamma / omega
    else:
        case = MU_TOO_BIG if mu >= omega1 else MU_TOO_SMALL
        if omega == 0:
            raise InfeasibleMu(f"omega is zero at mu={mu:g}")
        phi = gamma / omega
    return PopulationResult(phi, theta, eta, omega, gamma, case, beta)


def population_bridge(p_star, w_support, trials, bounds: ValidatedBounds) -> Bridge:
    """Engine over an exact discrete law (for gradient checks).

    ``trials`` is a list of dicts with arrays ``p_w`` (marginal of W on the
    support), ``g`` (P(A=1|w)) and ``m0``/``m1``; the trial cells
    ``(w, a, y)`` carry their exact probabilities as mass.
    """
    K = w_support.size
    S = len(trials)
    w_parts, src, a_parts, y_parts, mass, cell_idx = [w_support], [np.zeros(K, int)], [np.zeros(K, int)], \
        [np.zeros(K, int)], [np.asarray(p_star, float)], [np.arange(K)]
    pos = [np.arange(K)]
    full_mass = [np.asarray(p_star, float)]
    sizes = [K]
    for s, t in enumerate(trials, start=1):
        cells_w, cells_a, cells_y, cells_p, idx = [], [], [], [], []
        for k in range(K):
            for a in (0, 1):
                pa = t["g"][k] if a else 1 - t["g"][k]
                m = t["m1"][k] if a else t["m0"][k]
                for y in (0, 1):
                    cells_w.append(w_support[k])
                    cells_a.append(a)
                    cells_y.append(y)
                    cells_p.append(t["p_w"][k] * pa * (m if y else 1 - m))
                    idx.append(k)
        n = len(cells_w)
        w_parts.append(np.array(cells_w))
        src.append(np.full(n, s))
        a_parts.append(np.array(cells_a))
        y_parts.append(np.array(cells_y))
        mass.append(np.array(cells_p))
        cell_idx.append(np.array(idx))
        pos.append(np.arange(n))
        full_mass.append(np.array(cells_p))
        sizes.append(n)
    w = np.concatenate(w_parts)
    source = np.concatenate(src)
    kidx = np.concatenate(cell_idx)
    M0 = np.stack([np.asarray(t["m0"], float)[kidx] for t in trials])
    M1 = np.stack([np.asarray(t["m1"], float)[kidx] for t in trials])
    G = np.zeros(w.size)
    R = np.zeros(w.size)
    for s, t in enumerate(trials, start=1):
        own = source == s
        G[own] = np.asarray(t["g"], float)[kidx[own]]
        R[own] = (np.asarray(p_star, float) / np.asarray(t["p_w"], float))[kidx[own]]
    return Bridge(
        bounds=bounds, w=w, source=source, a=np.concatenate(a_parts), y=np.concatenate(y_parts),
        mass=np.concatenate(mass), ipcw=np.ones(w.size), M0=M0, M1=M1, G=G, R=R,
        sizes=tuple(sizes), record_pos=np.concatenate(pos), full_mass=tuple(full_mass),
    )


# --- remainder diagnostics ------------------------------------------------

def rem1_direct(m0_fit, m0_true, g_fit, g_true):
    """First Rem1 display, conditional expectation summed over (a, y) cells.

    Arrays have shape (S, K): trial by support point.  The residual inside the
    conditional expectation uses the fitted regression.
    """
    total = 0.0
    for s in range(m0_fit.shape[0]):
        # only a = 0 cells carry the indicator
        p0_true, p0_fit = 1 - g_true[s], 1 - g_fit[s]
        cond = 0.0
        for y in (0, 1):
            py = m0_true[s] if y else 1 - m0_true[s]
            cond = cond + p0_true * py / p0_fit * (y - m0_fit[s])
        total = total + np.abs(m0_fit[s] - m0_true[s] + cond)
    return total


def rem1_product(m0_fit, m0_true, g_fit, g_true):
    """Product form ``sum_s |(1 - P0(A=0|w)/P'(A=0|w)) (m'_0 - m0_0)|``."""
    rho = (1 - g_true) / (1 - g_fit)
    return np.sum(np.abs((1 - rho) * (m0_fit - m0_true)), axis=0)


def _den(v, d0, m0):
    return v[0] * d0 + np.sum(v[1:] * m0, axis=0)


def _ve(v, d0, d1, m0, m1):
    return 1 - (v[0] * d1 + np.sum(v[1:] * m1, axis=0)) / _den(v, d0, m0)


def rem2_direct(fit, true, v, d0, d1):
    """``VE'_- - VE0_- + sum_s E0[D'_VE,s | w]`` with the cell sum done explicitly.

    ``fit``/``true`` are dicts of (S, K) arrays ``m0``, ``m1``, ``g``.
    """
    ve_fit = _ve(v, d0, d1, fit["m0"], fit["m1"])
    ve_true = _ve(v, d0, d1, true["m0"], true["m1"])
    den_fit = _den(v, d0, fit["m0"])
    corr = 0.0
    for s in range(fit["m0"].shape[0]):
        for a in (0, 1):
            p_true = true["g"][s] if a else 1 - true["g"][s]
            p_fit = fit["g"][s] if a else 1 - fit["g"][s]
            m_true = true["m1"][s] if a else true["m0"][s]
            m_fit = fit["m1"][s] if a else fit["m0"][s]
            coef = (1 - ve_fit) if a == 0 else -1.0
            for y in (0, 1):
                py = m_true if y else 1 - m_true
                corr = corr + p_true * py * v[s + 1] * coef * (y - m_fit) / (p_fit * den_fit)
    return ve_fit - ve_true + corr


def rem2_product(fit, true, v, d0, d1):
    """Product form of Rem2 consistent with the VE_- gradient used here."""
    ve_fit = _ve(v, d0, d1, fit["m0"], fit["m1"])
    ve_true = _ve(v, d0, d1, true["m0"], true["m1"])
    den_fit = _den(v, d0, fit["m0"])
    den_true = _den(v, d0, true["m0"])
    rho0 = (1 - true["g"]) / (1 - fit["g"])
    rho1 = true["g"] / fit["g"]
    inner = np.sum(v[1:] * ((1 - ve_fit) * (1 - rho0) * (fit["m0"] - true["m0"])
                            - (1 - rho1) * (fit["m1"] - true["m1"])), axis=0)
    return (ve_fit - ve_true) * (1 - den_true / den_fit) + inner / den_fit


def remainder_diagnostics(fit, true, v, d0, d1, p_star):
    """Target-marginal L2 norms of Rem1 and Rem2 (product forms).

    All arrays are evaluated on target points carrying probabilities ``p_star``.
    """
    r1 = rem1_product(fit["m0"], true["m0"], fit["g"], true["g"])
    r2 = rem2_product(fit, true, v, d0, d1)
    p = np.asarray(p_star, dtype=float)
    return float(np.sqrt(np.sum(p * r1 ** 2))), float(np.sqrt(np.sum(p * r2 ** 2)))

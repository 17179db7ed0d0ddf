"""Nuisance estimation for each completed trial.

Three functions are fitted per trial: the outcome regression ``m(a, w)``, the
propensity ``g(w) = P(A=1 | w)`` and the density ratio ``r(w)`` between the
target and trial biomarker distributions.  Logistic learners are fitted by
IRLS; a discrete cross-validation selector picks one learner from a library.
Every fit accepts optional nonnegative record weights (used by the two-phase
estimator) and treats unit weights exactly like no weights.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .errors import SingleArmTrial


MAX_ITER = 100
COEF_TOL = 1e-10


class DegenerateFit(UserWarning):
    """IRLS stopped without meeting the coefficient tolerance."""


class DegenerateBandwidth(UserWarning):
    """Kernel bandwidth fell back to a fixed fraction of the data range."""


# --- IRLS -----------------------------------------------------------------

@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    n_iter: int
    deviance: float


def _deviance(y, p, wt):
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = np.where(y > 0, np.log(p), 0.0) + np.where(y < 1, np.log1p(-p), 0.0)
    return float(-2.0 * np.sum(wt * ll))


def irls_logistic(X, y, weights=None, offset=None, max_iter=MAX_ITER, tol=COEF_TOL) -> LogisticFit:
    """Weighted logistic regression with an optional fixed offset.

    Newton-Raphson with step halving.  If the coefficient change never drops
    below ``tol`` the iterate with the smallest deviance is returned and
    ``converged`` is False.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    wt = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)

    beta = np.zeros(k)
    p = expit(off)
    dev = _deviance(y, p, wt)
    best = (dev, beta)
    for it in range(1, max_iter + 1):
        var = wt * p * (1.0 - p)
        hess = X.T @ (var[:, None] * X)
        grad = X.T @ (wt * (y - p))
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            p_new = expit(off + X @ cand)
            dev_new = _deviance(y, p_new, wt)
            if dev_new <= dev + 1e-12 * (1.0 + abs(dev)):
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta)) if k else 0.0
        beta, p, dev = cand, p_new, dev_new
        if dev < best[0]:
            best = (dev, beta)
        if change < tol:
            return LogisticFit(beta, True, it, dev)
    return LogisticFit(best[1], False, max_iter, best[0])


# --- learner library ------------------------------------------------------

def _rcs_basis(x, knots):
    """Restricted cubic spline terms (beyond the linear one)."""
    t = knots
    k = len(t)
    norm = (t[-1] - t[0]) ** 2
    cols = []
    for j in range(k - 2):
        term = (
            np.maximum(x - t[j], 0) ** 3
            - np.maximum(x - t[-2], 0) ** 3 * (t[-1] - t[j]) / (t[-1] - t[-2])
            + np.maximum(x - t[-1], 0) ** 3 * (t[-2] - t[j]) / (t[-1] - t[-2])
        )
        cols.append(term / norm)
    return np.column_stack(cols) if cols else np.empty((x.size, 0))


@dataclass(frozen=True, eq=False)
class Basis:
    """Design-matrix builder frozen on a training sample.

    ``w`` is clamped to the training range (flat extrapolation) and then
    standardized with the training mean and scale.
    """

    name: str
    with_treatment: bool
    lo: float
    hi: float
    center: float
    scale: float
    knots: tuple = ()

    @classmethod
    def fit(cls, name, w, with_treatment, weights=None):
        w = np.asarray(w, dtype=float)
        lo, hi = float(w.min()), float(w.max())
        center = float(np.mean(w))
        scale = float(np.std(w))
        if not scale > 0:
            scale = 1.0
        knots = ()
        if name == "spline":
            z = (w - center) / scale
            knots = tuple(np.unique(np.quantile(z, [0.05, 0.35, 0.65, 0.95])))
        return cls(name, with_treatment, lo, hi, center, scale, knots)

    def __call__(self, a, w):
        w = np.clip(np.asarray(w, dtype=float), self.lo, self.hi)
        z = (w - self.center) / self.scale
        ones = np.ones_like(z)
        a = np.broadcast_to(np.asarray(a, dtype=float), z.shape)
        cols = [ones]
        if self.name == "mean":
            return ones[:, None]
        if self.with_treatment:
            cols.append(a)
        cols.append(z)
        if self.name == "glm_interaction" and self.with_treatment:
            cols.append(a * z)
        elif self.name == "glm_quadratic":
            cols.append(z * z)
        elif self.name == "spline" and len(self.knots) >= 3:
            return np.column_stack(cols + [_rcs_basis(z, np.asarray(self.knots))])
        return np.column_stack(cols)


LEARNERS = ("mean", "glm", "glm_interaction", "glm_quadratic", "spline")


@dataclass(frozen=True, eq=False)
class LogisticModel:
    basis: Basis
    fit: LogisticFit

    def predict(self, a, w):
        return expit(self.basis(a, w) @ self.fit.coef)


def fit_learner(name, a, w, target, weights, with_treatment) -> LogisticModel:
    if name not in LEARNERS:
        raise ValueError(f"unknown learner {name!r}")
    basis = Basis.fit(name, w, with_treatment)
    fit = irls_logistic(basis(a, w), target, weights)
    if not fit.converged:
        warnings.warn(f"learner {name} did not converge; using best iterate", DegenerateFit, stacklevel=2)
    return LogisticModel(basis, fit)


def stratified_folds(strata, n_folds, rng) -> np.ndarray:
    """Assign each record to one of ``n_folds`` folds, balanced within strata."""
    strata = np.asarray(strata)
    fold = np.empty(strata.size, dtype=np.int64)
    for level in np.unique(strata):
        idx = np.flatnonzero(strata == level)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % n_folds
    return fold


def _neg_loglik(y, p, wt):
    return float(-np.sum(wt * (y * np.log(p) + (1 - y) * np.log1p(-p))))


def cv_select(library, a, w, target, weights=None, folds=5, seed=0, with_treatment=True,
              clip=1e-6):
    """Pick the learner with the lowest V-fold cross-validated log loss.

    Folds are stratified by ``target``.  Ties go to the earlier library entry.
    Returns ``(name, losses)`` where ``losses`` maps each candidate to its
    weighted mean validation loss (empty for a singleton library).
    """
    library = tuple(library)
    if len(library) == 1:
        return library[0], {}
    wt = np.ones(target.size) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(seed)
    fold = stratified_folds(target, folds, rng)
    losses = {}
    for name in library:
        total = 0.0
        for v in range(folds):
            train, test = fold != v, fold == v
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateFit)
                model = fit_learner(name, a[train], w[train], target[train], wt[train], with_treatment)
            p = np.clip(model.predict(a[test], w[test]), clip, 1 - clip)
            total += _neg_loglik(target[test], p, wt[test])
        losses[name] = total / float(np.sum(wt))
    best = min(library, key=lambda nm: (losses[nm], library.index(nm)))
    return best, losses


# --- fitted nuisances -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegressionFit:
    """Outcome regression ``m(a, w)`` clipped to ``[eps, 1 - eps]``."""

    learner: str
    model: LogisticModel
    eps: float
    cv_loss: dict = field(default_factory=dict)

    def __call__(self, a, w):
        return np.clip(self.model.predict(a, w), self.eps, 1 - self.eps)

    @property
    def converged(self):
        return self.model.fit.converged

    def to_json(self):
        b = self.model.basis
        return {
            "learner": self.learner,
            "coef": self.model.fit.coef.tolist(),
            "converged": self.converged,
            "range": [b.lo, b.hi],
            "center": b.center,
            "scale": b.scale,
            "knots": list(b.knots),
            "cv_loss": self.cv_loss,
        }


@dataclass(frozen=True, eq=False)
class PropensityFit:
    """Propensity ``g(w) = P(A=1 | w)`` clipped to ``[eps, 1 - eps]``."""

    learner: str
    model: LogisticModel
    eps: float
    cv_loss: dict = field(default_factory=dict)

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        return np.clip(self.model.predict(np.zeros_like(w), w), self.eps, 1 - self.eps)

    def to_json(self):
        b = self.model.basis
        return {"learner": self.learner, "coef": self.model.fit.coef.tolist(),
                "range": [b.lo, b.hi], "cv_loss": self.cv_loss}


def _observed(trial_w, weights):
    w = np.asarray(trial_w, dtype=float)
    wt = np.ones(w.size) if weights is None else np.asarray(weights, dtype=float)
    if np.any(wt < 0) or not np.sum(wt) > 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    keep = wt > 0
    return keep, wt


def fit_outcome_regression(w, a, y, library=LEARNERS, folds=5, weights=None, seed=0,
                           eps=1e-6) -> RegressionFit:
    keep, wt = _observed(w, weights)
    w, a, y, wt = np.asarray(w, float)[keep], np.asarray(a)[keep], np.asarray(y)[keep], wt[keep]
    if np.unique(a).size < 2:
        raise SingleArmTrial("outcome regression needs both treatment arms")
    name, losses = cv_select(library, a, w, y.astype(float), wt, folds, seed, True, eps)
    model = fit_learner(name, a, w, y.astype(float), wt, True)
    return RegressionFit(name, model, eps, losses)


def fit_propensity(w, a, library=("mean", "glm"), folds=5, weights=None, seed=0,
                   eps=0.01) -> PropensityFit:
    keep, wt = _observed(w, weights)
    w, a, wt = np.asarray(w, float)[keep], np.asarray(a)[keep], wt[keep]
    if np.unique(a).size < 2:
        raise SingleArmTrial("propensity needs both treatment arms")
    zeros = np.zeros_like(w)
    name, losses = cv_select(library, zeros, w, a.astype(float), wt, folds, seed, False, eps)
    model = fit_learner(name, zeros, w, a.astype(float), wt, False)
    return PropensityFit(name, model, eps, losses)


# --- density ratio --------------------------------------------------------

GRID_SIZE = 401
SQRT_2PI = np.sqrt(2.0 * np.pi)


def _linear_bin(x, wt, a, b, m):
    """Linear binning of weighted data onto ``m`` equally spaced points."""
    delta = (b - a) / (m - 1)
    pos = (x - a) / delta
    left = np.clip(np.floor(pos).astype(np.int64), 0, m - 2)
    frac = pos - left
    counts = np.zeros(m)
    np.add.at(counts, left, wt * (1.0 - frac))
    np.add.at(counts, left + 1, wt * frac)
    return counts


def _hermite(r, x):
    if r == 4:
        x2 = x * x
        return x2 * x2 - 6.0 * x2 + 3.0
    if r == 6:
        x2 = x * x
        return x2 * x2 * x2 - 15.0 * x2 * x2 + 45.0 * x2 - 15.0
    raise ValueError(r)


def _binned_psi(counts, delta, r, g):
    """Binned estimate of the density functional psi_r with bandwidth ``g``.

    ``counts`` are normalized to sum to one.
    """
    m = counts.size
    lags = np.arange(-(m - 1), m) * delta
    u = lags / g
    kern = _hermite(r, u) * np.exp(-0.5 * u * u) / (SQRT_2PI * g ** (r + 1))
    conv = np.convolve(counts, kern)[m - 1:2 * m - 1]
    return float(np.dot(counts, conv))


def plugin_bandwidth(x, weights=None) -> float:
    """Two-stage direct plug-in bandwidth for a Gaussian kernel.

    Uses normal-reference psi_8, binned estimates of psi_6 and psi_4, and the
    Kish effective sample size for weighted data.
    """
    x = np.asarray(x, dtype=float)
    wt = np.ones(x.size) if weights is None else np.asarray(weights, dtype=float)
    total = float(np.sum(wt))
    n = total * total / float(np.sum(wt * wt))
    mean = float(np.sum(wt * x) / total)
    sd = float(np.sqrt(np.sum(wt * (x - mean) ** 2) / total))
    order = np.argsort(x, kind="stable")
    cum = np.cumsum(wt[order]) / total
    q1 = x[order][np.searchsorted(cum, 0.25)]
    q3 = x[order][np.searchsorted(cum, 0.75)]
    iqr = (q3 - q1) / 1.349
    scale = min(sd, iqr) if iqr > 0 else sd
    span = float(x.max() - x.min())
    if not scale > 0 or not span > 0:
        warnings.warn("zero-variance sample; bandwidth set to a fixed fraction of the range",
                      DegenerateBandwidth, stacklevel=2)
        return 0.1 * span if span > 0 else 0.1
    z = (x - mean) / scale
    a, b = float(z.min()), float(z.max())
    counts = _linear_bin(z, wt / total, a, b, GRID_SIZE)
    delta = (b - a) / (GRID_SIZE - 1)
    g6 = (2.0 * np.sqrt(2.0) ** 9 / (7.0 * n)) ** (1.0 / 9.0)
    psi6 = _binned_psi(counts, delta, 6, g6)
    if not psi6 < 0:
        psi6 = -15.0 / (16.0 * np.sqrt(np.pi))
    g4 = (-3.0 * np.sqrt(2.0 / np.pi) / (psi6 * n)) ** (1.0 / 7.0)
    psi4 = _binned_psi(counts, delta, 4, g4)
    if not psi4 > 0:
        psi4 = 3.0 / (8.0 * np.sqrt(np.pi))
    h = (1.0 / (4.0 * np.pi)) ** 0.1 * (1.0 / (psi4 * n)) ** 0.2
    return float(scale * h)


def _kde(points, data, wt, h, chunk=1024):
    out = np.empty(points.size)
    norm = float(np.sum(wt)) * h * SQRT_2PI
    for start in range(0, points.size, chunk):
        u = (points[start:start + chunk, None] - data[None, :]) / h
        out[start:start + chunk] = np.exp(-0.5 * u * u) @ wt
    return out / norm


@dataclass(frozen=True, eq=False)
class RatioFit:
    """Estimated density ratio ``dP_star / dP_s`` as a function of ``w``.

    Kernel estimates are built on ``logit(w)`` when all values lie in (0, 1),
    where the Jacobian cancels in the ratio.  The raw ratio is clipped to
    ``clip`` and then divided by ``scale`` so its trial mean is exactly one.
    """

    star_z: np.ndarray
    trial_z: np.ndarray
    trial_wt: np.ndarray
    h_star: float
    h_trial: float
    unit_interval: bool
    lo: float
    hi: float
    clip: tuple
    scale: float = 1.0

    def _z(self, w):
        w = np.clip(np.asarray(w, dtype=float), self.lo, self.hi)
        return logit(w) if self.unit_interval else w

    def raw(self, w):
        z = np.atleast_1d(self._z(w))
        f_star = _kde(z, self.star_z, np.ones(self.star_z.size), self.h_star)
        f_trial = _kde(z, self.trial_z, self.trial_wt, self.h_trial)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = f_star / f_trial
        ratio = np.where(np.isfinite(ratio), ratio, self.clip[1])
        return np.clip(ratio, *self.clip)

    def __call__(self, w):
        return self.raw(w) / self.scale


def fit_density_ratio(star_w, trial_w, weights=None, clip=(1e-3, 1e3)) -> RatioFit:
    """Kernel density ratio with plug-in bandwidths, clipped and standardized."""
    star_w = np.asarray(star_w, dtype=float)
    keep, wt = _observed(trial_w, weights)
    trial_w = np.asarray(trial_w, dtype=float)[keep]
    wt = wt[keep]
    if star_w.size == 0 or trial_w.size == 0:
        raise ValueError("density ratio needs non-empty samples")
    both = np.concatenate([star_w, trial_w])
    unit = bool(np.all((both > 0) & (both < 1)))
    tz = logit if unit else (lambda v: v)
    sz, trz = tz(star_w), tz(trial_w)
    fit = RatioFit(
        star_z=sz,
        trial_z=trz,
        trial_wt=wt,
        h_star=plugin_bandwidth(sz),
        h_trial=plugin_bandwidth(trz, wt),
        unit_interval=unit,
        lo=float(both.min()),
        hi=float(both.max()),
        clip=(float(clip[0]), float(clip[1])),
    )
    raw = fit.raw(trial_w)
    scale = float(np.sum(wt * raw) / np.sum(wt))
    return RatioFit(**{**fit.__dict__, "scale": scale})


# --- per-trial bundle -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrialNuisance:
    """Evaluable nuisances for one trial.

    ``m0``/``m1`` give ``E[Y | A=a, w]``; ``g`` gives ``P(A=1 | w)``; ``r`` the
    density ratio.  ``outcome``/``propensity``/``ratio`` keep the fitted
    objects for audits and may be None for hand-built nuisances.
    """

    m0: object
    m1: object
    g: object
    r: object
    outcome: RegressionFit | None = None
    propensity: PropensityFit | None = None
    ratio: RatioFit | None = None

    def to_json(self):
        out = {}
        if self.outcome is not None:
            out["outcome"] = self.outcome.to_json()
        if self.propensity is not None:
            out["propensity"] = self.propensity.to_json()
        if self.ratio is not None:
            out["ratio"] = {"h_star": self.ratio.h_star, "h_trial": self.ratio.h_trial,
                            "scale": self.ratio.scale, "clip": list(self.ratio.clip)}
        return out


def fit_trial_nuisance(star_w, trial, config, weights=None, index=0) -> TrialNuisance:
    """Fit all three nuisances for one trial under an AnalysisConfig."""
    seed = np.random.SeedSequence([config.seed, index]).generate_state(2)
    reg = fit_outcome_regression(trial.w, trial.a, trial.y, config.outcome_library, config.folds,
                                 weights, int(seed[0]), config.eps_m)
    prop = fit_propensity(trial.w, trial.a, config.propensity_library, config.folds, weights,
                          int(seed[1]), config.eps_g)
    ratio = fit_density_ratio(star_w, trial.w, weights, config.ratio_clip)
    return TrialNuisance(
        m0=lambda w, f=reg: f(0, w),
        m1=lambda w, f=reg: f(1, w),
        g=prop,
        r=ratio,
        outcome=reg,
        propensity=prop,
        ratio=ratio,
    )


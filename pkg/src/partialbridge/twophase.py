"""Two-phase sampling: biomarker measured on a subsample of each trial.

Records with ``delta = 0`` keep their treatment and outcome but have no
biomarker.  Each observed record is reweighted by the inverse of its
observation probability ``pi(l, a, y)``; the weights enter the nuisance
fits, the targeting regression, every trial correction and every trial
gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from .bridge import Bridge, BridgeEstimate, build_bridge, fit_nuisances
from .data import AnalysisConfig, MultiTrialData, TrialSample, validate_bounds
from .errors import ConfigError, NoObservedControls
from .nuisance import irls_logistic

STANDARDIZE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CensoringFit:
    """Observation probabilities and standardized IPCW weights, one array per trial.

    ``pi`` is evaluated at every record; ``weights`` is ``delta / pi`` and
    sums to the trial size.  ``constants`` are the factors applied to the
    control-arm probabilities to achieve that.
    """

    pi: tuple
    weights: tuple
    constants: tuple
    models: tuple = ()

    def check(self, data: MultiTrialData):
        for t, wt in zip(data.trials, self.weights):
            if abs(np.sum(wt) - t.n) > STANDARDIZE_TOL * max(1, t.n):
                raise AssertionError(f"weights for trial {t.trial_id} sum to {np.sum(wt)} not {t.n}")
        return self


def _design(l):
    l = np.asarray(l, dtype=float)
    z = logit(l) if np.all((l > 0) & (l < 1)) else l
    return np.column_stack([np.ones(l.size), z])


def _fit_trial(trial: TrialSample, known=None):
    delta = trial.observed.astype(float)
    n = trial.n
    if np.all(delta == 1):
        return np.ones(n), np.ones(n), 1.0, None
    ctrl = trial.y == 0
    if ctrl.any() and not np.any(delta[ctrl] == 1):
        raise NoObservedControls(f"trial {trial.trial_id} has no controls with an observed biomarker")
    pi = np.ones(n)
    model = None
    if known is not None:
        if isinstance(known, str):
            if known != "nested_case_control":
                raise ConfigError(f"unknown design {known!r}", f"/censoring/known_pi/{trial.trial_id}")
            pi[ctrl] = np.mean(delta[ctrl])
        else:
            pi[ctrl] = float(known)
    elif trial.l is None or not np.all(np.isfinite(trial.l[ctrl])):
        pi[ctrl] = np.mean(delta[ctrl])
    else:
        X = _design(trial.l[ctrl])
        fit = irls_logistic(X, delta[ctrl])
        model = fit
        pi[ctrl] = 1.0 / (1.0 + np.exp(-(X @ fit.coef)))
    # cases are observed with certainty; rescale the control probabilities so
    # the weights sum to n exactly
    target = float(np.sum(ctrl))
    raw = float(np.sum(delta[ctrl] / pi[ctrl]))
    const = raw / target if target > 0 else 1.0
    pi[ctrl] = pi[ctrl] * const
    if np.any(pi > 1):
        warnings.warn(f"standardized observation probabilities exceed one in trial {trial.trial_id}",
                      stacklevel=3)
    return pi, delta / pi, const, model


def fit_censoring(data: MultiTrialData, known_pi=None) -> CensoringFit:
    """Fit ``P(Delta = 1 | l, a, y)`` per trial.

    Cases (``y = 1``) are always observed.  Among controls a logistic model in
    the auxiliary covariate ``l`` (logit scale when it lies in (0, 1)) is fit
    separately in each trial, which is the same as one model with a trial
    indicator interacted with ``l``.  ``known_pi`` maps trial ids to the
    known control observation probability, or to ``"nested_case_control"``
    for the realized sampling fraction.
    """
    pis, wts, consts, models = [], [], [], []
    for t in data.trials:
        known = None if known_pi is None else known_pi.get(str(t.trial_id), known_pi.get("*"))
        pi, weights, const, model = _fit_trial(t, known)
        pis.append(pi)
        wts.append(weights)
        consts.append(const)
        models.append(model)
    return CensoringFit(tuple(pis), tuple(wts), tuple(consts), tuple(models)).check(data)


def prepare_ipcw(data: MultiTrialData, bounds_spec, config: AnalysisConfig, censoring=None,
                 nuisances=None) -> Bridge:
    """Validate, fit weighted nuisances and fluctuation, and return the engine."""
    validated = validate_bounds(bounds_spec, data, eps_m=config.eps_m)
    if validated.path != "univariate":
        raise ConfigError("two-phase estimation needs ell_s to be a common multiple of u_s", "/bounds")
    if censoring is None:
        censoring = fit_censoring(data, config.known_pi)
    weights = censoring.weights
    if nuisances is None:
        nuisances = fit_nuisances(data, config, weights)
    return build_bridge(data, validated, nuisances, weights, config.z)


def ipcw_estimate(mu, data: MultiTrialData, bounds_spec, config: AnalysisConfig,
                  censoring=None, monotone=None) -> BridgeEstimate:
    bridge = prepare_ipcw(data, bounds_spec, config, censoring)
    return bridge.estimate(mu, monotone)


def nested_case_control_sample(trial: TrialSample, ratio=1, rng=None) -> TrialSample:
    """Observe every case and ``min(ratio * cases, controls)`` controls drawn
    without replacement; the biomarker is erased elsewhere."""
    rng = np.random.default_rng(rng)
    cases = np.flatnonzero(trial.y == 1)
    controls = np.flatnonzero(trial.y == 0)
    k = int(ratio * cases.size)
    if k > controls.size:
        if controls.size == 0:
            warnings.warn(f"trial {trial.trial_id} has no controls; sample is cases only", stacklevel=2)
        k = controls.size
    delta = np.zeros(trial.n, dtype=np.int64)
    delta[cases] = 1
    delta[rng.choice(controls, size=k, replace=False)] = 1
    return trial.with_delta(delta)

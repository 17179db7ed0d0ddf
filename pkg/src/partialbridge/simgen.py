"""Simulation design, true-value oracles and the Monte Carlo experiment runner.

Biomarker laws (Z standard normal)::

    target   W = expit(2 (Z - 1/2))
    trial 1  W = expit(Z - 2)
    trial 2  W = expit(5 (Z - 1))

Treatment is Bernoulli(1/2) in both trials.  Control risks are
``expit(-1 - w)`` (trial 1) and ``expit(-1)`` (trial 2); both trials share

    VE(w) = 1 - expit(-1 - w - 3 [0.3 + (w - 0.2)^+]) / expit(-1 - w)

and treated risk is ``(1 - VE(w))`` times control risk.  The target's own
control risk is taken to be the average of the two trial curves.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import integrate, optimize, stats
from scipy.special import expit, logit

from .bridge import adaptive_weights, build_bridge, fit_nuisances, population_phi
from .data import (STAR, AnalysisConfig, MultiTrialData, TrialSample, preset_bounds,
                   validate_bounds, PRESETS)
from .errors import BridgeError
from .twophase import fit_censoring, nested_case_control_sample

SIZES = {"smaller": (100, 2000, 2000), "larger": (200, 4000, 4000)}
KINK = 0.2
VARIANTS = ("fixed", "adaptive", "twophase", "twophase_known")


# --- the data-generating process ------------------------------------------

def w_from_z(population, z):
    z = np.asarray(z, dtype=float)
    if population == STAR:
        return expit(2.0 * (z - 0.5))
    if population == 1:
        return expit(z - 2.0)
    if population == 2:
        return expit(5.0 * (z - 1.0))
    raise ValueError(f"unknown population {population!r}")


def z_from_w(population, w):
    lw = logit(np.asarray(w, dtype=float))
    if population == STAR:
        return lw / 2.0 + 0.5
    if population == 1:
        return lw + 2.0
    if population == 2:
        return lw / 5.0 + 1.0
    raise ValueError(f"unknown population {population!r}")


def ve_true(w):
    w = np.asarray(w, dtype=float)
    return 1.0 - expit(-1.0 - w - 3.0 * (0.3 + np.maximum(w - KINK, 0.0))) / expit(-1.0 - w)


def control_risk(population, w):
    w = np.asarray(w, dtype=float)
    if population == 1:
        return expit(-1.0 - w)
    if population == 2:
        return np.full(w.shape, expit(-1.0))
    if population == STAR:
        return 0.5 * (expit(-1.0 - w) + expit(-1.0))
    raise ValueError(f"unknown population {population!r}")


def treated_risk(population, w):
    return (1.0 - ve_true(w)) * control_risk(population, w)


def generate_trial(population, n, rng) -> TrialSample:
    """Draw ``n`` records with an auxiliary covariate ``l = expit(logit w + Z')``."""
    rng = np.random.default_rng(rng)
    w = w_from_z(population, rng.standard_normal(n))
    a = (rng.random(n) < 0.5).astype(np.int64)
    risk = np.where(a == 1, treated_risk(population, w), control_risk(population, w))
    y = (rng.random(n) < risk).astype(np.int64)
    l = expit(logit(w) + rng.standard_normal(n))
    return TrialSample(trial_id=str(population), w=w, a=a, y=y, l=l)


def generate_target(n, rng):
    rng = np.random.default_rng(rng)
    return w_from_z(STAR, rng.standard_normal(n))


def generate_dataset(sizes, seed) -> MultiTrialData:
    """Target sample plus two trials from a single seed sequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_star, s1, s2 = ss.spawn(3)
    n_star, n1, n2 = sizes
    return MultiTrialData(
        star=generate_target(n_star, s_star),
        trials=(generate_trial(1, n1, s1), generate_trial(2, n2, s2)),
    )


# --- truth by quadrature --------------------------------------------------

def _star_integral(fn, z_lo=-np.inf, z_hi=np.inf):
    """``E_star[fn(W) 1{z_lo < Z < z_hi}]`` integrated in z, split at the kink."""
    zk = float(z_from_w(STAR, KINK))
    pieces = [(z_lo, min(z_hi, zk)), (max(z_lo, zk), z_hi)]
    total = 0.0
    for lo, hi in pieces:
        if lo < hi:
            val, _ = integrate.quad(lambda z: fn(float(w_from_z(STAR, z))) * stats.norm.pdf(z), lo, hi,
                                    epsabs=1e-13, epsrel=1e-12, limit=200)
            total += val
    return total


def mu_true() -> float:
    """Target marginal unvaccinated risk."""
    return _star_integral(lambda w: float(control_risk(STAR, w)))


def marginal_ve_true() -> float:
    """Target marginal vaccine efficacy ``1 - E[treated risk] / E[control risk]``."""
    return 1.0 - _star_integral(lambda w: float(treated_risk(STAR, w))) / mu_true()


def envelope_true(preset, w):
    l0, u0, ls, us = PRESETS[preset.lower()]
    tot = control_risk(1, w) + control_risk(2, w)
    return l0 + ls * tot, u0 + us * tot


def true_phi_oracle(preset, mu, ve_const=None) -> float:
    """True bound parameter by adaptive quadrature over the target biomarker law.

    VE is strictly increasing in w, so the worst-case allocation places the
    upper risk below a biomarker threshold and the lower risk above it.
    ``ve_const`` replaces the VE curve by a constant (a degenerate check).
    """
    ve = (lambda w: ve_const) if ve_const is not None else (lambda w: float(ve_true(w)))
    lam = lambda w: float(envelope_true(preset, w)[0])
    ups = lambda w: float(envelope_true(preset, w)[1])
    om0 = _star_integral(lam)
    om1 = _star_integral(ups)
    if mu >= om1:
        return _star_integral(lambda w: ups(w) * ve(w)) / om1
    if mu <= om0:
        return _star_integral(lambda w: lam(w) * ve(w)) / om0

    def omega_at(zt):
        return _star_integral(ups, z_hi=zt) + _star_integral(lam, z_lo=zt)

    zt = optimize.brentq(lambda z: omega_at(z) - mu, -12.0, 12.0, xtol=1e-14, rtol=1e-15)
    gamma = _star_integral(lambda w: ups(w) * ve(w), z_hi=zt) + _star_integral(lambda w: lam(w) * ve(w), z_lo=zt)
    return gamma / mu


def true_phi_mc(preset, mu, n_draws=1_000_000, seed=0) -> float:
    """Same quantity from stratified uniform draws pushed through ``population_phi``."""
    rng = np.random.default_rng(seed)
    u = (np.arange(n_draws) + rng.random(n_draws)) / n_draws
    w = w_from_z(STAR, stats.norm.ppf(u))
    lam, ups = envelope_true(preset, w)
    p = np.full(n_draws, 1.0 / n_draws)
    return population_phi(p, lam, ups, ve_true(w), mu).phi


# --- experiments ----------------------------------------------------------

@dataclass(frozen=True)
class DgpSpec:
    size: str = "smaller"
    preset: str = "moderate"
    reps: int = 200
    seed: int = 0
    mu_grid: tuple | None = None
    ncc_ratio: int = 1

    def __post_init__(self):
        if self.size not in SIZES:
            raise ValueError(f"size must be one of {sorted(SIZES)}")
        if self.preset.lower() not in PRESETS:
            raise ValueError(f"preset must be one of {sorted(PRESETS)}")
        if self.reps < 0:
            raise ValueError("reps must be nonnegative")

    @property
    def sizes(self):
        return SIZES[self.size]

    def mus(self):
        return (mu_true(),) if self.mu_grid is None else tuple(float(m) for m in self.mu_grid)


REPORT_COLUMNS = ("setting", "preset", "variant", "mu", "coverage", "avg_phi", "avg_lcb", "true_phi",
                  "mc_se", "failures")


@dataclass
class ExperimentReport:
    """Per-mu coverage summaries and the per-replication records behind them.

    ``mc_se`` is the binomial Monte Carlo standard error of the coverage.
    ``variance_ratio`` (two-phase runs) is the Monte Carlo variance of the
    two-phase estimate divided by that of the full-data estimate.
    """

    spec: DgpSpec
    rows: list = field(default_factory=list)
    replications: list = field(default_factory=list)
    variance_ratio: dict = field(default_factory=dict)
    error: str | None = None
    seconds: float = 0.0

    def frame(self):
        return pd.DataFrame(self.rows, columns=list(REPORT_COLUMNS))

    def replication_frame(self):
        return pd.DataFrame(self.replications)

    def coverage(self, variant, mu=None):
        for r in self.rows:
            if r["variant"] == variant and (mu is None or r["mu"] == mu):
                return r["coverage"]
        raise KeyError(variant)

    def write(self, prefix):
        self.frame().to_csv(f"{prefix}.csv", index=False, float_format="%.10g")
        doc = {
            "spec": asdict(self.spec), "rows": self.rows, "variance_ratio": self.variance_ratio,
            "error": self.error, "seconds": self.seconds,
        }
        with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, default=float)


def default_config(seed=0) -> AnalysisConfig:
    return AnalysisConfig(seed=seed, b5=True)


def _estimates(bridge, variant_name, mus, rep, adaptive, resolution):
    out = []
    for mu in mus:
        rec = {"rep": rep, "variant": variant_name, "mu": mu}
        try:
            est = bridge.estimate(mu)
            rec.update(phi=est.phi_hat, lcb=est.lcb, sigma2_n=est.sigma2_n, case=est.case, v=(0.5, 0.5))
        except BridgeError as exc:
            rec.update(error=type(exc).__name__)
        out.append(rec)
        if adaptive:
            arec = {"rep": rep, "variant": "adaptive", "mu": mu}
            try:
                res = adaptive_weights(bridge, mu, resolution=resolution, b5=True)
                arec.update(phi=res.estimate.phi_hat, lcb=res.estimate.lcb, sigma2_n=res.estimate.sigma2_n,
                            case=res.estimate.case, v=res.v)
            except BridgeError as exc:
                arec.update(error=type(exc).__name__)
            out.append(arec)
    return out


def run_replication(spec: DgpSpec, variant: str, rep: int, mus=None, config=None):
    """One replication; returns a list of per-(variant, mu) records."""
    mus = spec.mus() if mus is None else mus
    ss = np.random.SeedSequence([spec.seed, rep])
    s_data, s_ncc = ss.spawn(2)
    config = default_config(spec.seed) if config is None else config
    bounds = preset_bounds(spec.preset, 2)
    try:
        data = generate_dataset(spec.sizes, s_data)
        validated = validate_bounds(bounds, data, eps_m=config.eps_m)
        if variant in ("fixed", "adaptive"):
            nuis = fit_nuisances(data, config)
            bridge = build_bridge(data, validated, nuis, None, config.z)
            return _estimates(bridge, "fixed", mus, rep, variant == "adaptive", config.adaptive_resolution)
        if variant in ("twophase", "twophase_known"):
            full = build_bridge(data, validated, fit_nuisances(data, config), None, config.z)
            out = _estimates(full, "full", mus, rep, False, 0)
            rngs = s_ncc.spawn(data.n_trials)
            sampled = data.with_trials(
                nested_case_control_sample(t, spec.ncc_ratio, r) for t, r in zip(data.trials, rngs))
            known = {"*": "nested_case_control"} if variant == "twophase_known" else None
            cens = fit_censoring(sampled, known)
            nuis = fit_nuisances(sampled, config, cens.weights)
            bridge = build_bridge(sampled, validated, nuis, cens.weights, config.z)
            return out + _estimates(bridge, variant, mus, rep, False, 0)
        raise ValueError(f"variant must be one of {VARIANTS}")
    except BridgeError as exc:
        return [{"rep": rep, "variant": variant, "mu": mu, "error": type(exc).__name__} for mu in mus]


def _summarize(spec, records, truths):
    rows = []
    df = pd.DataFrame(records)
    if "error" not in df:
        df["error"] = None
    for (variant, mu), grp in df.groupby(["variant", "mu"], sort=False):
        ok = grp[grp["error"].isna()] if "error" in grp else grp
        n_ok = len(ok)
        truth = truths[mu]
        cov = float(np.mean(ok["lcb"] <= truth)) if n_ok else float("nan")
        rows.append({
            "setting": spec.size, "preset": spec.preset, "variant": variant, "mu": mu,
            "coverage": cov,
            "avg_phi": float(ok["phi"].mean()) if n_ok else float("nan"),
            "avg_lcb": float(ok["lcb"].mean()) if n_ok else float("nan"),
            "true_phi": truth,
            "mc_se": math.sqrt(cov * (1 - cov) / n_ok) if n_ok else float("nan"),
            "failures": int(len(grp) - n_ok),
        })
    return rows, df


def run_experiment(spec: DgpSpec, variant="adaptive", threads=1, config=None,
                   progress=None) -> ExperimentReport:
    """Run ``spec.reps`` independent replications and summarize coverage.

    Replication ``i`` draws everything from ``SeedSequence([seed, i])``, so
    serial and parallel runs give identical reports.  Variant ``adaptive``
    also records the fixed ``(1/2, 1/2)`` estimator computed from the same
    fit; the two-phase variants also record the full-data estimator.
    """
    start = time.perf_counter()
    report = ExperimentReport(spec)
    if spec.reps == 0:
        report.error = "no replications requested"
        return report
    mus = spec.mus()
    truths = {mu: true_phi_oracle(spec.preset, mu) for mu in mus}
    records = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_replication, spec, variant, i, mus, config) for i in range(spec.reps)]
            for i, fut in enumerate(futures):
                records.extend(fut.result())
                if progress:
                    progress(i)
    else:
        for i in range(spec.reps):
            records.extend(run_replication(spec, variant, i, mus, config))
            if progress:
                progress(i)
    report.rows, df = _summarize(spec, records, truths)
    report.replications = records
    if variant.startswith("twophase"):
        for mu in mus:
            full = df[(df["variant"] == "full") & (df["mu"] == mu)]["phi"].dropna()
            two = df[(df["variant"] == variant) & (df["mu"] == mu)]["phi"].dropna()
            if len(full) > 1 and len(two) > 1:
                report.variance_ratio[mu] = float(np.var(two, ddof=1) / np.var(full, ddof=1))
    report.seconds = time.perf_counter() - start
    return report

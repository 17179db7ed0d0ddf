"""Datasets, bound specifications and analysis configuration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    ConvexityViolation,
    EmptySample,
    InvalidOutcome,
    InvalidTreatment,
    MissingColumn,
    OrderViolation,
    PseudoRiskOutOfRange,
    StarRowHasOutcome,
)

STAR = "star"
CONVEXITY_TOL = 1e-10


@dataclass(frozen=True)
class ObservationRecord:
    """One completed-trial participant.

    ``w`` is ``None`` exactly when ``delta == 0`` (biomarker not measured).
    """

    w: float | None
    a: int
    y: int
    delta: int | None = None
    l: float | None = None

    def __post_init__(self):
        if self.a not in (0, 1):
            raise InvalidTreatment(f"a must be 0 or 1, got {self.a!r}")
        if self.y not in (0, 1):
            raise InvalidOutcome(f"y must be 0 or 1, got {self.y!r}")
        if self.delta not in (None, 0, 1):
            raise InvalidOutcome(f"delta must be 0 or 1, got {self.delta!r}")
        if self.delta == 0 and self.w is not None:
            raise ValueError("w must be absent when delta == 0")
        if self.delta != 0 and self.w is None:
            raise ValueError("w must be present unless delta == 0")


@dataclass(frozen=True, eq=False)
class TrialSample:
    """Column-oriented sample from one completed trial.

    ``w`` holds NaN where the biomarker was not measured (``delta == 0``).
    """

    trial_id: str
    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    delta: np.ndarray | None = None
    l: np.ndarray | None = None

    def __post_init__(self):
        for name in ("w", "a", "y", "delta", "l"):
            arr = getattr(self, name)
            if arr is not None:
                dtype = float if name in ("w", "l") else np.int64
                object.__setattr__(self, name, np.asarray(arr, dtype=dtype))
        n = self.w.shape[0]
        if n == 0:
            raise EmptySample(f"trial {self.trial_id!r} has no records")
        for name in ("a", "y", "delta", "l"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"column {name} has wrong length")
        if not np.isin(self.a, (0, 1)).all():
            raise InvalidTreatment(f"trial {self.trial_id!r}: a outside {{0,1}}")
        if not np.isin(self.y, (0, 1)).all():
            raise InvalidOutcome(f"trial {self.trial_id!r}: y outside {{0,1}}")
        if self.delta is not None:
            if not np.isin(self.delta, (0, 1)).all():
                raise InvalidOutcome(f"trial {self.trial_id!r}: delta outside {{0,1}}")
            if np.isnan(self.w[self.delta == 1]).any():
                raise ValueError(f"trial {self.trial_id!r}: w missing where delta == 1")
            w = self.w.copy()
            w[self.delta == 0] = np.nan
            object.__setattr__(self, "w", w)
        elif np.isnan(self.w).any():
            raise ValueError(f"trial {self.trial_id!r}: w missing without a delta column")

    @property
    def n(self) -> int:
        return int(self.w.shape[0])

    @property
    def observed(self) -> np.ndarray:
        if self.delta is None:
            return np.ones(self.n, dtype=bool)
        return self.delta == 1

    def records(self):
        for i in range(self.n):
            yield ObservationRecord(
                w=None if np.isnan(self.w[i]) else float(self.w[i]),
                a=int(self.a[i]),
                y=int(self.y[i]),
                delta=None if self.delta is None else int(self.delta[i]),
                l=None if self.l is None else float(self.l[i]),
            )

    def with_delta(self, delta) -> "TrialSample":
        return replace(self, delta=np.asarray(delta, dtype=np.int64), w=self.w.copy())


@dataclass(frozen=True, eq=False)
class MultiTrialData:
    """Target-population biomarker sample plus S completed-trial samples."""

    star: np.ndarray
    trials: tuple[TrialSample, ...]

    def __post_init__(self):
        star = np.asarray(self.star, dtype=float)
        object.__setattr__(self, "star", star)
        object.__setattr__(self, "trials", tuple(self.trials))
        if star.size == 0:
            raise EmptySample("target sample has no records")
        if np.isnan(star).any():
            raise ValueError("target sample contains missing biomarker values")
        if len(self.trials) < 1:
            raise EmptySample("at least one completed trial is required")

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (int(self.star.size),) + tuple(t.n for t in self.trials)

    @property
    def n_min(self) -> int:
        return min(self.sizes)

    @property
    def two_phase(self) -> bool:
        return any(t.delta is not None for t in self.trials)

    def observed_w(self) -> np.ndarray:
        parts = [self.star] + [t.w[t.observed] for t in self.trials]
        return np.concatenate(parts)

    def with_trials(self, trials) -> "MultiTrialData":
        return MultiTrialData(self.star, tuple(trials))


def _column_map(schema):
    names = {"trial_id": "trial_id", "w": "w", "a": "a", "y": "y", "delta": "delta", "l": "l"}
    if schema:
        names.update(schema)
    return names


def load_trials(path, schema: dict | None = None) -> MultiTrialData:
    """Read a ``trial_id,w,a,y[,delta,l]`` CSV.

    Rows with ``trial_id == "star"`` are target-population draws and must leave
    ``a`` and ``y`` empty.  Trials are ordered by first appearance in the file.
    """
    cols = _column_map(schema)
    frame = pd.read_csv(path, dtype={cols["trial_id"]: str}, keep_default_na=True,
                        float_precision="round_trip")
    for key in ("trial_id", "w", "a", "y"):
        if cols[key] not in frame.columns:
            raise MissingColumn(f"missing column {cols[key]!r}")
    return frame_to_data(frame.rename(columns={v: k for k, v in cols.items()}))


def frame_to_data(frame: pd.DataFrame) -> MultiTrialData:
    tid = frame["trial_id"].astype(str).str.strip()
    star_rows = frame[tid == STAR]
    if star_rows[["a", "y"]].notna().any().any():
        raise StarRowHasOutcome("rows for trial_id 'star' must not carry a or y")
    if star_rows["w"].isna().any():
        raise ValueError("target rows must carry w")
    has_delta = "delta" in frame.columns
    has_l = "l" in frame.columns
    trials = []
    for trial_id in pd.unique(tid[tid != STAR]):
        rows = frame[tid == trial_id]
        a = _integral(rows["a"], InvalidTreatment, trial_id, "a")
        y = _integral(rows["y"], InvalidOutcome, trial_id, "y")
        delta = None
        if has_delta and rows["delta"].notna().any():
            delta = _integral(rows["delta"].fillna(1), InvalidOutcome, trial_id, "delta")
        trials.append(
            TrialSample(
                trial_id=str(trial_id),
                w=rows["w"].to_numpy(dtype=float),
                a=a,
                y=y,
                delta=delta,
                l=rows["l"].to_numpy(dtype=float) if has_l and rows["l"].notna().any() else None,
            )
        )
    if len(star_rows) == 0:
        raise EmptySample("no rows with trial_id 'star'")
    return MultiTrialData(star_rows["w"].to_numpy(dtype=float), tuple(trials))


def _integral(col, exc, trial_id, name):
    values = col.to_numpy(dtype=float)
    if np.isnan(values).any() or not np.isin(values, (0.0, 1.0)).all():
        raise exc(f"trial {trial_id!r}: column {name} must be 0 or 1")
    return values.astype(np.int64)


def data_to_frame(data: MultiTrialData) -> pd.DataFrame:
    two_phase = data.two_phase
    has_l = any(t.l is not None for t in data.trials)
    frames = [pd.DataFrame({"trial_id": STAR, "w": data.star, "a": pd.NA, "y": pd.NA})]
    for t in data.trials:
        part = {"trial_id": t.trial_id, "w": t.w, "a": t.a, "y": t.y}
        frames.append(pd.DataFrame(part))
        if two_phase:
            frames[-1]["delta"] = t.delta if t.delta is not None else 1
        if has_l:
            frames[-1]["l"] = t.l if t.l is not None else np.nan
    out = pd.concat(frames, ignore_index=True)
    out["a"] = out["a"].astype("Int64")
    out["y"] = out["y"].astype("Int64")
    if two_phase:
        out["delta"] = out["delta"].astype("Int64")
    return out


def write_trials(data: MultiTrialData, path) -> None:
    # repr-precision floats so that a reload reproduces every value exactly
    data_to_frame(data).to_csv(path, index=False, float_format="%.17g")


# --- bound functions ------------------------------------------------------

@dataclass(frozen=True)
class BoundFn:
    """A constant, or a piecewise-linear table with flat extrapolation."""

    constant: float | None = 0.0
    knots: tuple[float, ...] | None = None
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.knots is not None:
            knots = tuple(float(k) for k in self.knots)
            values = tuple(float(v) for v in self.values)
            if len(knots) != len(values) or len(knots) == 0:
                raise ValueError("table bound needs equal-length, non-empty knots and values")
            if any(b <= a for a, b in zip(knots, knots[1:])):
                raise ValueError("table knots must be strictly increasing")
            object.__setattr__(self, "knots", knots)
            object.__setattr__(self, "values", values)
            object.__setattr__(self, "constant", None)
        else:
            object.__setattr__(self, "constant", float(self.constant))

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        if self.knots is None:
            return np.full(w.shape, self.constant)
        return np.interp(w, self.knots, self.values)

    @property
    def is_constant(self) -> bool:
        return self.knots is None

    def is_zero(self) -> bool:
        if self.knots is None:
            return self.constant == 0.0
        return all(v == 0.0 for v in self.values)

    @classmethod
    def parse(cls, obj, pointer="") -> "BoundFn":
        if isinstance(obj, BoundFn):
            return obj
        if isinstance(obj, (int, float)) and not isinstance(obj, bool):
            return cls(float(obj))
        if isinstance(obj, dict) and set(obj) == {"w", "value"}:
            try:
                return cls(None, tuple(obj["w"]), tuple(obj["value"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), pointer) from None
        raise ConfigError("expected a number or {'w': [...], 'value': [...]}", pointer)

    def to_json(self):
        if self.knots is None:
            return self.constant
        return {"w": list(self.knots), "value": list(self.values)}


def _fns(items, pointer):
    return tuple(BoundFn.parse(x, f"{pointer}/{i}") for i, x in enumerate(items))


@dataclass(frozen=True)
class BoundsSpec:
    """User-chosen weight functions for sources 0 (pseudo-trial) through S.

    ``ell``, ``u`` and ``v`` each hold S+1 functions; ``d0``/``d1`` are the
    pseudo-trial unvaccinated/vaccinated risks.  ``ve_floor`` is the lower clip
    applied to the estimated conditional efficacy bound.
    """

    ell: tuple[BoundFn, ...]
    u: tuple[BoundFn, ...]
    v: tuple[BoundFn, ...]
    d0: BoundFn = field(default_factory=lambda: BoundFn(0.0))
    d1: BoundFn = field(default_factory=lambda: BoundFn(0.0))
    delta_min: float = 1e-8
    ve_floor: float = -10.0

    def __post_init__(self):
        for name in ("ell", "u", "v"):
            object.__setattr__(self, name, tuple(BoundFn.parse(f) for f in getattr(self, name)))
        object.__setattr__(self, "d0", BoundFn.parse(self.d0))
        object.__setattr__(self, "d1", BoundFn.parse(self.d1))
        if not (len(self.ell) == len(self.u) == len(self.v)) or len(self.ell) < 2:
            raise ValueError("ell, u, v need the same length S+1 >= 2")
        if not self.delta_min > 0:
            raise ValueError("delta_min must be positive")

    @property
    def n_trials(self) -> int:
        return len(self.ell) - 1

    def with_v(self, v: Sequence) -> "BoundsSpec":
        return replace(self, v=tuple(BoundFn.parse(x) for x in v))

    @classmethod
    def from_json(cls, obj, pointer="/bounds") -> "BoundsSpec":
        if not isinstance(obj, dict):
            raise ConfigError("expected an object", pointer)
        if "preset" in obj:
            try:
                return preset_bounds(
                    obj["preset"],
                    n_trials=int(obj.get("n_trials", 2)),
                    v=obj.get("v"),
                    delta_min=float(obj.get("delta_min", 1e-8)),
                )
            except ValueError as exc:
                raise ConfigError(str(exc), f"{pointer}/preset") from None
        for key in ("ell", "u", "v"):
            if key not in obj:
                raise ConfigError(f"missing key {key!r}", pointer)
            if not isinstance(obj[key], list):
                raise ConfigError("expected a list with one entry per source 0..S", f"{pointer}/{key}")
        try:
            return cls(
                ell=_fns(obj["ell"], f"{pointer}/ell"),
                u=_fns(obj["u"], f"{pointer}/u"),
                v=_fns(obj["v"], f"{pointer}/v"),
                d0=BoundFn.parse(obj.get("d0", 0.0), f"{pointer}/d0"),
                d1=BoundFn.parse(obj.get("d1", 0.0), f"{pointer}/d1"),
                delta_min=float(obj.get("delta_min", 1e-8)),
                ve_floor=float(obj.get("ve_floor", -10.0)),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), pointer) from None

    def to_json(self) -> dict:
        return {
            "ell": [f.to_json() for f in self.ell],
            "u": [f.to_json() for f in self.u],
            "v": [f.to_json() for f in self.v],
            "d0": self.d0.to_json(),
            "d1": self.d1.to_json(),
            "delta_min": self.delta_min,
            "ve_floor": self.ve_floor,
        }


PRESETS = {
    # (ell_0, u_0, ell_s, u_s)
    "loosest": (0.0, 1.0, 0.0, 0.0),
    "moderate": (0.0, 0.0, 0.25, 0.75),
    "tight": (0.0, 0.0, 0.4, 0.6),
}


def preset_bounds(name: str, n_trials: int = 2, v=None, delta_min: float = 1e-8) -> BoundsSpec:
    """The three risk-envelope settings used in the simulation study."""
    key = name.lower()
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    l0, u0, ls, us = PRESETS[key]
    if v is None:
        v = [0.0] + [1.0 / n_trials] * n_trials
    return BoundsSpec(
        ell=(l0,) + (ls,) * n_trials,
        u=(u0,) + (us,) * n_trials,
        v=tuple(v),
        delta_min=delta_min,
    )


@dataclass(frozen=True)
class ValidatedBounds:
    """A bounds spec known to satisfy the structural checks.

    ``path`` is ``"univariate"`` when every ``ell_s`` (s >= 1) is a common
    constant multiple ``ratio`` of ``u_s`` (including ``ell_s == 0``), else
    ``"bivariate"``.
    """

    spec: BoundsSpec
    path: str
    ratio: float | None

    @property
    def n_trials(self):
        return self.spec.n_trials


def _common_ratio(ell_vals, u_vals):
    ratios = []
    for lv, uv in zip(ell_vals, u_vals):
        zero_u = uv == 0.0
        if np.any(lv[zero_u] != 0.0):
            return None
        if (~zero_u).any():
            ratios.append(lv[~zero_u] / uv[~zero_u])
    if not ratios:
        return 0.0
    r = np.concatenate(ratios)
    if np.max(np.abs(r - r[0])) > 1e-12 * max(1.0, abs(r[0])):
        return None
    return float(r[0])


def validate_bounds(spec: BoundsSpec, data: MultiTrialData | None = None, grid=None,
                    eps_m: float = 1e-6) -> ValidatedBounds:
    """Structural checks on a bounds spec over the observed biomarker values.

    The order check here is the part decidable before any regression is fit:
    it fails only if no regression values in ``[eps_m, 1 - eps_m]`` could give
    a risk-envelope gap of at least ``delta_min``.
    """
    if data is not None and spec.n_trials != data.n_trials:
        raise ValueError(f"bounds describe {spec.n_trials} trials, data has {data.n_trials}")
    if grid is None:
        grid = data.observed_w() if data is not None else np.linspace(0.0, 1.0, 101)
    grid = np.unique(np.asarray(grid, dtype=float))

    vsum = sum(f(grid) for f in spec.v)
    bad = np.abs(vsum - 1.0) > CONVEXITY_TOL
    if bad.any():
        w0 = grid[np.argmax(bad)]
        raise ConvexityViolation(f"sum of v weights is {vsum[np.argmax(bad)]:.6g} != 1 at w={w0:.6g}")
    if any(np.any(f(grid) < 0) for f in spec.v):
        raise ConvexityViolation("v weights must be nonnegative")
    for name, f in (("d0", spec.d0), ("d1", spec.d1)):
        vals = f(grid)
        if np.any((vals < 0) | (vals > 1)):
            raise PseudoRiskOutOfRange(f"{name} leaves [0, 1]")

    best_gap = spec.u[0](grid) - spec.ell[0](grid)
    for s in range(1, spec.n_trials + 1):
        diff = spec.u[s](grid) - spec.ell[s](grid)
        best_gap = best_gap + np.where(diff > 0, diff * (1 - eps_m), diff * eps_m)
    short = best_gap < spec.delta_min
    if short.any():
        w0 = float(grid[np.argmax(short)])
        raise OrderViolation(
            f"upper minus lower risk bound cannot reach delta_min={spec.delta_min:g} at w={w0:.6g}", w=w0
        )

    ratio = _common_ratio(
        [spec.ell[s](grid) for s in range(1, spec.n_trials + 1)],
        [spec.u[s](grid) for s in range(1, spec.n_trials + 1)],
    )
    path = "univariate" if ratio is not None else "bivariate"
    return ValidatedBounds(spec=spec, path=path, ratio=ratio)


# --- analysis configuration -----------------------------------------------

DEFAULT_OUTCOME_LIBRARY = ("mean", "glm", "glm_interaction", "glm_quadratic", "spline")
DEFAULT_PROPENSITY_LIBRARY = ("mean", "glm")


@dataclass(frozen=True)
class AnalysisConfig:
    mu_grid: tuple[float, ...] = (0.1,)
    z: float = 1.64
    outcome_library: tuple[str, ...] = DEFAULT_OUTCOME_LIBRARY
    propensity_library: tuple[str, ...] = DEFAULT_PROPENSITY_LIBRARY
    folds: int = 5
    ratio_clip: tuple[float, float] = (1e-3, 1e3)
    eps_m: float = 1e-6
    eps_g: float = 0.01
    seed: int = 0
    b5: bool = False
    adaptive_resolution: int = 20
    monotone: str | None = None
    known_pi: dict | None = None

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu_grid)
        object.__setattr__(self, "mu_grid", mu)
        if not mu:
            raise ConfigError("mu_grid must not be empty", "/mu_grid")
        for i, m in enumerate(mu):
            if not 0.0 < m < 1.0:
                raise ConfigError("mu values must lie strictly inside (0, 1)", f"/mu_grid/{i}")
        if any(b <= a for a, b in zip(mu, mu[1:])):
            raise ConfigError("mu_grid must be strictly increasing", "/mu_grid")
        if not self.z > 0:
            raise ConfigError("z must be positive", "/z")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2", "/folds")
        lo, hi = self.ratio_clip
        if not 0 < lo < hi:
            raise ConfigError("ratio clip bounds must satisfy 0 < lo < hi", "/clips/ratio")
        if not 0 < self.eps_g < 0.5:
            raise ConfigError("propensity clip must lie in (0, 0.5)", "/clips/propensity")
        if not 0 < self.eps_m < 0.5:
            raise ConfigError("regression clip must lie in (0, 0.5)", "/clips/regression")
        if self.monotone not in (None, "increasing", "decreasing"):
            raise ConfigError("monotone must be 'increasing' or 'decreasing'", "/monotone")
        object.__setattr__(self, "outcome_library", tuple(self.outcome_library))
        object.__setattr__(self, "propensity_library", tuple(self.propensity_library))


def _get(obj, key, kind, pointer, default):
    if key not in obj:
        return default
    val = obj[key]
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if kind is bool and isinstance(val, bool):
        return val
    if kind is list and isinstance(val, list):
        return val
    if kind is dict and isinstance(val, dict):
        return val
    if kind is str and isinstance(val, str):
        return val
    raise ConfigError(f"expected {kind.__name__}", f"{pointer}/{key}")


def parse_config(obj) -> tuple[BoundsSpec | None, AnalysisConfig]:
    """Parse the JSON document with keys bounds, mu_grid, z, learners, folds, clips, seed."""
    if not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object", "")
    bounds = BoundsSpec.from_json(obj["bounds"]) if "bounds" in obj else None
    learners = _get(obj, "learners", dict, "", {})
    clips = _get(obj, "clips", dict, "", {})
    censoring = _get(obj, "censoring", dict, "", {})
    ratio = _get(clips, "ratio", list, "/clips", [1e-3, 1e3])
    if len(ratio) != 2:
        raise ConfigError("expected [lo, hi]", "/clips/ratio")
    for i, name in enumerate(_get(learners, "outcome", list, "/learners", [])):
        _check_learner(name, f"/learners/outcome/{i}")
    for i, name in enumerate(_get(learners, "propensity", list, "/learners", [])):
        _check_learner(name, f"/learners/propensity/{i}")
    mu_grid = _get(obj, "mu_grid", list, "", [0.1])
    for i, m in enumerate(mu_grid):
        if not isinstance(m, (int, float)) or isinstance(m, bool):
            raise ConfigError("expected a number", f"/mu_grid/{i}")
    cfg = AnalysisConfig(
        mu_grid=tuple(mu_grid),
        z=_get(obj, "z", float, "", 1.64),
        outcome_library=tuple(learners.get("outcome", DEFAULT_OUTCOME_LIBRARY)),
        propensity_library=tuple(learners.get("propensity", DEFAULT_PROPENSITY_LIBRARY)),
        folds=_get(obj, "folds", int, "", 5),
        ratio_clip=(float(ratio[0]), float(ratio[1])),
        eps_m=_get(clips, "regression", float, "/clips", 1e-6),
        eps_g=_get(clips, "propensity", float, "/clips", 0.01),
        seed=_get(obj, "seed", int, "", 0),
        b5=_get(obj, "b5", bool, "", False),
        adaptive_resolution=_get(obj, "adaptive_resolution", int, "", 20),
        monotone=_get(obj, "monotone", str, "", None),
        known_pi=_get(censoring, "known_pi", dict, "/censoring", None),
    )
    return bounds, cfg


def _check_learner(name, pointer):
    from .nuisance import LEARNERS

    if name not in LEARNERS:
        raise ConfigError(f"unknown learner {name!r}; choose from {sorted(LEARNERS)}", pointer)


def load_config(path) -> tuple[BoundsSpec | None, AnalysisConfig]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", "") from None
    return parse_config(obj)


def is_finite(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)

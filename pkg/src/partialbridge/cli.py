"""Command-line entry point.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 when
estimation fails.  Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import simgen
from .bridge import adaptive_weights, prepare
from .data import AnalysisConfig, load_config, load_trials, preset_bounds, write_trials
from .errors import ConfigError, EstimationError, ValidationError
from .twophase import nested_case_control_sample, prepare_ipcw

SUBCOMMANDS = ("simulate", "fit", "curve", "adaptive", "twophase", "experiment", "oracle")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _mu_list(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser():
    parser = _Parser(prog="partialbridge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True, help="trial_id,w,a,y[,delta,l] CSV")
            p.add_argument("--config", help="JSON analysis configuration")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--preset", help="bounds preset when the config has none")

    p = sub.add_parser("simulate", help="draw a dataset from the simulation design")
    common(p, data=False)
    p.add_argument("--size", default="smaller", choices=sorted(simgen.SIZES))
    p.add_argument("--two-phase", action="store_true", help="apply 1:1 nested case-control sampling")

    for name in ("fit", "curve", "adaptive", "twophase"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--mu", type=float)
        p.add_argument("--mu-grid", type=_mu_list)
        p.add_argument("--monotone", choices=("increasing", "decreasing"))
        p.add_argument("--adaptive", action="store_true")
        p.add_argument("--two-phase", action="store_true")

    p = sub.add_parser("experiment", help="Monte Carlo coverage study")
    common(p, data=False)
    p.add_argument("--size", default="smaller", choices=sorted(simgen.SIZES))
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--variant", default="adaptive", choices=simgen.VARIANTS)
    p.add_argument("--mu-grid", type=_mu_list)

    p = sub.add_parser("oracle", help="true bound parameter for the simulation design")
    common(p, data=False)
    p.add_argument("--mu", type=float)
    p.add_argument("--mu-grid", type=_mu_list)
    p.add_argument("--mc", action="store_true", help="add the Monte Carlo cross-check column")
    return parser


# --- helpers --------------------------------------------------------------

def _analysis(args):
    bounds, cfg = (None, AnalysisConfig()) if args.config is None else load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mu_grid", None):
        overrides["mu_grid"] = args.mu_grid
    elif getattr(args, "mu", None) is not None:
        overrides["mu_grid"] = (args.mu,)
    if getattr(args, "monotone", None):
        overrides["monotone"] = args.monotone
    if overrides:
        cfg = AnalysisConfig(**{**cfg.__dict__, **overrides})
    data = load_trials(args.data)
    if bounds is None:
        if args.preset is None:
            raise ConfigError("no bounds given; add a 'bounds' entry or pass --preset", "/bounds")
        bounds = preset_bounds(args.preset, data.n_trials)
    return data, bounds, cfg


def _engine(args, data, bounds, cfg):
    if args.command == "twophase" or args.two_phase:
        return prepare_ipcw(data, bounds, cfg)
    return prepare(data, bounds, cfg)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _clean(x):
    if isinstance(x, float) and math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def _write_json(obj, path):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n",
                          encoding="utf-8")


def _write_frame(frame, path):
    if str(path).endswith(".json"):
        _write_json(frame.to_dict(orient="records"), path)
    else:
        frame.to_csv(path, index=False, float_format="%.17g")


def _estimate_doc(est, extra=None):
    doc = {
        "mu": est.mu, "phi_hat": est.phi_hat, "lcb": est.lcb, "sigma_n": est.sigma_n, "z": est.z,
        "n_min": est.n_min, "case": est.case, "theta_hat": est.theta_hat, "eta_hat": est.eta_hat,
        "omega_hat": est.omega_hat, "gamma_hat": est.gamma_hat, "omega_gap": est.omega_gap,
        "score_residual": est.score_residual, "sigma2_by_source": list(est.sigma2),
        "plausible": est.plausible, "v": list(est.v),
    }
    if extra:
        doc.update(extra)
    return doc


# --- subcommands ----------------------------------------------------------

def cmd_simulate(args):
    seed = 0 if args.seed is None else args.seed
    ss = np.random.SeedSequence(seed)
    s_data, s_ncc = ss.spawn(2)
    data = simgen.generate_dataset(simgen.SIZES[args.size], s_data)
    if args.two_phase:
        rngs = s_ncc.spawn(data.n_trials)
        data = data.with_trials(nested_case_control_sample(t, 1, r) for t, r in zip(data.trials, rngs))
    write_trials(data, args.out)


def cmd_fit(args):
    data, bounds, cfg = _analysis(args)
    engine = _engine(args, data, bounds, cfg)
    mu = cfg.mu_grid[0]
    extra = {"nuisances": [nu.to_json() for nu in engine.nuisances],
             "fluctuation_eps": list(engine.fluctuation.eps), "path": engine.bounds.path}
    lo, hi, lo_lcb, hi_ucb = engine.mu_feasible_range()
    extra["mu_feasible_range"] = {"lo": lo, "hi": hi, "lo_lcb": lo_lcb, "hi_ucb": hi_ucb}
    if args.adaptive:
        res = adaptive_weights(engine, mu, cfg.adaptive_resolution, cfg.b5, cfg.monotone)
        est = res.estimate
    else:
        est = engine.estimate(mu, cfg.monotone)
    _write_json(_estimate_doc(est, extra), args.out)


def cmd_curve(args):
    data, bounds, cfg = _analysis(args)
    engine = _engine(args, data, bounds, cfg)
    if args.adaptive:
        rows = []
        for mu in cfg.mu_grid:
            res = adaptive_weights(engine, mu, cfg.adaptive_resolution, cfg.b5, cfg.monotone)
            rows.append({**res.estimate.row(), "v": ";".join(f"{x:.6g}" for x in res.v)})
        frame = pd.DataFrame(rows)
    else:
        frame = engine.curve(cfg.mu_grid, cfg.monotone).frame()
    _write_frame(frame, args.out)


def cmd_adaptive(args):
    data, bounds, cfg = _analysis(args)
    engine = _engine(args, data, bounds, cfg)
    docs = []
    for mu in cfg.mu_grid:
        res = adaptive_weights(engine, mu, cfg.adaptive_resolution, cfg.b5, cfg.monotone)
        docs.append(_estimate_doc(res.estimate, {"v_star": list(res.v)}))
    _write_json(docs if len(docs) > 1 else docs[0], args.out)


def cmd_twophase(args):
    args.two_phase = True
    cmd_curve(args)


def cmd_experiment(args):
    preset = args.preset or "moderate"
    spec = simgen.DgpSpec(size=args.size, preset=preset, reps=args.reps,
                          seed=0 if args.seed is None else args.seed, mu_grid=args.mu_grid)
    report = simgen.run_experiment(spec, args.variant, threads=args.threads)
    prefix = str(args.out)
    for suffix in (".csv", ".json"):
        if prefix.endswith(suffix):
            prefix = prefix[: -len(suffix)]
    report.write(prefix)
    if report.error:
        raise EstimationError(report.error)


def cmd_oracle(args):
    preset = args.preset or "moderate"
    mus = args.mu_grid or ((args.mu,) if args.mu is not None else (simgen.mu_true(),))
    rows = []
    for mu in mus:
        row = {"preset": preset, "mu": mu, "true_phi": simgen.true_phi_oracle(preset, mu)}
        if args.mc:
            row["true_phi_mc"] = simgen.true_phi_mc(preset, mu, seed=0 if args.seed is None else args.seed)
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame["mu_true"] = simgen.mu_true()
    frame["marginal_ve"] = simgen.marginal_ve_true()
    _write_frame(frame, args.out)


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "curve": cmd_curve, "adaptive": cmd_adaptive,
    "twophase": cmd_twophase, "experiment": cmd_experiment, "oracle": cmd_oracle,
}


def _report(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "pointer", None):
        doc["pointer"] = exc.pointer
    if getattr(exc, "w", None) is not None:
        doc["w"] = exc.w
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        return _report(exc, 1)
    except EstimationError as exc:
        return _report(exc, 2)
    return 0


def main(argv=None):
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()

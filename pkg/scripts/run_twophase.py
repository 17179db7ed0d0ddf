"""Two-phase (1:1 nested case-control) coverage at both sample sizes.

    python3 scripts/run_twophase.py --reps 200
"""

import argparse
import sys

import pandas as pd

from partialbridge import simgen


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="moderate", choices=("loosest", "moderate", "tight"))
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--known", action="store_true", help="use the known sampling fraction")
    ap.add_argument("--out", help="write <out>_<size>.csv and .json")
    args = ap.parse_args(argv)

    variant = "twophase_known" if args.known else "twophase"
    frames = []
    for size in ("smaller", "larger"):
        spec = simgen.DgpSpec(size=size, preset=args.preset, reps=args.reps, seed=args.seed)
        report = simgen.run_experiment(
            spec, variant, threads=args.threads,
            progress=lambda i: print(f"\r{size} {i + 1}/{args.reps}", end="", file=sys.stderr))
        print(file=sys.stderr)
        frame = report.frame()
        frame["variance_ratio"] = frame.mu.map(report.variance_ratio).where(frame.variant == variant)
        frames.append(frame)
        if args.out:
            report.write(f"{args.out}_{size}")
    print(pd.concat(frames, ignore_index=True).to_string(index=False))


if __name__ == "__main__":
    main()

"""Coverage of the fixed-weight and adaptive lower confidence bounds.

    python3 scripts/run_coverage.py --preset moderate --size smaller --reps 200
"""

import argparse
import sys

from partialbridge import simgen


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="moderate", choices=("loosest", "moderate", "tight"))
    ap.add_argument("--size", default="smaller", choices=sorted(simgen.SIZES))
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", help="write <out>.csv and <out>.json")
    args = ap.parse_args(argv)

    spec = simgen.DgpSpec(size=args.size, preset=args.preset, reps=args.reps, seed=args.seed)
    report = simgen.run_experiment(
        spec, "adaptive", threads=args.threads,
        progress=lambda i: print(f"\r{i + 1}/{args.reps}", end="", file=sys.stderr))
    print(file=sys.stderr)
    print(report.frame().to_string(index=False))
    df = report.replication_frame()
    fixed = df[df.variant == "fixed"].set_index("rep")
    adapt = df[df.variant == "adaptive"].set_index("rep")
    print(f"adaptive variance <= fixed on {(adapt.sigma2_n <= fixed.sigma2_n).mean():.3f} of reps; "
          f"mean lcb gain {adapt.lcb.mean() - fixed.lcb.mean():+.4f}; {report.seconds:.0f}s")
    if args.out:
        report.write(args.out)


if __name__ == "__main__":
    main()

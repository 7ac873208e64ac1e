"""Plain LS vs. iterative refinement: win rate and median angular error of
the ST-normal as the outlier fraction grows."""
import argparse

from stsurf.experiments import refinement_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=200)
    ap.add_argument("--outliers", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3, 0.4])
    args = ap.parse_args()
    print("outlier_frac,win_rate,median_plain_rad,median_refined_rad")
    for f in args.outliers:
        r = refinement_benchmark(args.trials, f, args.seed)
        print(f"{f},{r['win_rate']:.4f},{r['median_plain']:.5g},{r['median_refined']:.5g}")


if __name__ == "__main__":
    main()

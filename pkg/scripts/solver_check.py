"""Closed-form weighted LS against its normal equations and a long-run
gradient-descent oracle on random systems."""
import argparse

from stsurf.experiments import solver_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--systems", type=int, default=100)
    args = ap.parse_args()
    for k, v in solver_check(args.systems, args.seed).items():
        print(f"{k}={v:.3e}")


if __name__ == "__main__":
    main()

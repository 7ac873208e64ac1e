"""Train the full model and both ablations on the synthetic motion benchmark
and print static / temporal / fused test accuracy for each."""
import argparse
import sys

from stsurf.config import dump_config
from stsurf.experiments import BENCH, BENCH_OUTLIERS, VARIANTS, bench_dataset, run_variant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--outliers", type=float, default=BENCH_OUTLIERS)
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    ap.add_argument("--show-config", action="store_true", help="print the benchmark config and exit")
    args = ap.parse_args()
    if args.show_config:
        sys.stdout.write(dump_config(BENCH))
        return
    data = bench_dataset(args.seed, outlier_frac=args.outliers)
    print("variant,acc_static,acc_temporal,acc_fused,seconds")
    for v in args.variants:
        r = run_variant(v, data, seed=args.seed)
        print(f"{v},{r.acc_static:.4f},{r.acc_temporal:.4f},{r.acc_fused:.4f},{r.seconds:.0f}", flush=True)


if __name__ == "__main__":
    main()

"""Profile blocked vs full-sequence attention across sequence lengths.

Writes the benchmark CSV and prints fitted log-log slopes of peak live
activation elements, plus the peak/time ratios at the longest length.

    python scripts/run_scaling.py --out bench.csv
"""

import argparse

from blockattn.bench import loglog_slope, scaling_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", default="64,128,192,256,320,384,448,512",
                    help="comma-separated sequence lengths")
    ap.add_argument("--d-e", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="bench.csv")
    args = ap.parse_args()

    lengths = [int(v) for v in args.lengths.split(",")]
    records, slopes = scaling_experiment(lengths, d_e=args.d_e,
                                         repeats=args.repeats,
                                         seed=args.seed, csv_path=args.out)

    print(f"{'kind':>9} {'n':>5} {'r':>4} {'peak elems':>12} "
          f"{'fwd ms':>8} {'bwd ms':>8}")
    for rec in records:
        print(f"{rec.kind:>9} {rec.n:>5} {rec.r:>4} "
              f"{rec.measured_peak_elems:>12} {rec.forward_ms:>8.2f} "
              f"{rec.backward_ms:>8.2f}")

    print()
    for kind, slope in slopes.items():
        analytic = loglog_slope(
            [rec.n for rec in records if rec.kind == kind],
            [rec.analytic_elems for rec in records if rec.kind == kind])
        print(f"{kind}: measured slope {slope:.3f} (analytic {analytic:.3f})")

    top = max(lengths)
    peak = {rec.kind: rec.measured_peak_elems for rec in records
            if rec.n == top}
    fwd = {rec.kind: rec.forward_ms for rec in records if rec.n == top}
    if len(peak) == 2:
        print(f"at n={top}: memory ratio "
              f"{peak['full_san'] / peak['biblosa']:.1f}x, forward ratio "
              f"{fwd['full_san'] / fwd['biblosa']:.1f}x")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

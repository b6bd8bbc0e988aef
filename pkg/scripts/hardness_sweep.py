"""Error versus sample size for BVFT on lifted hard instances.

Writes the sweep CSV and prints the per-n summary.  Example:

    python scripts/hardness_sweep.py --config configs/lifted_sweep.json --out lifted.csv --workers 4
"""
import argparse

from opebounds.experiment import ExperimentConfig, mean_gap, run_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/lifted_sweep.json")
    ap.add_argument("--out", default=None)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config)
    result = run_sweep(cfg, args.workers)
    out = args.out or cfg.output or f"sweep-{cfg.digest()}.csv"
    with open(out, "w") as fh:
        fh.write(result.to_csv())
    for n, mean, std in result.summary():
        print(f"n={n:<8} mean |error| = {mean:.4f} (std {std:.4f})")
    print(f"gap between smallest and largest n: {mean_gap(result):.4f}")
    print(out)


if __name__ == "__main__":
    main()

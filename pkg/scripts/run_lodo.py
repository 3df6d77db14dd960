"""Leave-one-domain-out ablation grid on the synthetic 4-domain benchmark."""

import argparse
import json

from vdn.experiments import ABLATIONS, BenchmarkConfig, ablation_order_holds, run_grid


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--variants", nargs="+", choices=tuple(ABLATIONS), default=list(ABLATIONS))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--holdouts", type=int, nargs="+", default=None)
    parser.add_argument("--out", help="write per-run accuracies as JSON here")
    args = parser.parse_args()

    def progress(variant, seed, holdout, acc, seconds):
        print(f"{variant:15s} seed {seed} holdout {holdout}  acc {acc:.3f}  ({seconds:.1f} s)", flush=True)

    res = run_grid(tuple(args.variants), tuple(args.seeds), args.holdouts, BenchmarkConfig(), progress)
    for name, mean in res["mean"].items():
        print(f"{name:15s} mean {mean:.4f}")
    if set(args.variants) == set(ABLATIONS):
        print("ordering holds:", ablation_order_holds(res["mean"]))
    if args.out:
        flat = {v: {f"{s},{h}": a for (s, h), a in runs.items()} for v, runs in res["accuracy"].items()}
        with open(args.out, "w") as fh:
            json.dump({"accuracy": flat, "mean": res["mean"]}, fh, indent=2)


if __name__ == "__main__":
    main()

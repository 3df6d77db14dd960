"""XOR comparison with and without the information-gain regulariser over several seeds."""

import argparse
import json

from vdn.experiments import toy_comparison


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--out", help="write the summary as JSON here")
    args = parser.parse_args()
    res = toy_comparison(seeds=range(args.seeds))
    for row in res["rows"]:
        print(f"seed {row['seed']:2d}  reg={str(row['with_reg']):5s}  "
              f"acc {row['test_accuracy']:.4f}  kl {row['kl_conditional']:.4f}")
    summary = {k: v for k, v in res.items() if k != "rows"}
    print(json.dumps(summary, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()

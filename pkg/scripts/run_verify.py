"""Run the exact discrete-world checks and print the worst failing worlds per suite."""

import argparse

from vdn import bounds


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--worlds", type=int, default=100)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--show", type=int, default=3, help="failing worlds listed per suite")
    args = parser.parse_args()
    report = bounds.verify(bounds.SUITES, args.worlds, args.seed)
    for name, rep in report["suites"].items():
        print(f"{name}: {'PASS' if rep['passed'] else 'FAIL'}  {rep['metric']} = {rep['worst']:.3e}  "
              f"failed {rep['n_failed']}/{rep['n_checked']}")
        if "tightness" in rep:
            print(f"  spearman(disentanglement ratio, M) = {rep['tightness']['spearman_ratio_vs_M']:.3f}")
        for fail in sorted(rep["failing_worlds"], key=lambda f: f["value"])[: args.show]:
            print(f"  world_seed {fail['world_seed']}: {fail['value']:.3e}")


if __name__ == "__main__":
    main()

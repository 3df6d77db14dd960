"""Command line entry points: gen-data, train, eval, verify."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bounds, configio
from .data import Dataset, DomainSpec, gen_multidomain, gen_xor, lodo_split
from .errors import VdnError
from .models import ModelConfig, VdnModel, checkpoint_load, checkpoint_save, predict
from .objective import LossWeights
from .trainer import EpochRecord, ToyConfig, TrainConfig, fit, fit_toy

METRICS_HEADER = ["epoch", "split", "domain", "loss_task", "loss_reg", "loss_gan", "loss_rec", "accuracy"]
RUN_SCHEMA_VERSION = 1
EVAL_SCHEMA_VERSION = 1
TRAIN_SECTIONS = (TrainConfig, ModelConfig, LossWeights)
# model fields that are read off the dataset rather than the config file
DATA_DERIVED = {"input_dim", "image_shape", "n_classes", "n_domains", "toy_mode"}


def _seed_default() -> int:
    raw = os.environ.get("VDN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"VDN_SEED must be an integer, got {raw!r}") from None


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- gen-data ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.task == "xor":
        ds = gen_xor(args.n, rng)
    else:
        spec = DomainSpec.random(args.domains, args.classes, seed=args.seed)
        ds = gen_multidomain(spec, args.n, rng)
    ds.save(args.out)
    print(f"wrote {len(ds)} examples to {args.out}")
    return 0


# -- train ---------------------------------------------------------------------------------

def split_config(values: dict[str, str], sections=TRAIN_SECTIONS) -> list:
    """Route flat keys to the dataclass that owns them; unknown keys are an error."""
    owners = {}
    for cls in sections:
        for name in configio.field_names(cls):
            owners[name] = cls
    unknown = sorted(k for k in values if k not in owners)
    if unknown:
        raise configio.ConfigError(f"unknown config keys {unknown}; valid keys: {sorted(owners)}")
    return [{k: v for k, v in values.items() if owners[k] is cls} for cls in sections]


def _metrics_rows(rec: EpochRecord, train_acc: dict[int, float], test_acc: dict[int, float]):
    losses = [rec.loss_task, rec.loss_reg, rec.loss_gan, rec.loss_rec]
    for split, accs in (("train", train_acc), ("test", test_acc)):
        for dom, acc in sorted(accs.items()):
            yield [rec.epoch, split, dom, *(repr(float(v)) for v in losses), repr(float(acc))]


def _per_domain(model, ds: Dataset | None) -> dict[int, float]:
    if ds is None or len(ds) == 0:
        return {}
    pred = predict(model, ds.x)
    return {d: float(np.mean(pred[ds.d == d] == ds.y[ds.d == d])) for d in ds.domains()}


def _train_vdn(args, values, out: Path, manifest: dict) -> dict:
    tvals, mvals, wvals = split_config(values)
    fixed = sorted(DATA_DERIVED & set(mvals))
    if fixed:
        raise configio.ConfigError(f"{fixed} are taken from the dataset and cannot be set")
    if args.data is None:
        raise configio.ConfigError("--data is required for --mode vdn")
    data = Dataset.load(args.data)
    if args.holdout_domain is not None:
        train, test = lodo_split(data, args.holdout_domain)
    else:
        train, test = data, None
    tcfg = configio.build(TrainConfig, tvals)
    tcfg.seed = args.seed
    weights = configio.build(LossWeights, wvals)
    mvals.setdefault("init_seed", str(args.seed))
    mcfg = configio.build(ModelConfig, {
        **mvals,
        "input_dim": str(data.x_dim),
        "image_shape": configio.format_value(data.image_shape),
        "n_classes": str(data.n_classes),
        "n_domains": str(len(train.domains())),
    })
    manifest["config"] = {**configio.to_flat(tcfg), **configio.to_flat(mcfg), **configio.to_flat(weights)}
    manifest["holdout_domain"] = args.holdout_domain
    manifest["source_domains"] = train.domains()
    _write_json(out / "run_manifest.json", manifest)

    model = VdnModel(mcfg)
    batch_domains: set[int] = set()
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)

        def on_epoch(rec: EpochRecord):
            batch_domains.update(rec.extra["batch_domains"])
            writer.writerows(_metrics_rows(rec, _per_domain(model, train), rec.test_accuracy))
            fh.flush()

        log = fit(model, train, tcfg, weights, test=test, epoch_callback=on_epoch)
    checkpoint_save(model, out / "checkpoint")
    return {
        "batch_domains": sorted(batch_domains),
        "final_test_accuracy": log[-1].test_accuracy if log else {},
        "final_train_accuracy": log[-1].train_accuracy if log else None,
    }


def _train_toy(args, values, out: Path, manifest: dict) -> dict:
    toy = configio.build(ToyConfig, values)
    manifest["config"] = configio.to_flat(toy)
    _write_json(out / "run_manifest.json", manifest)
    summary = {}
    for with_reg in (True, False):
        tag = "with_reg" if with_reg else "without_reg"
        res = fit_toy(args.seed, with_reg, toy)
        with open(out / f"metrics_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for rec, hist in zip(res.log, res.history):
                rec.test_accuracy = {0: hist["test_accuracy"]}
                writer.writerows(_metrics_rows(rec, {0: rec.train_accuracy}, rec.test_accuracy))
        checkpoint_save(res.model, out / f"checkpoint_{tag}")
        summary[tag] = {"test_accuracy": res.test_accuracy, "kl_conditional": res.kl_conditional}
    _write_json(out / "toy_summary.json", {"schema_version": RUN_SCHEMA_VERSION, "seed": args.seed, **summary})
    return summary


def cmd_train(args) -> int:
    out = Path(args.out)
    values = configio.read_file(args.config) if args.config else {}
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": RUN_SCHEMA_VERSION,
        "code_version": __version__,
        "mode": args.mode,
        "seed": args.seed,
        "data": str(args.data) if args.data else None,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {"dir": str(out)},
    }
    runner = _train_vdn if args.mode == "vdn" else _train_toy
    result = runner(args, values, out, manifest)
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest["result"] = result
    _write_json(out / "run_manifest.json", manifest)
    print(json.dumps(result, sort_keys=True))
    return 0


# -- eval ----------------------------------------------------------------------------------

def evaluate(model: VdnModel, ds: Dataset) -> dict:
    cfg = model.config
    if ds.x_dim != cfg.input_dim or ds.n_classes != cfg.n_classes:
        raise VdnError(
            f"data (x_dim={ds.x_dim}, classes={ds.n_classes}) does not match checkpoint "
            f"(input_dim={cfg.input_dim}, classes={cfg.n_classes})"
        )
    per = _per_domain(model, ds)
    return {
        "schema_version": EVAL_SCHEMA_VERSION,
        "n_examples": len(ds),
        "per_domain": {str(d): a for d, a in per.items()},
        "mean_accuracy": float(np.mean(list(per.values()))) if per else float("nan"),
    }


def cmd_eval(args) -> int:
    model = checkpoint_load(args.checkpoint)
    ds = Dataset.load(args.data)
    if args.domain is not None:
        ds = ds.subset(ds.d == args.domain)
    report = evaluate(model, ds)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _write_json(Path(args.out), report)
    return 0


# -- verify --------------------------------------------------------------------------------

def cmd_verify(args) -> int:
    suites = bounds.SUITES if args.suite == "all" else (args.suite,)
    report = bounds.verify(suites, args.worlds, args.seed)
    if args.out:
        _write_json(Path(args.out), report)
    for name, rep in report["suites"].items():
        status = "PASS" if rep["passed"] else "FAIL"
        print(f"{name:7s} {status} {rep['metric']}={rep['worst']:.3e} "
              f"(checked {rep['n_checked']}, failed {rep['n_failed']}, rejected {len(rep['rejected_worlds'])})")
        if "tightness" in rep:
            print(f"{'':7s} spearman(ratio, M) = {rep['tightness']['spearman_ratio_vs_M']:.3f}")
        for fail in rep["failing_worlds"][:5]:
            print(f"{'':7s} replay: suite={name} seed={args.seed} world_seed={fail['world_seed']} "
                  f"value={fail['value']:.3e}", file=sys.stderr)
    return 0 if report["passed"] else 1


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    seed_help = "random seed (default: $VDN_SEED or 0)"

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--task", choices=("xor", "multidomain"), default="multidomain")
    g.add_argument("--n", type=_positive_int, default=300, help="examples (per domain for multidomain)")
    g.add_argument("--domains", type=_positive_int, default=4)
    g.add_argument("--classes", type=_positive_int, default=4)
    g.add_argument("--seed", type=int, default=None, help=seed_help)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat 'key = value' file")
    t.add_argument("--data")
    t.add_argument("--holdout-domain", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None, help=seed_help)
    t.add_argument("--mode", choices=("vdn", "toy-xor"), default="vdn")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", type=int, default=None)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="exact checks on discrete worlds")
    v.add_argument("--suite", choices=("all",) + bounds.SUITES, default="all")
    v.add_argument("--worlds", type=_positive_int, default=100)
    v.add_argument("--seed", type=int, default=None, help=seed_help)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", 0) is None:
        args.seed = _seed_default()
    try:
        return args.func(args)
    except (VdnError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

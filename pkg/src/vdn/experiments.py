"""Leave-one-domain-out ablation grid and the XOR toy comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DomainSpec, gen_multidomain, lodo_split
from .models import ModelConfig, VdnModel
from .objective import LossWeights
from .trainer import ToyConfig, TrainConfig, fit, fit_toy

# (use_reg, use_posterior, augment); "reg" is the information-gain term,
# "posterior" the reconstruction + adversarial terms
ABLATIONS = {
    "baseline": (False, False, False),
    "reg_only": (True, False, False),
    "posterior_only": (False, True, False),
    "reg_posterior": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class BenchmarkConfig:
    spec_seed: int = 0
    n_per_domain: int = 40
    n_domains: int = 4
    n_classes: int = 4
    inversions: bool = False
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=150))
    weights: LossWeights = field(default_factory=LossWeights)


def benchmark_spec(cfg: BenchmarkConfig) -> DomainSpec:
    return DomainSpec.random(cfg.n_domains, cfg.n_classes, seed=cfg.spec_seed, inversions=cfg.inversions)


def run_lodo(variant: str, seed: int, holdout: int, cfg: BenchmarkConfig = BenchmarkConfig()) -> float:
    """Final-epoch target accuracy of one (variant, seed, held-out domain) run."""
    spec = benchmark_spec(cfg)
    data = gen_multidomain(spec, cfg.n_per_domain, np.random.default_rng([seed, 17]))
    train, test = lodo_split(data, holdout)
    reg, post, aug = ABLATIONS[variant]
    model = VdnModel(ModelConfig(n_classes=cfg.n_classes, n_domains=len(train.domains()), init_seed=seed))
    tcfg = replace(cfg.train, seed=seed, use_reg=reg, use_posterior=post, augment=aug)
    log = fit(model, train, tcfg, cfg.weights, test=test)
    if not log:
        return float("nan")
    return log[-1].test_accuracy[holdout]


def run_grid(variants=tuple(ABLATIONS), seeds=(0, 1, 2), holdouts=None,
             cfg: BenchmarkConfig = BenchmarkConfig(), progress=None) -> dict:
    holdouts = tuple(range(cfg.n_domains)) if holdouts is None else tuple(holdouts)
    acc = {v: {} for v in variants}
    for v in variants:
        for s in seeds:
            for h in holdouts:
                start = time.perf_counter()
                acc[v][(s, h)] = run_lodo(v, s, h, cfg)
                if progress is not None:
                    progress(v, s, h, acc[v][(s, h)], time.perf_counter() - start)
    means = {v: float(np.mean(list(r.values()))) for v, r in acc.items()}
    return {"accuracy": acc, "mean": means}


def ablation_order_holds(means: dict[str, float], tol: float = 0.0) -> bool:
    """full >= reg+posterior >= max(reg only, posterior only) >= baseline."""
    chain = [
        means["full"],
        means["reg_posterior"],
        max(means["reg_only"], means["posterior_only"]),
        means["baseline"],
    ]
    return all(a >= b - tol for a, b in zip(chain, chain[1:]))


def toy_comparison(seeds=range(10), cfg: ToyConfig = ToyConfig()) -> dict:
    rows = []
    for s in seeds:
        for with_reg in (True, False):
            r = fit_toy(s, with_reg, cfg)
            rows.append({"seed": s, "with_reg": with_reg, "test_accuracy": r.test_accuracy,
                         "kl_conditional": r.kl_conditional})

    def mean(key, flag):
        return float(np.mean([r[key] for r in rows if r["with_reg"] == flag]))

    return {
        "rows": rows,
        "accuracy_with_reg": mean("test_accuracy", True),
        "accuracy_without_reg": mean("test_accuracy", False),
        "kl_with_reg": mean("kl_conditional", True),
        "kl_without_reg": mean("kl_conditional", False),
    }

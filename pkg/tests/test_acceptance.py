"""Acceptance criteria, one pass/fail line each (printed in the terminal summary).

The DG grid and the XOR comparison train real models; together they take
roughly ten minutes on one CPU core.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from test_autodiff import TOL, _unary_cases
from test_objective import _smooth_coord_check

from vdn import autodiff as ad
from vdn import bounds
from vdn.autodiff import Tensor
from vdn.data import DomainSpec, gen_multidomain
from vdn.distributions import DiagGaussian, kl_gaussians, kl_to_standard_normal
from vdn.experiments import ABLATIONS, BenchmarkConfig, ablation_order_holds, run_grid, toy_comparison
from vdn.fdiv import dual_estimate, exact_kl, optimal_critic_values
from vdn.models import (CRITIC_GROUPS, GENERATOR_GROUPS, ModelConfig, VdnModel, checkpoint_load,
                        checkpoint_save, predict_logits)
from vdn.objective import Batch, LossWeights, StepNoise, total_loss
from vdn.trainer import Trainer, TrainConfig, fit


def record(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, f"{name}: {detail}"


# -- theory suite --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def theory():
    start = time.perf_counter()
    report = bounds.verify(bounds.SUITES, 100, 1)
    return report, time.perf_counter() - start


def test_theory_runtime(theory):
    _, elapsed = theory
    record("theory suite runtime < 60 s", elapsed < 60, f"{elapsed:.2f} s")


@pytest.mark.parametrize("suite", bounds.SUITES)
def test_theory_suite(theory, suite):
    rep = theory[0]["suites"][suite]
    record(f"verify --suite {suite} --worlds 100 --seed 1", rep["passed"],
           f"{rep['metric']} = {rep['worst']:.3e} (threshold {rep['threshold']:g}), "
           f"{rep['n_failed']}/{rep['n_checked']} checks failed")


def test_relaxation_tightness(theory):
    rep = theory[0]["suites"]["relax"]
    rho = rep["tightness"]["spearman_ratio_vs_M"]
    record("relax: rank correlation of disentanglement ratio and M is positive",
           rep["n_checked"] >= 50 and rho > 0, f"spearman = {rho:.3f} over {rep['n_checked']} checks")


# -- autodiff and divergences -------------------------------------------------------------

def test_every_op_gradient_check():
    worst = {}
    for name, fn, sample in _unary_cases(np.random.default_rng(2024)):
        worst[name] = max(ad.finite_diff_check(fn, sample()) for _ in range(10))
    bad = {k: v for k, v in worst.items() if v >= TOL}
    record(f"all {len(worst)} ops pass finite differences at 10 points", not bad,
           f"max relative error {max(worst.values()):.2e}" + (f", failing {sorted(bad)}" if bad else ""))


def test_full_generator_loss_gradient_check():
    rng = np.random.default_rng(77)
    model = VdnModel(ModelConfig(hidden=8, style_hidden=4, critic_hidden=8, perceptual_dim=16,
                                 reparameterize=True, init_seed=3))
    batch = Batch(rng.uniform(-1, 1, (4, 432)), np.arange(4) % 4, np.arange(4) % 3)
    worst, checked, skipped = 0.0, 0, 0
    for point in range(10):
        noise = StepNoise.draw(np.random.default_rng(point), 4, 8, 3)
        w, c, k = _smooth_coord_check(
            lambda: total_loss(model, batch, LossWeights(), "generator", noise).loss,
            model.group_parameters(GENERATOR_GROUPS), np.random.default_rng(point))
        worst, checked, skipped = max(worst, w), checked + c, skipped + k
        for p in model.parameters():
            p.data = p.data + np.random.default_rng(200 + point).normal(scale=0.05, size=p.shape)
    record("generator loss passes finite differences at 10 points", worst < TOL,
           f"max relative error {worst:.2e} over {checked} coordinates ({skipped} at ReLU kinks skipped)")


def test_gaussian_kl_matches_monte_carlo():
    rng = np.random.default_rng(5)
    n = 10 ** 6
    z_scores = []
    for _ in range(20):
        q = DiagGaussian(rng.normal(size=3), rng.normal(scale=0.5, size=3))
        p = DiagGaussian(rng.normal(size=3), rng.normal(scale=0.5, size=3))
        z = q.mu.data + np.exp(0.5 * q.log_var.data) * rng.standard_normal((n, 3))
        ratio = q.log_pdf(z) - p.log_pdf(z)
        se = ratio.std(ddof=1) / np.sqrt(n)
        z_scores.append(abs(ratio.mean() - kl_gaussians(q, p).item()) / se)
    unit = kl_to_standard_normal(DiagGaussian([1.0], [0.0])).item()
    ok = max(z_scores) <= 3 and abs(unit - 0.5) <= 1e-12
    record("Gaussian KL vs 1e6-sample Monte Carlo on 20 pairs", ok,
           f"max |error| / SE = {max(z_scores):.2f}; KL(N(1,1)||N(0,1)) - 0.5 = {unit - 0.5:.1e}")


def test_dual_lower_bound():
    rng = np.random.default_rng(6)
    excess, gap = -np.inf, 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        support = np.arange(n)
        kl = exact_kl(q, p)
        for _ in range(100):
            table = -np.exp(rng.normal(scale=1.5, size=n))
            val = dual_estimate(support, support, lambda s: Tensor(table[s]), p, q).item()
            excess = max(excess, val - kl)
        star = optimal_critic_values(q, p)
        gap = max(gap, abs(dual_estimate(support, support, lambda s: Tensor(star[s]), p, q).item() - kl))
    record("dual value <= KL on 50 pairs x 100 critics, equality at T*", excess <= 1e-9 and gap <= 1e-9,
           f"max (dual - KL) = {excess:.2e}, |dual(T*) - KL| = {gap:.1e}")


# -- toy XOR ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    start = time.perf_counter()
    result = toy_comparison(seeds=range(10))
    return result, time.perf_counter() - start


def test_toy_accuracy(toy):
    res, elapsed = toy
    accs = [r["test_accuracy"] for r in res["rows"]]
    record("toy XOR: both variants reach >= 90% test accuracy", min(accs) >= 0.9,
           f"with L_reg {res['accuracy_with_reg']:.3f}, without {res['accuracy_without_reg']:.3f} "
           f"(worst seed {min(accs):.3f}; {elapsed:.0f} s)")


def test_toy_reg_not_worse(toy):
    res, _ = toy
    diff = res["accuracy_with_reg"] - res["accuracy_without_reg"]
    record("toy XOR: mean accuracy with L_reg >= without", diff >= 0, f"difference {diff:+.4f} over 10 seeds")


def test_toy_conditional_kl_lower_with_reg(toy):
    res, _ = toy
    record("toy XOR: mean D(Q(z_c|x)||P(z_c)) lower with L_reg", res["kl_with_reg"] < res["kl_without_reg"],
           f"{res['kl_with_reg']:.4f} vs {res['kl_without_reg']:.4f}")


def test_toy_runtime(toy):
    _, elapsed = toy
    record("toy XOR runtime < 5 min", elapsed < 300, f"{elapsed:.0f} s")


# -- synthetic domain generalization ------------------------------------------------------

@pytest.fixture(scope="module")
def grid():
    start = time.perf_counter()
    result = run_grid(tuple(ABLATIONS), seeds=(0, 1, 2), cfg=BenchmarkConfig())
    return result, time.perf_counter() - start


def test_full_beats_baseline(grid):
    res, elapsed = grid
    gain = res["mean"]["full"] - res["mean"]["baseline"]
    record("LODO: full VDN beats ERM by >= 3 points", gain >= 0.03 and elapsed < 1800,
           f"full {res['mean']['full']:.4f} vs baseline {res['mean']['baseline']:.4f} "
           f"({100 * gain:+.2f} points; grid {elapsed:.0f} s)")


def test_ablation_ordering(grid):
    res, _ = grid
    means = res["mean"]
    record("LODO: full >= reg+posterior >= max(reg, posterior) >= baseline", ablation_order_holds(means),
           ", ".join(f"{k} {v:.4f}" for k, v in means.items()))


# -- engineering --------------------------------------------------------------------------

def small_model(seed=0):
    return VdnModel(ModelConfig(hidden=16, style_hidden=8, critic_hidden=16, perceptual_dim=32, init_seed=seed))


@pytest.fixture(scope="module")
def data():
    return gen_multidomain(DomainSpec.random(3, 4, seed=2, inversions=False), 40, np.random.default_rng(1))


def test_checkpoint_round_trip(tmp_path, data):
    model = small_model()
    fit(model, data, TrainConfig(epochs=1, batch_size=12))
    checkpoint_save(model, tmp_path / "a")
    loaded = checkpoint_load(tmp_path / "a")
    checkpoint_save(loaded, tmp_path / "b")
    same_bytes = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                     for f in ("manifest.txt", "params.bin"))
    x = data.x[:10]
    same_out = np.array_equal(predict_logits(model, x), predict_logits(loaded, x))
    record("checkpoint save -> load -> save byte-identical, outputs identical", same_bytes and same_out,
           f"bytes {'equal' if same_bytes else 'differ'}, outputs {'equal' if same_out else 'differ'}")


def test_trajectory_bit_reproducible(data):
    runs = []
    for _ in range(2):
        model = small_model(seed=8)
        log = fit(model, data, TrainConfig(epochs=3, batch_size=12, seed=4, augment=True))
        runs.append(([(r.loss_task, r.loss_reg, r.loss_gan, r.loss_rec) for r in log],
                     np.concatenate([p.data.ravel() for p in model.parameters()])))
    ok = runs[0][0] == runs[1][0] and np.array_equal(runs[0][1], runs[1][1])
    record("training trajectory bit-reproducible", ok, f"{len(runs[0][0])} epochs compared")


def test_phase_isolation_100_steps(data):
    model = small_model()
    violations, counts = [], {"generator": 0, "critic": 0}

    def hook(phase, m, step):
        counts[phase] += 1
        frozen = CRITIC_GROUPS if phase == "generator" else GENERATOR_GROUPS
        for name in frozen:
            if any(p.grad is not None and np.any(p.grad) for p in m.group(name).parameters()):
                violations.append((step, phase, name))

    trainer = Trainer(model, TrainConfig(critic_update_every=5), on_backward=hook)
    rng = np.random.default_rng(0)
    for step in range(1, 101):
        idx = rng.choice(len(data), 12, replace=False)
        trainer.train_step(Batch(data.x[idx], data.y[idx], data.d[idx]), step)
    record("phase isolation on every step of a 100-step run", not violations and counts["generator"] == 100,
           f"{counts['generator']} generator and {counts['critic']} critic steps, {len(violations)} violations")


def test_critic_cadence(data):
    model = small_model()
    trainer = Trainer(model, TrainConfig(critic_update_every=5))
    rng = np.random.default_rng(1)
    changed_at = []
    for step in range(1, 26):
        before = [p.data.copy() for p in model.group_parameters(CRITIC_GROUPS)]
        idx = rng.choice(len(data), 12, replace=False)
        trainer.train_step(Batch(data.x[idx], data.y[idx], data.d[idx]), step)
        after = model.group_parameters(CRITIC_GROUPS)
        if any(not np.array_equal(a, b.data) for a, b in zip(before, after)):
            changed_at.append(step)
    record("critic parameters change exactly at steps = 0 mod 5", changed_at == [5, 10, 15, 20, 25],
           f"changed at {changed_at}")

import itertools
import math

import numpy as np
import pytest
from scipy import stats

from vdn.data import DomainSpec, gen_multidomain
from vdn.errors import ContractError
from vdn.models import CRITIC_GROUPS, GENERATOR_GROUPS, ModelConfig, VdnModel
from vdn.objective import Batch, LossReport
from vdn.trainer import (SGD, BalancedSampler, RMSProp, Trainer, TrainConfig, TrainingAborted,
                         fit, lr_scale, rmsprop_update, shuffle_styles)
from vdn import autodiff as ad
from vdn.autodiff import Tensor


def small_model(seed=0):
    return VdnModel(ModelConfig(hidden=16, style_hidden=8, critic_hidden=16, perceptual_dim=32, init_seed=seed))


@pytest.fixture(scope="module")
def data():
    spec = DomainSpec.random(3, 4, seed=1, inversions=False)
    return gen_multidomain(spec, 24, np.random.default_rng(0))


def snapshot(model, groups):
    return [p.data.copy() for p in model.group_parameters(groups)]


def changed(a, b):
    return any(not np.array_equal(x, y) for x, y in zip(a, b))


def test_rmsprop_hand_computed_step():
    theta, s = rmsprop_update(np.zeros(1), np.ones(1), np.zeros(1), 5e-5, 0.99, 1e-8)
    assert s[0] == pytest.approx(0.01, rel=1e-12)
    assert theta[0] == pytest.approx(-5e-5 / (0.1 + 1e-8), rel=1e-15)


def test_rmsprop_zero_gradient_only_decays_state():
    theta, s = rmsprop_update(np.array([0.3]), np.zeros(1), np.array([0.5]), 1e-3, 0.99, 1e-8)
    assert theta[0] == 0.3 and s[0] == 0.99 * 0.5


def test_rmsprop_two_steps_follow_the_closed_recurrence():
    g, lr, rho, eps = 0.7, 1e-2, 0.9, 1e-8
    theta, s = np.zeros(1), np.zeros(1)
    for _ in range(2):
        theta, s = rmsprop_update(theta, np.array([g]), s, lr, rho, eps)
    s1 = (1 - rho) * g * g
    s2 = rho * s1 + (1 - rho) * g * g
    expected = -lr * g / (math.sqrt(s1) + eps) - lr * g / (math.sqrt(s2) + eps)
    assert s[0] == pytest.approx(s2, rel=1e-15)
    assert theta[0] == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ContractError):
        rmsprop_update(np.zeros(2), np.zeros(3), np.zeros(2), 1.0, 0.9, 1e-8)


def test_optimizers_skip_parameters_without_gradient():
    p, q = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
    p.grad = np.array([1.0])
    for opt in (RMSProp([p, q], 0.1), SGD([p, q], 0.1, momentum=0.9)):
        opt.step()
    assert q.data[0] == 2.0 and p.data[0] != 1.0


def test_shuffle_styles_preserves_rows_and_single_row_identity(rng):
    z = rng.normal(size=(7, 3))
    out, perm = shuffle_styles(z, rng)
    np.testing.assert_array_equal(np.sort(out, axis=0), np.sort(z, axis=0))
    np.testing.assert_array_equal(out, z[perm])
    one, perm1 = shuffle_styles(z[:1], rng)
    np.testing.assert_array_equal(one, z[:1])
    with pytest.raises(ContractError):
        shuffle_styles(z[:0], rng)


def test_shuffle_styles_is_uniform_over_permutations():
    rng = np.random.default_rng(0)
    z = np.arange(3.0)[:, None]
    counts = {p: 0 for p in itertools.permutations(range(3))}
    n = 10_000
    for _ in range(n):
        _, perm = shuffle_styles(z, rng)
        counts[tuple(perm)] += 1
    freqs = np.array(list(counts.values())) / n
    assert np.all(np.abs(freqs - 1 / 6) < 0.02)
    assert stats.chisquare(list(counts.values())).pvalue > 1e-3


def test_balanced_sampler_round_robin(rng):
    d = np.repeat([0, 1, 2], [50, 20, 30])
    sampler = BalancedSampler(d, 30, rng)
    batches = list(sampler.epoch())
    assert len(batches) == 100 // 30
    for idx in batches:
        counts = np.bincount(d[idx], minlength=3)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 30


def test_schedules_match_closed_forms():
    step = TrainConfig(epochs=120, schedule="step", step_epoch=50, step_gamma=0.1)
    assert [lr_scale(step, e) for e in (0, 49, 50, 99, 100)] == [1.0, 1.0, 0.1, 0.1, 0.1 ** 2]
    cos = TrainConfig(epochs=10, schedule="cosine")
    for e in range(11):
        assert abs(lr_scale(cos, e) - 0.5 * (1 + math.cos(math.pi * e / 10))) <= 1e-15
    assert lr_scale(TrainConfig(), 7) == 1.0


def test_config_invariants():
    with pytest.raises(ContractError):
        TrainConfig(critic_update_every=0)
    with pytest.raises(ContractError):
        TrainConfig(task_optimizer="adam")
    with pytest.raises(ContractError):
        TrainConfig(gen_lr=-1.0)


def _batch(data, idx):
    return Batch(data.x[idx], data.y[idx], data.d[idx])


@pytest.mark.parametrize("k,expected", [(5, [5, 10]), (1, list(range(1, 11)))])
def test_critic_updates_only_on_multiples_of_k(data, k, expected):
    model = small_model()
    trainer = Trainer(model, TrainConfig(critic_update_every=k, seed=0))
    rng = np.random.default_rng(0)
    steps = []
    for step in range(1, 11):
        idx = rng.choice(len(data), 12, replace=False)
        before_c, before_g = snapshot(model, CRITIC_GROUPS), snapshot(model, GENERATOR_GROUPS)
        trainer.train_step(_batch(data, idx), step)
        assert changed(before_g, snapshot(model, GENERATOR_GROUPS))
        if changed(before_c, snapshot(model, CRITIC_GROUPS)):
            steps.append(step)
    assert steps == expected


def test_zero_learning_rates_leave_parameters_bit_identical(data):
    model = small_model()
    cfg = TrainConfig(task_lr=0.0, gen_lr=0.0, critic_lr=0.0, weight_decay=0.0, critic_update_every=1)
    before = [p.data.copy() for p in model.parameters()]
    Trainer(model, cfg).train_step(_batch(data, np.arange(12)), 1)
    assert not changed(before, [p.data for p in model.parameters()])


def test_phase_isolation_at_the_optimizer_level(data):
    model = small_model()
    seen = []

    def hook(phase, m, step):
        active = GENERATOR_GROUPS if phase == "generator" else CRITIC_GROUPS
        for name in GENERATOR_GROUPS + CRITIC_GROUPS:
            grads = [p.grad for p in m.group(name).parameters()]
            if name not in active:
                assert all(g is None or not np.any(g) for g in grads), (phase, name, step)
        seen.append(phase)

    trainer = Trainer(model, TrainConfig(critic_update_every=2), on_backward=hook)
    for step in range(1, 5):
        trainer.train_step(_batch(data, np.arange(12) + step), step)
    assert seen.count("generator") == 4 and seen.count("critic") == 2


def test_non_finite_loss_aborts_with_report(data):
    model = small_model()
    for p in model.E_t.parameters():
        p.data = np.full_like(p.data, np.nan)
    with pytest.raises(TrainingAborted) as info:
        Trainer(model, TrainConfig()).train_step(_batch(data, np.arange(6)), 1)
    assert isinstance(info.value.report, LossReport) and info.value.step == 1


def test_zero_epochs_leave_model_unchanged(data):
    model = small_model()
    before = [p.data.copy() for p in model.parameters()]
    assert fit(model, data, TrainConfig(epochs=0)) == []
    assert not changed(before, [p.data for p in model.parameters()])


def test_fit_is_bit_reproducible(data):
    logs, params = [], []
    for _ in range(2):
        model = small_model(seed=4)
        log = fit(model, data, TrainConfig(epochs=2, batch_size=12, seed=9))
        logs.append([(r.loss_task, r.loss_reg, r.loss_gan, r.loss_rec, r.train_accuracy) for r in log])
        params.append(np.concatenate([p.data.ravel() for p in model.parameters()]))
    assert logs[0] == logs[1]
    np.testing.assert_array_equal(params[0], params[1])


def test_fit_rejects_model_with_wrong_domain_count(data):
    with pytest.raises(ContractError):
        fit(VdnModel(ModelConfig(n_domains=2)), data, TrainConfig(epochs=1))

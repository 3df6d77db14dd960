"""Alternating generator/critic training (the VDN loop) and the XOR toy variant."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .distributions import kl_to_standard_normal
from .errors import ContractError, VdnError
from .models import GENERATOR_GROUPS, VdnModel, encode, predict
from .objective import Batch, LossReport, LossWeights, StepNoise, Terms, grad_norms, total_loss

TASK_GROUPS = ("E_c", "E_t")
STYLE_GROUPS = ("E_d", "G")
CRITIC_GROUPS = ("D_x", "D_c")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 30
    seed: int = 0
    critic_update_every: int = 1
    task_optimizer: str = "rmsprop"    # E_c, E_t
    task_lr: float = 1e-3
    task_momentum: float = 0.9
    gen_optimizer: str = "rmsprop"     # E_d, G
    gen_lr: float = 1e-3
    critic_optimizer: str = "rmsprop"  # D_x, D_c
    critic_lr: float = 1e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    weight_decay: float = 5e-5
    schedule: str = "constant"         # constant | step | cosine
    step_epoch: int = 50
    step_gamma: float = 0.1
    grad_clip: float | None = None
    use_reg: bool = True
    use_posterior: bool = True
    augment: bool = True
    detach_augmented: bool = False

    def __post_init__(self):
        if self.critic_update_every < 1:
            raise ContractError("critic_update_every must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if min(self.task_lr, self.gen_lr, self.critic_lr) < 0:
            raise ContractError("learning rates must be non-negative")
        for kind in (self.task_optimizer, self.gen_optimizer, self.critic_optimizer):
            if kind not in ("sgd", "rmsprop"):
                raise ContractError(f"unknown optimizer {kind!r}")
        if self.schedule not in ("constant", "step", "cosine"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def terms(self) -> Terms:
        return Terms(self.use_reg, self.use_posterior, self.augment and self.use_posterior,
                     self.detach_augmented)


class TrainingAborted(VdnError):
    def __init__(self, report: LossReport, step: int):
        self.report = report
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {report}")


# -- optimizers -------------------------------------------------------------------------

def rmsprop_update(param: np.ndarray, grad: np.ndarray, state: np.ndarray, lr: float,
                   rho: float, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """s <- rho s + (1 - rho) g^2;  theta <- theta - lr g / (sqrt(s) + eps).  No momentum."""
    if param.shape != grad.shape or param.shape != state.shape:
        raise ContractError(f"rmsprop_update: shapes {param.shape}, {grad.shape}, {state.shape}")
    s = rho * state + (1.0 - rho) * grad * grad
    return param - lr * grad / (np.sqrt(s) + eps), s


class RMSProp:
    def __init__(self, params, lr, rho=0.99, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.rho, self.eps, self.weight_decay = lr, rho, eps, weight_decay
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr_scale: float = 1.0) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            p.data, self.state[i] = rmsprop_update(p.data, g, self.state[i],
                                                   self.lr * lr_scale, self.rho, self.eps)


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr_scale: float = 1.0) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            p.data = p.data - (self.lr * lr_scale) * g


def make_optimizer(kind: str, params, lr: float, cfg: TrainConfig):
    if kind == "rmsprop":
        return RMSProp(params, lr, cfg.rms_decay, cfg.rms_eps, cfg.weight_decay)
    return SGD(params, lr, cfg.task_momentum, cfg.weight_decay)


def lr_scale(cfg: TrainConfig, epoch: int) -> float:
    """Multiplier on every base learning rate at (0-based) ``epoch``."""
    if cfg.schedule == "step":
        return cfg.step_gamma ** (epoch // cfg.step_epoch)
    if cfg.schedule == "cosine":
        total = max(cfg.epochs, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(epoch, total) / total))
    return 1.0


def clip_global_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm > 0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


# -- sampling -----------------------------------------------------------------------------

def shuffle_styles(z_d, rng: np.random.Generator):
    """Uniformly random row permutation; returns (permuted rows, permutation)."""
    n = z_d.shape[0]
    if n < 1:
        raise ContractError("shuffle_styles needs a non-empty batch")
    perm = rng.permutation(n)
    return z_d[perm], perm


class BalancedSampler:
    """Stratified round-robin over domains with per-domain reshuffling."""

    def __init__(self, domains: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.batch_size = batch_size
        self.pools = {int(d): np.flatnonzero(domains == d) for d in np.unique(domains)}
        self.queues = {d: self._fresh(d) for d in self.pools}
        self.n = len(domains)
        self._turn = 0

    def _fresh(self, d):
        return list(self.rng.permutation(self.pools[d]))

    def _take(self, d, k):
        out = []
        while k > 0:
            if not self.queues[d]:
                self.queues[d] = self._fresh(d)
            out.append(self.queues[d].pop())
            k -= 1
        return out

    def epoch(self):
        keys = sorted(self.pools)
        steps = max(1, self.n // self.batch_size)
        for _ in range(steps):
            base, extra = divmod(self.batch_size, len(keys))
            idx = []
            for j, d in enumerate(keys):
                bonus = 1 if (j - self._turn) % len(keys) < extra else 0
                idx.extend(self._take(d, base + bonus))
            self._turn = (self._turn + 1) % len(keys)
            yield np.asarray(idx, dtype=np.int64)


# -- training -----------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr_scale: float
    loss_task: float
    loss_reg: float
    loss_gan: float
    loss_rec: float
    train_accuracy: float
    test_accuracy: dict[int, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def mean_test_accuracy(self) -> float:
        vals = list(self.test_accuracy.values())
        return float(np.mean(vals)) if vals else float("nan")


def accuracy(model: VdnModel, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, x) == np.asarray(y)))


def per_domain_accuracy(model: VdnModel, ds: Dataset) -> dict[int, float]:
    pred = predict(model, ds.x)
    return {d: float(np.mean(pred[ds.d == d] == ds.y[ds.d == d])) for d in ds.domains()}


class Trainer:
    """Owns the optimizers and RNG for one training run of ``model``."""

    def __init__(self, model: VdnModel, config: TrainConfig, weights: LossWeights | None = None,
                 on_backward: Callable[[str, VdnModel, int], None] | None = None):
        self.model = model
        self.config = config
        self.weights = weights or LossWeights()
        self.terms = config.terms()
        self.rng = np.random.default_rng(config.seed)
        self.on_backward = on_backward
        self.lr_scale = 1.0
        self.last_critic_report: LossReport | None = None
        groups = {
            "task": (TASK_GROUPS, config.task_optimizer, config.task_lr),
            "style": (STYLE_GROUPS, config.gen_optimizer, config.gen_lr),
            "critic": (CRITIC_GROUPS, config.critic_optimizer, config.critic_lr),
        }
        self.optimizers = {
            key: make_optimizer(kind, model.group_parameters(names), lr, config)
            for key, (names, kind, lr) in groups.items()
        }
        self._group_names = {key: names for key, (names, _, _) in groups.items()}

    @property
    def critic_active(self) -> bool:
        return self.terms.reg or (self.terms.posterior and self.model.G is not None)

    def _apply(self, keys, phase, report, step_index):
        params = [p for k in keys for p in self.optimizers[k].params]
        for p in params:
            p.grad = None
        if report.loss is not None and report.loss.requires_grad:
            ad.backward(report.loss)
        if self.config.grad_clip is not None:
            clip_global_norm(params, self.config.grad_clip)
        # groups outside this update were cleared by set_phase, so their norm is zero
        active = [n for k in keys for n in self._group_names[k]]
        report.grad_norms = {n: 0.0 for n in GENERATOR_GROUPS + CRITIC_GROUPS if self.model.group(n) is not None}
        report.grad_norms.update(grad_norms(self.model, active))
        if self.on_backward is not None:
            self.on_backward(phase, self.model, step_index)
        for k in keys:
            self.optimizers[k].step(self.lr_scale)
        for p in params:
            p.grad = None

    def train_step(self, batch: Batch, step_index: int) -> LossReport:
        """One generator update; a critic update too when ``step_index % k == 0``."""
        cfg = self.model.config
        noise = StepNoise.draw(self.rng, len(batch), cfg.zc_dim, cfg.n_domains)
        report = total_loss(self.model, batch, self.weights, "generator", noise, self.terms)
        if not report.is_finite():
            raise TrainingAborted(report, step_index)
        self._apply(("task", "style"), "generator", report, step_index)
        self.last_critic_report = None
        if self.critic_active and step_index % self.config.critic_update_every == 0:
            crep = total_loss(self.model, batch, self.weights, "critic", noise, self.terms)
            if not crep.is_finite():
                raise TrainingAborted(crep, step_index)
            self._apply(("critic",), "critic", crep, step_index)
            self.last_critic_report = crep
        self.model.set_phase("none")
        return report


def _remap_domains(ds: Dataset, mapping: dict[int, int]) -> np.ndarray:
    return np.array([mapping[int(v)] for v in ds.d], dtype=np.int64)


def fit(model: VdnModel, dataset: Dataset, config: TrainConfig, weights: LossWeights | None = None,
        test: Dataset | None = None, trainer: Trainer | None = None,
        epoch_callback: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Train for ``config.epochs`` epochs; accuracy is reported per epoch, last epoch counts."""
    sources = dataset.domains()
    if model.config.n_domains != len(sources):
        raise ContractError(
            f"model has {model.config.n_domains} domain heads but data has sources {sources}"
        )
    mapping = {d: i for i, d in enumerate(sources)}
    local_d = _remap_domains(dataset, mapping)
    trainer = trainer or Trainer(model, config, weights)
    sampler = BalancedSampler(local_d, config.batch_size, trainer.rng)
    log: list[EpochRecord] = []
    step = 0
    for epoch in range(config.epochs):
        trainer.lr_scale = lr_scale(config, epoch)
        sums = np.zeros(4)
        count = 0
        seen: set[int] = set()
        for idx in sampler.epoch():
            step += 1
            seen.update(int(v) for v in dataset.d[idx])
            rep = trainer.train_step(Batch(dataset.x[idx], dataset.y[idx], local_d[idx]), step)
            sums += (rep.l_task, rep.l_reg, rep.l_gan, rep.l_rec)
            count += 1
        means = sums / max(count, 1)
        rec = EpochRecord(
            epoch, trainer.lr_scale, *means.tolist(),
            train_accuracy=accuracy(model, dataset.x, dataset.y),
            test_accuracy=per_domain_accuracy(model, test) if test is not None else {},
            extra={"batch_domains": sorted(seen)},
        )
        log.append(rec)
        if epoch_callback is not None:
            epoch_callback(rec)
    return log


# -- XOR toy --------------------------------------------------------------------------------

@dataclass
class ToyConfig:
    n_train: int = 2000
    n_test: int = 10000
    epochs: int = 60
    batch_size: int = 8    # small batches: gradient noise gets the 3-unit net off the parity saddle
    lr: float = 0.2
    critic_lr: float = 0.05
    critic_update_every: int = 1
    lambda_reg: float = 0.1
    critic_hidden: int = 16
    data_seed: int = 12345


@dataclass
class ToyResult:
    seed: int
    with_reg: bool
    test_accuracy: float
    kl_conditional: float       # mean_x KL(Q(z_c|x) || N(0, I)) on the test set
    history: list[dict] = field(default_factory=list)
    model: VdnModel | None = field(default=None, repr=False)
    log: list[EpochRecord] = field(default_factory=list, repr=False)


def mean_conditional_kl(model: VdnModel, x) -> float:
    with ad.no_grad():
        q, _ = encode(model, x)
        return float(np.mean(kl_to_standard_normal(q).data))


def fit_toy(seed: int, with_reg: bool, cfg: ToyConfig = ToyConfig()) -> ToyResult:
    """XOR with the (3,3),(3,2),(2,1) network, plain SGD, with or without L_reg."""
    from .data import gen_xor
    from .models import ModelConfig

    data_rng = np.random.default_rng([cfg.data_seed, seed])
    train, test = gen_xor(cfg.n_train, data_rng), gen_xor(cfg.n_test, data_rng)
    model = VdnModel(ModelConfig(toy_mode=True, toy_critic_hidden=cfg.critic_hidden, init_seed=seed))
    tcfg = TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
        critic_update_every=cfg.critic_update_every,
        task_optimizer="sgd", task_lr=cfg.lr, task_momentum=0.0,
        gen_optimizer="sgd", gen_lr=cfg.lr,
        critic_optimizer="sgd", critic_lr=cfg.critic_lr,
        weight_decay=0.0, use_reg=with_reg, use_posterior=False, augment=False,
    )
    weights = LossWeights(lambda_reg=cfg.lambda_reg, lambda_rec=0.0, lambda_gan=0.0)
    history = []

    def track(rec: EpochRecord):
        history.append({
            "epoch": rec.epoch,
            "loss_task": rec.loss_task,
            "loss_reg": rec.loss_reg,
            "test_accuracy": accuracy(model, test.x, test.y),
            "kl_conditional": mean_conditional_kl(model, test.x),
        })

    log = fit(model, train, tcfg, weights, test=test, epoch_callback=track)
    return ToyResult(seed, with_reg, accuracy(model, test.x, test.y),
                     mean_conditional_kl(model, test.x), history, model, log)


def config_snapshot(*objs) -> dict:
    out = {}
    for obj in objs:
        out.update(dataclasses.asdict(obj))
    return out

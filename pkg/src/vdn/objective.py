"""The four-term VDN loss and its generator/critic phases.

Generator phase (E_c, E_d, E_t, G):
    L_gen = L_task + lambda_reg L_reg + lambda_rec L_rec + lambda_gan L_gan
Critic phase (D_c, D_x):
    L_dis = -(lambda_reg L_reg + lambda_gan L_gan)

D_x scores are linear in the critic output, so the real-sample half of L_gan
carries no generator gradient and the literal min-max generator loss has the
same gradient as the non-saturating form -E[D_x(fake)].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import DiagGaussian, reparam_sample
from .errors import ContractError
from .fdiv import l_reg as _l_reg
from .models import CRITIC_GROUPS, GENERATOR_GROUPS, VdnModel, encode
from .nn import one_hot


@dataclass
class LossWeights:
    lambda_reg: float = 0.1
    lambda_rec: float = 1.0
    lambda_gan: float = 1.0

    def __post_init__(self):
        if min(self.lambda_reg, self.lambda_rec, self.lambda_gan) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class Terms:
    """Which parts of the bound are optimised (the ablation switches)."""

    reg: bool = True          # information gain term via L_reg
    posterior: bool = True    # L_rec + L_gan
    augment: bool = True      # generated samples in L_task
    detach_augmented: bool = False

    def __post_init__(self):
        if self.augment and not self.posterior:
            raise ContractError("augmentation needs the generator (posterior term) enabled")


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray  # source-domain index in [0, n_domains)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if not (len(self.x) == len(self.y) == len(self.d)):
            raise ContractError("x, y and d must have the same length")

    def __len__(self):
        return len(self.y)


@dataclass
class StepNoise:
    """All randomness consumed by one loss evaluation, drawn up front."""

    perm: np.ndarray          # style shuffle
    eps: np.ndarray           # reparameterisation noise for z_c
    eps_aug: np.ndarray       # reparameterisation noise when re-encoding generated samples
    prior: np.ndarray         # samples from P(z_c) = N(0, I)
    real_tags: np.ndarray     # random domain labels attached to prior samples

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, zc_dim: int, n_domains: int) -> "StepNoise":
        return cls(
            perm=rng.permutation(n),
            eps=rng.standard_normal((n, zc_dim)),
            eps_aug=rng.standard_normal((n, zc_dim)),
            prior=rng.standard_normal((n, zc_dim)),
            real_tags=rng.integers(0, n_domains, size=n),
        )


@dataclass
class LossReport:
    phase: str
    l_task: float = 0.0
    l_reg: float = 0.0
    l_rec: float = 0.0
    l_gan: float = 0.0
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    grad_norms: dict = field(default_factory=dict)
    loss: Tensor | None = field(default=None, repr=False)

    def recompose(self) -> float:
        w = self.weights
        if self.phase == "critic":
            return -(w.lambda_reg * self.l_reg + w.lambda_gan * self.l_gan)
        return self.l_task + w.lambda_reg * self.l_reg + w.lambda_rec * self.l_rec + w.lambda_gan * self.l_gan

    def is_finite(self) -> bool:
        return all(np.isfinite([self.l_task, self.l_reg, self.l_rec, self.l_gan, self.total]))


def _check_labels(y, n_classes):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")


def _code(q: DiagGaussian, eps, reparameterize: bool) -> Tensor:
    return reparam_sample(q, eps) if reparameterize else q.mu


def l_task(model: VdnModel, x, y, x_gen=None, y_gen=None, eps=None) -> Tensor:
    """Cross-entropy of E_t(E_c(x)) plus, if given, the same on generated samples."""
    _check_labels(y, model.config.n_classes)
    q, _ = encode(model, x)
    rep = model.config.reparameterize
    if rep and eps is None:
        raise ContractError("reparameterised model needs eps")
    loss = ad.softmax_cross_entropy(model.E_t(_code(q, eps, rep)), y)
    if x_gen is not None:
        _check_labels(y_gen, model.config.n_classes)
        q_gen = model.E_c(x_gen)
        loss = loss + ad.softmax_cross_entropy(model.E_t(_code(q_gen, eps, rep)), y_gen)
    return loss


def l_rec(model: VdnModel, x, zc_mean=None, zd=None) -> Tensor:
    """Mean over the batch of ||E_p(x) - E_p(G(E_c(x).mean, E_d(x)))||_1."""
    x = ad.as_tensor(x)
    if zc_mean is None or zd is None:
        q, zd = encode(model, x)
        zc_mean = q.mu
    recon = model.G(zc_mean, zd)
    diff = ad.abs_(model.E_p(x) - model.E_p(recon))
    return ad.mean(ad.sum_(diff, axis=1))


def l_gan(model: VdnModel, x, d, x_fake, d_fake) -> tuple[Tensor, Tensor]:
    """(generator_term, critic_term) with critic_term = E[D_x(x|d)] - E[D_x(fake|d_style)]."""
    if d is None or d_fake is None:
        raise ContractError("l_gan needs domain labels for real and generated samples")
    real = ad.mean(model.D_x(x, d))
    fake = ad.mean(model.D_x(x_fake, d_fake))
    return ad.neg(fake), real - fake


def total_loss(model: VdnModel, batch: Batch, weights: LossWeights, phase: str,
               noise: StepNoise, terms: Terms = Terms()) -> LossReport:
    """Build the phase loss on the tape; ``report.loss`` is the tensor to differentiate.

    Only the groups of ``phase`` are left trainable, so a backward pass cannot
    touch the other phase's parameters.
    """
    if phase not in ("generator", "critic"):
        raise ContractError(f"unknown phase {phase!r}")
    cfg = model.config
    _check_labels(batch.y, cfg.n_classes)
    if batch.d.size and (batch.d.min() < 0 or batch.d.max() >= cfg.n_domains):
        raise ContractError(f"domain labels must lie in [0, {cfg.n_domains})")
    model.set_phase(phase)
    use_posterior = terms.posterior and model.G is not None
    x = Tensor(batch.x)
    q, zd = encode(model, x)
    zc = _code(q, noise.eps, cfg.reparameterize)
    report = LossReport(phase=phase, weights=weights)

    task = None
    if phase == "generator":
        task = ad.softmax_cross_entropy(model.E_t(zc), batch.y)

    reg = None
    if terms.reg:
        reg = _l_reg(
            zc, noise.prior,
            one_hot(batch.d, cfg.n_domains), one_hot(noise.real_tags, cfg.n_domains),
            model.D_c,
        )
        report.l_reg = reg.item()

    rec = gan = None
    if use_posterior:
        d_style = batch.d[noise.perm]
        x_rand = model.G(zc, zd[noise.perm])
        _, gan = l_gan(model, x, batch.d, x_rand, d_style)
        report.l_gan = gan.item()
        if phase == "generator":
            rec = l_rec(model, x, q.mu, zd)
            report.l_rec = rec.item()
            if terms.augment:
                x_aug = Tensor(x_rand.data) if terms.detach_augmented else x_rand
                q_aug = model.E_c(x_aug)
                z_aug = _code(q_aug, noise.eps_aug, cfg.reparameterize)
                task = task + ad.softmax_cross_entropy(model.E_t(z_aug), batch.y)

    if phase == "generator":
        report.l_task = task.item()
        loss = task
        if reg is not None:
            loss = loss + reg * weights.lambda_reg
        if rec is not None:
            loss = loss + rec * weights.lambda_rec + gan * weights.lambda_gan
    else:
        loss = Tensor(0.0)
        if reg is not None:
            loss = loss + reg * weights.lambda_reg
        if gan is not None:
            loss = loss + gan * weights.lambda_gan
        loss = ad.neg(loss)
    report.loss = loss
    report.total = loss.item()
    return report


def grad_norms(model: VdnModel, names=GENERATOR_GROUPS + CRITIC_GROUPS) -> dict[str, float]:
    out = {}
    for name in names:
        if model.group(name) is None:
            continue
        sq = sum(float(np.vdot(p.grad, p.grad)) for p in model.group_parameters([name]) if p.grad is not None)
        out[name] = float(np.sqrt(sq))
    return out

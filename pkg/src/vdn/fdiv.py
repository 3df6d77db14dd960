"""Variational (f-GAN) estimation of KL(Q || P) with f(u) = -log u.

With f(u) = -log u, D_f(P || Q) = KL(Q || P) and the Fenchel conjugate is
f*(t) = -1 - log(-t) on t < 0.  For any critic T with negative outputs

    KL(Q || P) >= E_P[T] - E_Q[f*(T)] = E_P[T] + E_Q[1 + log(-T)],

with equality at T* = f'(p/q) = -q/p.  The critic keeps its output inside
dom f* through the activation g_f(v) = -exp(-v).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, DomainError
from .nn import MLP, Module

PRE_ACTIVATION_CLAMP = 30.0


def fenchel_conjugate(t):
    """f*(t) = -1 - log(-t); accepts floats, arrays or Tensors."""
    if isinstance(t, Tensor):
        if np.any(t.data >= 0):
            raise DomainError("fenchel_conjugate: t must be < 0 (outside dom f*)")
        return ad.neg(ad.log(ad.neg(t))) - 1.0
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr >= 0):
        raise DomainError("fenchel_conjugate: t must be < 0 (outside dom f*)")
    out = -1.0 - np.log(-arr)
    return float(out) if out.ndim == 0 else out


def neg_exp_activation(v) -> Tensor:
    """g_f(v) = -exp(-v), with v clamped to +-30 so exp cannot overflow."""
    v = ad.clip(as_tensor(v), -PRE_ACTIVATION_CLAMP, PRE_ACTIVATION_CLAMP)
    return ad.neg(ad.exp(ad.neg(v)))


class DualCritic(Module):
    """Scalar critic T(z, domain one-hot) with the g_f output activation."""

    def __init__(self, z_dim: int, n_domains: int, hidden: int, rng: np.random.Generator,
                 depth: int = 3):
        super().__init__()
        self.z_dim, self.n_domains = z_dim, n_domains
        sizes = [z_dim + n_domains] + [hidden] * (depth - 1) + [1]
        self.net = self.add_child("net", MLP(sizes, rng, activation="relu"))

    def pre_activation(self, z, tags) -> Tensor:
        inp = ad.concat([as_tensor(z), as_tensor(tags)], axis=1)
        return ad.reshape(self.net(inp), (-1,))

    def __call__(self, z, tags) -> Tensor:
        out = neg_exp_activation(self.pre_activation(z, tags))
        if np.any(out.data >= 0):  # exp underflow only; g_f is strictly negative
            raise DomainError("DualCritic produced a non-negative output")
        return out


def _expect(values, weights) -> Tensor:
    values = as_tensor(values)
    if weights is None:
        return ad.mean(values)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != values.shape:
        raise ContractError(f"weights {w.shape} vs values {values.shape}")
    return ad.sum_(values * w)


def dual_estimate(samples_p, samples_q, critic: Callable, weights_p=None,
                  weights_q=None) -> Tensor:
    """E_P[T] - E_Q[f*(T)].

    Without weights the expectations are sample means.  With weights the
    "samples" enumerate a finite support and the expectations are exact sums.
    """
    if len(samples_p) == 0 or len(samples_q) == 0:
        raise ContractError("dual_estimate needs non-empty sample sets")
    t_p = as_tensor(critic(samples_p))
    t_q = as_tensor(critic(samples_q))
    if np.any(t_p.data >= 0) or np.any(t_q.data >= 0):
        raise DomainError("critic output must be strictly negative")
    return _expect(t_p, weights_p) - _expect(fenchel_conjugate(t_q), weights_q)


def l_reg(batch_zc, prior_samples, fake_tags, real_tags, critic: DualCritic) -> Tensor:
    """E_prior[D_c(z)] + E_batch[log(-D_c(E_c(x)))] + 1.

    Minimised by the encoder, maximised by the critic.  Equals
    ``dual_estimate`` (prior as P, encoder codes as Q) exactly.
    """
    batch_zc, prior_samples = as_tensor(batch_zc), as_tensor(prior_samples)
    if batch_zc.shape[0] != prior_samples.shape[0]:
        raise ContractError(
            f"l_reg needs equal fake/real counts, got {batch_zc.shape[0]} and {prior_samples.shape[0]}"
        )
    # log(-g_f(v)) = -v exactly, so the batch side works on the pre-activation and
    # never saturates; only the prior side needs an overflow guard
    n = prior_samples.shape[0]
    v = critic.pre_activation(ad.concat([prior_samples, batch_zc], axis=0),
                              np.concatenate([np.asarray(real_tags), np.asarray(fake_tags)]))
    v_real, v_fake = ad.slice_(v, slice(0, n)), ad.slice_(v, slice(n, None))
    real = ad.neg(ad.exp(ad.neg(ad.clip(v_real, -PRE_ACTIVATION_CLAMP, np.inf))))
    return ad.mean(real) + ad.mean(ad.neg(v_fake)) + 1.0


def exact_kl(q, p) -> float:
    """KL(Q || P) for discrete distributions given as probability vectors."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = q > 0
    return float(np.sum(q[mask] * np.log(q[mask] / p[mask])))


def optimal_critic_values(q, p) -> np.ndarray:
    """T*(z) = -q(z)/p(z), the maximiser of the dual objective."""
    return -np.asarray(q, dtype=np.float64) / np.asarray(p, dtype=np.float64)

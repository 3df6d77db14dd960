"""Diagonal Gaussians, the Laplace likelihood and their closed-form quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError


@dataclass
class DiagGaussian:
    """N(mu, diag(exp(log_var))); rows of a 2-D ``mu`` are independent members."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.log_var = as_tensor(self.log_var)
        if self.mu.shape[-1:] != self.log_var.shape[-1:]:
            raise ContractError(
                f"mu and log_var dimensions differ: {self.mu.shape} vs {self.log_var.shape}"
            )
        if not np.all(np.isfinite(self.log_var.data)):
            raise ContractError("log_var must be finite")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))

    def log_pdf(self, z) -> np.ndarray:
        """Exact log density (no gradient); used by Monte-Carlo oracles."""
        z = np.asarray(z, dtype=np.float64)
        mu, lv = self.mu.data, self.log_var.data
        return -0.5 * np.sum(np.log(2 * np.pi) + lv + (z - mu) ** 2 / np.exp(lv), axis=-1)


@dataclass
class LaplaceDensity:
    loc: Tensor
    scale: float = 1.0

    def __post_init__(self):
        self.loc = as_tensor(self.loc)
        if not self.scale > 0:
            raise ContractError(f"Laplace scale must be positive, got {self.scale}")


def kl_gaussians(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over the last axis; differentiable in both arguments.

    A batch of q's (2-D parameters) against a single p returns one value per row.
    """
    if q.dim != p.dim:
        raise ContractError(f"kl_gaussians: dimension {q.dim} vs {p.dim}")
    var_ratio = ad.exp(q.log_var - p.log_var)
    diff = q.mu - p.mu
    maha = diff * diff * ad.exp(ad.neg(p.log_var))
    terms = var_ratio + maha - 1.0 + p.log_var - q.log_var
    return ad.sum_(terms, axis=-1) * 0.5


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    return kl_gaussians(q, DiagGaussian.standard(q.dim))


def reparam_sample(q: DiagGaussian, noise) -> Tensor:
    """mu + sigma * noise; the noise is treated as a constant."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1:] != (q.dim,):
        raise ContractError(f"noise shape {noise.shape} does not match dimension {q.dim}")
    return q.mu + ad.exp(q.log_var * 0.5) * Tensor(noise)


def laplace_log_pdf(d: LaplaceDensity, x) -> Tensor:
    """sum_i [-log(2 beta) - |x_i - m_i| / beta] over the last axis."""
    x = as_tensor(x)
    if x.shape[-1:] != d.loc.shape[-1:]:
        raise ContractError(f"laplace_log_pdf: {x.shape} vs loc {d.loc.shape}")
    dev = ad.abs_(x - d.loc) * (1.0 / d.scale)
    n = x.shape[-1]
    return ad.neg(ad.sum_(dev, axis=-1)) - n * float(np.log(2.0 * d.scale))

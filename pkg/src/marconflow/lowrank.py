"""Gaussians with covariance ``I + c U U^T`` evaluated in O(K M'^2).

The log-determinant uses the Weinstein-Aronszajn identity
``det(I_K + c U U^T) = det(I_M' + c U^T U)`` and the quadratic form uses the
Woodbury identity, so no K x K matrix is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianHead:
    """Shared linear maps from latent codes to mean and covariance factor."""

    theta_mean: object  # M x 1
    theta_cov: object  # M x M'


@dataclass
class LowRankGaussian:
    mean: object  # (..., K)
    factor: object  # (..., K, M')
    scale: float  # c = 1 / sqrt(M')

    @property
    def dim(self) -> int:
        return np.shape(getattr(self.mean, "data", self.mean))[-1]

    def covariance(self) -> np.ndarray:
        """Dense covariance; for tests and small K only."""
        u = np.asarray(getattr(self.factor, "data", self.factor))
        k = u.shape[-2]
        return np.eye(k) + self.scale * u @ np.swapaxes(u, -1, -2)


def _swap_last(x, xp):
    nd = xp.value(x).ndim
    return xp.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def build(h_d, head: GaussianHead, xp=gc.PLAIN) -> LowRankGaussian:
    """Mean ``h theta_mean`` and factor ``h theta_cov`` for codes ``h_d`` (..., K, M)."""
    mean = xp.matmul(h_d, head.theta_mean)
    mean = xp.reshape(mean, xp.value(mean).shape[:-1])
    factor = xp.matmul(h_d, head.theta_cov)
    rank = xp.value(factor).shape[-1]
    return LowRankGaussian(mean, factor, 1.0 / math.sqrt(rank))


def log_density(g: LowRankGaussian, z, mask=None, xp=gc.PLAIN):
    """Log-pdf of ``z`` (..., K). ``mask`` (..., K) drops padded coordinates."""
    u = g.factor
    if np.shape(xp.value(z))[-1] != xp.value(u).shape[-2]:
        raise gc.ContractError("dimension of z does not match the distribution")
    r = z - g.mean
    if mask is None:
        k_eff = float(xp.value(r).shape[-1])
    else:
        mask = np.asarray(mask, dtype=bool)
        r = xp.where(mask, r, 0.0)
        u = u * mask[..., None].astype(np.float64)
        k_eff = mask.sum(axis=-1).astype(np.float64)
    ut = _swap_last(u, xp)
    rank = xp.value(u).shape[-1]
    inner = np.eye(rank) + g.scale * xp.matmul(ut, u)
    proj = xp.matmul(ut, xp.reshape(r, xp.value(r).shape + (1,)))
    proj = xp.reshape(proj, xp.value(proj).shape[:-1])
    solved = xp.spd_solve(inner, proj)
    quad = xp.sum(r * r, axis=-1) - g.scale * xp.sum(proj * solved, axis=-1)
    return -0.5 * (k_eff * LOG_2PI + xp.spd_logdet(inner) + quad)


def marginalize(g: LowRankGaussian, indices, xp=gc.PLAIN) -> LowRankGaussian:
    idx = np.asarray(indices, dtype=np.intp).ravel()
    k = g.dim
    if idx.size == 0:
        raise ValueError("marginal index set is empty")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("marginal index set has duplicates")
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"marginal indices out of range for K={k}")
    return LowRankGaussian(
        xp.gather(g.mean, idx, axis=-1), xp.gather(g.factor, idx, axis=-2), g.scale
    )


def sample(g: LowRankGaussian, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw ``mu + eps + sqrt(c) U xi``; exact covariance without factorizing Sigma."""
    mean = np.asarray(getattr(g.mean, "data", g.mean))
    u = np.asarray(getattr(g.factor, "data", g.factor))
    size = () if n is None else (n,)
    eps = rng.standard_normal(size + mean.shape)
    xi = rng.standard_normal(size + u.shape[:-2] + u.shape[-1:])
    return mean + eps + math.sqrt(g.scale) * np.einsum("...km,...m->...k", u, xi)


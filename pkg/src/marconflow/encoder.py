"""Separable attention encoder.

Context tokens are encoded by self-attention, each query token attends to the
encoded context independently (so a query's code never sees other queries),
and the mixture weights come from learned attention queries over the context
alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .series import Batch


@dataclass
class LatentCodes:
    h_obs: object  # B x N' x M (N' includes the null slot when enabled)
    obs_mask: np.ndarray  # B x N'
    h: object  # B x D x K x M
    log_w: object  # B x D

    def weights(self) -> np.ndarray:
        return np.exp(gc.PLAIN.value(getattr(self.log_w, "data", self.log_w)))


def posembed(t, a, b, xp=gc.PLAIN):
    """Time embedding: first feature affine, the rest sinusoidal."""
    if xp is gc.PLAIN:
        t = np.asarray(t, dtype=np.float64)
    shape = xp.value(t).shape
    lin = xp.reshape(t, shape + (1,)) * a + b
    f = xp.value(lin).shape[-1]
    first = xp.gather(lin, np.arange(1), axis=-1)
    if f == 1:
        return first
    rest = xp.sin(xp.gather(lin, np.arange(1, f), axis=-1))
    return xp.concat([first, rest], axis=-1)


def onehot(channels: np.ndarray, n_channels: int) -> np.ndarray:
    """1-based channel ids to one-hot rows; id 0 (padding) maps to zeros."""
    channels = np.asarray(channels, dtype=np.intp)
    if np.any(channels < 0) or np.any(channels > n_channels):
        raise ValueError(f"channel id outside 1..{n_channels}")
    eye = np.vstack([np.zeros((1, n_channels)), np.eye(n_channels)])
    return eye[channels]


def embed_tokens(batch: Batch, w, n_channels: int, xp=gc.PLAIN):
    """Context tokens ``[pe(t), onehot(c), v]`` and query tokens ``[pe(t), onehot(c)]``."""
    ctx_pe = posembed(batch.ctx_time, w["pos.a"], w["pos.b"], xp)
    ctx = xp.concat(
        [ctx_pe, onehot(batch.ctx_channel, n_channels), batch.ctx_value[..., None]], axis=-1
    )
    ctx = ctx * batch.ctx_mask[..., None].astype(np.float64)
    qry_pe = posembed(batch.qry_time, w["pos.a"], w["pos.b"], xp)
    qry = xp.concat([qry_pe, onehot(batch.qry_channel, n_channels)], axis=-1)
    qry = qry * batch.qry_mask[..., None].astype(np.float64)
    return ctx, qry


def _split_heads(x, heads, xp):
    shape = xp.value(x).shape
    width = shape[-1]
    x = xp.reshape(x, shape[:-1] + (heads, width // heads))
    nd = len(shape) + 1
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return xp.transpose(x, axes)


def _merge_heads(x, xp):
    shape = xp.value(x).shape
    nd = len(shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = xp.transpose(x, axes)
    return xp.reshape(x, shape[:-3] + (shape[-2], shape[-3] * shape[-1]))


def mha(w, prefix: str, q, kv, key_mask: np.ndarray, heads: int, xp=gc.PLAIN):
    """Multi-head attention with a residual path from the projected queries.

    ``q`` is ``(..., Lq, dq)``, ``kv`` is ``(B, Lk, dk)`` and ``key_mask`` is
    ``(B, Lk)``; masked keys receive exactly zero attention.
    """
    qp = xp.matmul(q, w[prefix + ".wq"]) + w[prefix + ".bq"]
    kp = xp.matmul(kv, w[prefix + ".wk"]) + w[prefix + ".bk"]
    vp = xp.matmul(kv, w[prefix + ".wv"]) + w[prefix + ".bv"]
    width = xp.value(qp).shape[-1]
    if width % heads:
        raise gc.ContractError(f"attention width {width} not divisible by {heads} heads")
    dh = width // heads
    qh, kh, vh = (_split_heads(x, heads, xp) for x in (qp, kp, vp))
    kt = xp.transpose(kh, (0, 1, 3, 2))
    scores = xp.matmul(qh, kt) * (1.0 / math.sqrt(dh))
    mask = np.broadcast_to(key_mask[:, None, None, :], xp.value(scores).shape)
    attn = xp.softmax(scores, mask, -1)
    out = _merge_heads(xp.matmul(attn, vh), xp)
    return xp.matmul(qp + out, w[prefix + ".wo"]) + w[prefix + ".bo"]


def encode(batch: Batch, w, cfg, xp=gc.PLAIN) -> LatentCodes:
    """Run the three attention paths; ``cfg`` is a :class:`~marconflow.model.ModelConfig`."""
    ctx, qry = embed_tokens(batch, w, cfg.n_channels, xp)
    b = batch.size
    ctx_mask = batch.ctx_mask
    empty = ~ctx_mask.any(axis=1)
    if ctx_mask.shape[1]:
        h_obs = mha(w, "obs", ctx, ctx, ctx_mask, cfg.heads, xp)
    else:
        h_obs = np.zeros((b, 0, cfg.latent))
    if cfg.null_token:
        null = xp.reshape(w["null"], (1, 1, cfg.latent)) * np.ones((b, 1, 1))
        h_obs = xp.concat([h_obs, null], axis=1)
        obs_mask = np.concatenate([ctx_mask, empty[:, None]], axis=1)
    else:
        if np.any(empty):
            raise gc.ContractError("instance without context and no null token configured")
        obs_mask = ctx_mask

    k = xp.value(qry).shape[1]
    d, m = cfg.components, cfg.latent
    h = mha(w, "qry", qry, h_obs, obs_mask, cfg.heads, xp)
    h = xp.transpose(xp.reshape(h, (b, k, d, m)), (0, 2, 1, 3))

    if cfg.uniform_weights:
        log_w = np.full((b, d), -math.log(d))
    else:
        mixed = mha(w, "mix", w["mix.beta"], h_obs, obs_mask, cfg.heads, xp)
        logits = xp.matmul(mixed, w["mix.proj"]) + w["mix.proj_b"]
        logits = xp.reshape(logits, (b, d))
        log_w = logits - xp.logsumexp(logits, axis=1, keepdims=True)
    return LatentCodes(h_obs, obs_mask, h, log_w)

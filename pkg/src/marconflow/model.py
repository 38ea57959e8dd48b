"""Mixture of separable flows over low-rank Gaussian bases.

For component ``d`` the answers are pulled back through per-variable splines
conditioned on ``h[d, k]``, scored under ``N(mu(h_d), I + c U U^T)`` and mixed
with context-only weights. Because both the splines and the Gaussian are
parametrized per query variable, dropping a variable from the query is the
same as integrating it out; :meth:`MosesModel.marginal_log_density` exploits
this by selecting rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import gradcore as gc
from . import lowrank
from .encoder import LatentCodes, encode
from .lrs import FlowHead, SplineConfig, SplineKnots, spline_forward, spline_inverse
from .series import Batch, TimeSeriesInstance, collate


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 2
    components: int = 1
    latent: int = 16
    pos_dim: int = 16
    heads: int = 1
    rank: int = 8
    spline: SplineConfig = field(default_factory=SplineConfig)
    null_token: bool = False
    disable_flows: bool = False
    identity_covariance: bool = False
    uniform_weights: bool = False

    def __post_init__(self):
        for name in ("n_channels", "components", "latent", "pos_dim", "heads", "rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.latent % self.heads:
            raise ValueError("latent size must be divisible by the head count")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        spline = SplineConfig(**doc.pop("spline", {}))
        return cls(spline=spline, **doc)


@dataclass
class JointDensityResult:
    log_joint: float
    component_log_densities: np.ndarray
    log_weights: np.ndarray


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict[str, gc.Parameter]:
    """Attention/projection weights ~ N(0, 1/fan_in), biases zero, identity splines."""
    rng = np.random.default_rng(seed)
    m, d, f, c = cfg.latent, cfg.components, cfg.pos_dim, cfg.n_channels
    shapes: dict[str, tuple] = {}

    def attn(prefix, d_q, d_kv, width):
        shapes.update({
            f"{prefix}.wq": (d_q, width), f"{prefix}.wk": (d_kv, width),
            f"{prefix}.wv": (d_kv, width), f"{prefix}.wo": (width, width),
        })

    attn("obs", f + c + 1, f + c + 1, m)
    attn("qry", f + c, m, d * m)
    attn("mix", m, m, m)
    shapes["mix.beta"] = (d, m)
    shapes["mix.proj"] = (m, 1)
    if cfg.null_token:
        shapes["null"] = (1, m)

    params = {}
    for name, shape in shapes.items():
        params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    for prefix, width in (("obs", m), ("qry", d * m), ("mix", m)):
        for b in ("bq", "bk", "bv", "bo"):
            params[f"{prefix}.{b}"] = np.zeros(width)
    params["mix.proj_b"] = np.zeros(1)
    params["pos.a"] = np.logspace(-1.0, 2.0, f)
    params["pos.b"] = np.zeros(f)
    params["gauss.mean"] = rng.normal(0.0, 0.1, size=(m, 1))
    params["gauss.cov"] = rng.normal(0.0, 0.1, size=(m, cfg.rank))
    params["flow.w"] = np.zeros((m, cfg.spline.n_raw))
    params["flow.b"] = cfg.spline.identity_bias()
    if cfg.null_token:
        params["null"] = params["null"].reshape(m)
    return {k: gc.Parameter(k, v) for k, v in sorted(params.items())}


class MosesModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, gc.Parameter] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)

    # -- parameter plumbing -------------------------------------------------

    def weights(self, xp=gc.PLAIN) -> dict:
        if xp is gc.PLAIN:
            return {k: p.data for k, p in self.params.items()}
        return dict(self.params)

    def trainable(self) -> dict[str, gc.Parameter]:
        """Parameters that influence the density under the active variant flags."""
        skip = set()
        if self.cfg.disable_flows:
            skip |= {"flow.w", "flow.b"}
        if self.cfg.identity_covariance:
            skip.add("gauss.cov")
        if self.cfg.uniform_weights:
            skip |= {k for k in self.params if k.startswith("mix.")}
        return {k: p for k, p in self.params.items() if k not in skip}

    def copy(self) -> "MosesModel":
        return MosesModel(self.cfg, {k: gc.Parameter(k, p.data.copy()) for k, p in self.params.items()})

    def manifest(self) -> dict:
        return {"model": self.cfg.to_dict()}

    # -- heads ----------------------------------------------------------------

    def _flow_head(self, w) -> FlowHead:
        return FlowHead(w["flow.w"], w["flow.b"], self.cfg.spline)

    def _gauss_head(self, w) -> lowrank.GaussianHead:
        cov = w["gauss.cov"]
        if self.cfg.identity_covariance:
            cov = np.zeros((self.cfg.latent, self.cfg.rank))
        return lowrank.GaussianHead(w["gauss.mean"], cov)

    def encode(self, batch: Batch, xp=gc.PLAIN) -> LatentCodes:
        return encode(batch, self.weights(xp), self.cfg, xp)

    # -- densities --------------------------------------------------------------

    def batch_log_density(self, batch: Batch, xp=gc.PLAIN, codes: LatentCodes | None = None):
        """Per-instance ``(log_joint, component log-densities, log-weights)`` for a padded batch."""
        w = self.weights(xp)
        if codes is None:
            codes = encode(batch, w, self.cfg, xp)
        return self._density_from_codes(codes, batch.answer, batch.qry_mask, w, xp, batch.ids)

    def _density_from_codes(self, codes: LatentCodes, y, qmask, w, xp, ids=None):
        qmask3 = qmask[:, None, :]
        y3 = np.asarray(y, dtype=np.float64)[:, None, :]
        h = codes.h
        if self.cfg.disable_flows:
            z = np.broadcast_to(y3, xp.value(h).shape[:-1])
            log_jac = 0.0
        else:
            knots = self._flow_head(w).knots(h, xp)
            try:
                z, ld = spline_inverse(knots, y3, self.cfg.spline, xp)
            except gc.NumericalError as exc:
                raise gc.NumericalError(f"spline inverse failed: {exc}") from exc
            _check_finite("spline log-derivative", ld, qmask3, xp, ids=ids)
            log_jac = xp.sum(xp.where(qmask3, ld, 0.0), axis=-1)
        _check_finite("base coordinate", z, qmask3, xp, ids=ids)
        g = lowrank.build(h, self._gauss_head(w), xp)
        _check_finite("Gaussian mean", g.mean, qmask3, xp, ids=ids)
        base = lowrank.log_density(g, z, mask=qmask3, xp=xp)
        comp = base + log_jac
        _check_finite("component log-density", comp, np.ones(xp.value(comp).shape, bool), xp, ids=ids)
        joint = xp.logsumexp(codes.log_w + comp, axis=1)
        return joint, comp, codes.log_w

    def log_density(self, instance: TimeSeriesInstance) -> JointDensityResult:
        joint, comp, log_w = self.batch_log_density(collate([instance]))
        return JointDensityResult(float(joint[0]), np.asarray(comp[0]), np.asarray(log_w[0]))

    def marginal_log_density(self, instance: TimeSeriesInstance, subset: Sequence[int]) -> JointDensityResult:
        """Density of the answers in ``subset`` with the other query variables integrated out."""
        idx = _check_subset(subset, instance.n_query)
        batch = collate([instance])
        w = self.weights()
        codes = encode(batch, w, self.cfg)
        sub = LatentCodes(codes.h_obs, codes.obs_mask, codes.h[:, :, idx], codes.log_w)
        joint, comp, log_w = self._density_from_codes(
            sub, batch.answer[:, idx], batch.qry_mask[:, idx], w, gc.PLAIN
        )
        return JointDensityResult(float(joint[0]), np.asarray(comp[0]), np.asarray(log_w[0]))

    def conditional(self, instance: TimeSeriesInstance) -> "ConditionalMixture":
        """Precomputed predictive distribution ``p(y | Q, X)`` for one instance."""
        w = self.weights()
        codes = encode(collate([instance]), w, self.cfg)
        h = codes.h[0]
        g = lowrank.build(h, self._gauss_head(w))
        knots = None if self.cfg.disable_flows else self._flow_head(w).knots(h)
        everywhere = np.ones(g.mean.shape, bool)
        axes = ("component", "variable")
        _check_finite("Gaussian mean", g.mean, everywhere, axes=axes)
        _check_finite("covariance factor", g.factor, everywhere[..., None], axes=axes)
        if knots is not None:
            for name in ("u", "v", "deriv"):
                _check_finite(f"spline knots ({name})", getattr(knots, name), everywhere[..., None], axes=axes)
        return ConditionalMixture(codes.log_w[0], g.mean, g.factor, g.scale, knots, self.cfg.spline)

    def sample(self, instance: TimeSeriesInstance, rng: np.random.Generator, n: int | None = None):
        """Draw answers; returns ``(y, component_ids)``."""
        return self.conditional(instance).sample(rng, n)

    def predict_univariate_marginals(self, instance: TimeSeriesInstance) -> list["ConditionalMixture"]:
        cond = self.conditional(instance)
        return [cond.marginal([k]) for k in range(instance.n_query)]


def _check_finite(what: str, arr, mask: np.ndarray, xp=gc.PLAIN,
                  axes: tuple[str, ...] = ("instance", "component", "variable"), ids=None) -> None:
    """Raise on a non-finite unmasked entry, naming where it sits (one name per leading axis).

    ``ids`` relabels the first axis, e.g. batch rows as dataset instance ids.
    """
    val = np.asarray(xp.value(arr))
    bad = ~np.isfinite(val) & np.broadcast_to(mask[(...,) + (None,) * (val.ndim - mask.ndim)], val.shape)
    if bad.any():
        idx = list(np.argwhere(bad)[0])
        if ids is not None:
            idx[0] = ids[idx[0]]
        where = ", ".join(f"{n} {i}" for n, i in zip(axes, idx))
        raise gc.NumericalError(f"non-finite {what} at {where}")


def _check_subset(subset, k: int) -> np.ndarray:
    idx = np.asarray(list(subset), dtype=np.intp)
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("subset has duplicate indices")
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"subset indices must lie in 0..{k - 1}")
    return idx


def _select_knots(knots: SplineKnots, idx, axis: int) -> SplineKnots:
    return SplineKnots(*(np.take(a, idx, axis=axis) for a in (knots.u, knots.v, knots.deriv, knots.lam)))


@dataclass
class ConditionalMixture:
    """Mixture of D separable flows for a fixed instance (numpy only).

    ``mean`` is D x K, ``factor`` D x K x M', knot arrays D x K x (bins + 1).
    ``knots is None`` means identity flows.
    """

    log_w: np.ndarray
    mean: np.ndarray
    factor: np.ndarray
    scale: float
    knots: SplineKnots | None
    spline: SplineConfig

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w)

    def marginal(self, subset: Sequence[int]) -> "ConditionalMixture":
        idx = _check_subset(subset, self.dim)
        knots = None if self.knots is None else _select_knots(self.knots, idx, axis=1)
        return replace(self, mean=self.mean[:, idx], factor=self.factor[:, idx], knots=knots)

    def component_log_pdf(self, y) -> np.ndarray:
        """``(..., D)`` log-densities for points ``y`` of shape ``(..., K)``."""
        y = np.asarray(y, dtype=np.float64)[..., None, :]
        if self.knots is None:
            z, log_jac = y, 0.0
        else:
            z, ld = spline_inverse(self.knots, y, self.spline)
            log_jac = ld.sum(axis=-1)
        g = lowrank.LowRankGaussian(self.mean, self.factor, self.scale)
        return lowrank.log_density(g, z) + log_jac

    def log_pdf(self, y) -> np.ndarray:
        return gc.PLAIN.logsumexp(self.log_w + self.component_log_pdf(y), axis=-1)

    def pdf(self, y) -> np.ndarray:
        return np.exp(self.log_pdf(y))

    def sample(self, rng: np.random.Generator, n: int | None = None):
        """Component by inverse CDF on one uniform, then base draw, then forward splines."""
        count = 1 if n is None else n
        cdf = np.cumsum(self.weights)
        comp = np.minimum(np.searchsorted(cdf / cdf[-1], rng.random(count), side="right"), len(cdf) - 1)
        g = lowrank.LowRankGaussian(self.mean[comp], self.factor[comp], self.scale)
        z = lowrank.sample(g, rng)
        if self.knots is None:
            y = z
        else:
            y, _ = spline_forward(_select_knots(self.knots, comp, axis=0), z, self.spline)
        if n is None:
            return y[0], int(comp[0])
        return y, comp


def save_model(path, model: MosesModel, manifest: dict | None = None, adam: gc.AdamState | None = None) -> None:
    doc = dict(manifest or {})
    doc.update(model.manifest())
    gc.save_checkpoint(path, model.params, doc, adam)


def load_model(path) -> tuple[MosesModel, dict, gc.AdamState | None]:
    arrays, doc, adam = gc.load_checkpoint(path)
    cfg = ModelConfig.from_dict(doc["model"])
    expected = init_parameters(cfg)
    if set(arrays) != set(expected):
        raise gc.ContractError(f"checkpoint parameters do not match the model configuration: "
                               f"{sorted(set(arrays) ^ set(expected))}")
    for name, arr in arrays.items():
        if arr.shape != expected[name].shape:
            raise gc.ContractError(f"parameter {name!r} has shape {arr.shape}, expected {expected[name].shape}")
    params = {k: gc.Parameter(k, v.copy()) for k, v in sorted(arrays.items())}
    return MosesModel(cfg, params), doc, adam

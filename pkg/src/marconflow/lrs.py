"""Conditional linear rational splines.

Each bin ``[u_m, u_{m+1}]`` is split at a virtual knot located at fraction
``lambda_m`` of the bin; on either side the map is a linear-rational function
of the in-bin coordinate. Weights follow the usual construction (``w_a = 1``,
``w_b = sqrt(d_m / d_{m+1})``) which makes the spline C1 at every knot with
the prescribed slopes. Outside ``[-B, B]`` the map is the identity.

All functions take an ``xp`` backend (``gradcore.TAPED`` or
``gradcore.PLAIN``) so the same formulas serve training and fast evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc


@dataclass(frozen=True)
class SplineConfig:
    bins: int = 8
    bound: float = 5.0
    min_bin: float = 1e-3
    min_derivative: float = 1e-3
    min_lambda: float = 0.025

    @property
    def n_raw(self) -> int:
        # widths, heights, interior derivatives, lambdas
        return 4 * self.bins - 1

    def identity_bias(self) -> np.ndarray:
        """Raw parameter vector whose spline is the identity map."""
        raw = np.zeros(self.n_raw)
        b = self.bins
        raw[2 * b : 3 * b - 1] = np.log(np.expm1(1.0 - self.min_derivative))
        return raw


@dataclass
class SplineKnots:
    """Knot positions ``u``/``v``, knot slopes and virtual-knot fractions.

    Shapes: ``u, v, deriv`` are ``(..., bins + 1)``, ``lam`` is ``(..., bins)``.
    """

    u: object
    v: object
    deriv: object
    lam: object


def _cum_matrix(bins: int) -> np.ndarray:
    # column j sums the first j + 1 fractions: interior knot positions
    return np.triu(np.ones((bins, bins - 1)))


def build_knots(raw, cfg: SplineConfig = SplineConfig(), xp=gc.PLAIN) -> SplineKnots:
    """Map unconstrained parameters ``(..., 4*bins - 1)`` to valid knots."""
    b, bound = cfg.bins, cfg.bound
    if xp is gc.PLAIN:
        raw = np.asarray(raw, dtype=np.float64)
    lead = tuple(xp.value(raw).shape[:-1])
    if not lead:
        # matmul needs a batch axis; evaluate as one row and drop it again
        k = build_knots(xp.reshape(raw, (1, cfg.n_raw)), cfg, xp)
        return SplineKnots(*(xp.reshape(a, xp.value(a).shape[1:]) for a in (k.u, k.v, k.deriv, k.lam)))

    def part(lo, hi):
        return xp.gather(raw, np.arange(lo, hi), axis=-1)

    def positions(logits):
        frac = cfg.min_bin + (1.0 - cfg.min_bin * b) * xp.softmax(logits)
        inner = -bound + 2.0 * bound * xp.matmul(frac, _cum_matrix(b))
        return xp.concat(
            [np.full(lead + (1,), -bound), inner, np.full(lead + (1,), bound)], axis=-1
        )

    u = positions(part(0, b))
    v = positions(part(b, 2 * b))
    inner_d = cfg.min_derivative + xp.softplus(part(2 * b, 3 * b - 1))
    ones = np.ones(lead + (1,))
    deriv = xp.concat([ones, inner_d, ones], axis=-1)
    lam = cfg.min_lambda + (1.0 - 2.0 * cfg.min_lambda) * xp.sigmoid(part(3 * b - 1, 4 * b - 1))
    return SplineKnots(u, v, deriv, lam)


def identity_knots(cfg: SplineConfig = SplineConfig()) -> SplineKnots:
    return build_knots(cfg.identity_bias(), cfg)


def _pick(arr, idx, shape, xp):
    have = xp.value(arr).shape
    if len(have) < len(shape) + 1:
        arr = xp.reshape(arr, (1,) * (len(shape) + 1 - len(have)) + have)
    return xp.reshape(xp.gather(arr, idx[..., None], axis=-1), shape)


def _bin_terms(knots: SplineKnots, idx, shape, xp):
    um = _pick(knots.u, idx, shape, xp)
    um1 = _pick(knots.u, idx + 1, shape, xp)
    vm = _pick(knots.v, idx, shape, xp)
    vm1 = _pick(knots.v, idx + 1, shape, xp)
    dm = _pick(knots.deriv, idx, shape, xp)
    dm1 = _pick(knots.deriv, idx + 1, shape, xp)
    lam = _pick(knots.lam, idx, shape, xp)
    width = um1 - um
    height = vm1 - vm
    wb = xp.sqrt(dm / dm1)
    wc = (lam * dm + (1.0 - lam) * wb * dm1) * width / height
    norm = (1.0 - lam) + lam * wb
    rise_left = lam * wb * height / norm  # yc - v_m
    rise_right = (1.0 - lam) * height / norm  # v_{m+1} - yc
    return um, width, vm, height, lam, wb, wc, rise_left, rise_right


def virtual_knots(knots: SplineKnots) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin ``(x, y)`` of the point where the two linear-rational pieces meet."""
    u, v, d, lam = (np.asarray(a) for a in (knots.u, knots.v, knots.deriv, knots.lam))
    width, height = np.diff(u, axis=-1), np.diff(v, axis=-1)
    wb = np.sqrt(d[..., :-1] / d[..., 1:])
    rise_left = lam * wb * height / ((1.0 - lam) + lam * wb)
    return u[..., :-1] + lam * width, v[..., :-1] + rise_left


def _branch(left, lam, wb, wc, rise_left, rise_right, xp):
    scale = xp.where(left, wc * rise_left, wc * rise_right)
    a0 = xp.where(left, lam, wb * (1.0 - lam))
    a1 = xp.where(left, wc - 1.0, wc - wb)
    return scale, a0, a1


def _bin_index(knots_arr, x, bins: int) -> np.ndarray:
    interior = np.asarray(knots_arr)[..., 1:bins]
    return np.sum(interior <= np.asarray(x)[..., None], axis=-1).astype(np.intp)


def spline_forward(knots: SplineKnots, x, cfg: SplineConfig = SplineConfig(), xp=gc.PLAIN):
    """Evaluate the spline; returns ``(y, log|dy/dx|)`` elementwise."""
    if xp is gc.PLAIN:
        x = np.asarray(x, dtype=np.float64)
    xv = xp.value(x)
    shape = np.broadcast_shapes(xv.shape, xp.value(knots.lam).shape[:-1])
    inside = (xv >= -cfg.bound) & (xv <= cfg.bound)
    xs = xp.where(inside, x, 0.0)
    idx = np.broadcast_to(_bin_index(xp.value(knots.u), np.where(inside, xv, 0.0), cfg.bins), shape)
    um, width, vm, height, lam, wb, wc, rl, rr = _bin_terms(knots, idx, shape, xp)
    theta = (xs - um) / width
    left = xp.value(theta) <= xp.value(lam)
    scale, a0, a1 = _branch(left, lam, wb, wc, rl, rr, xp)
    t = xp.where(left, theta, 1.0 - theta)
    den = a0 + a1 * t
    frac = scale * t / den
    y = xp.where(left, vm + frac, (vm + height) - frac)
    logd = xp.log(scale) + xp.log(a0) - 2.0 * xp.log(den) - xp.log(width)
    return xp.where(inside, y, x), xp.where(inside, logd, 0.0)


def spline_inverse(knots: SplineKnots, y, cfg: SplineConfig = SplineConfig(), xp=gc.PLAIN):
    """Closed-form inverse; returns ``(x, log|dx/dy|)`` elementwise."""
    if xp is gc.PLAIN:
        y = np.asarray(y, dtype=np.float64)
    yv = xp.value(y)
    shape = np.broadcast_shapes(yv.shape, xp.value(knots.lam).shape[:-1])
    inside = (yv >= -cfg.bound) & (yv <= cfg.bound)
    ys = xp.where(inside, y, 0.0)
    idx = np.broadcast_to(_bin_index(xp.value(knots.v), np.where(inside, yv, 0.0), cfg.bins), shape)
    um, width, vm, height, lam, wb, wc, rl, rr = _bin_terms(knots, idx, shape, xp)
    left = xp.value(ys) <= xp.value(vm + rl)
    scale, a0, a1 = _branch(left, lam, wb, wc, rl, rr, xp)
    s = xp.where(left, ys - vm, (vm + height) - ys)
    t = s * a0 / (scale - s * a1)
    theta = xp.where(left, t, 1.0 - t)
    x = um + theta * width
    logd = 2.0 * xp.log(a0 + a1 * t) + xp.log(width) - xp.log(scale) - xp.log(a0)
    return xp.where(inside, x, y), xp.where(inside, logd, 0.0)


@dataclass
class FlowHead:
    """Projection from a latent code to raw spline parameters, shared by all variables."""

    weight: object  # M x n_raw
    bias: object  # n_raw
    cfg: SplineConfig = SplineConfig()

    def knots(self, h, xp=gc.PLAIN) -> SplineKnots:
        return build_knots(xp.matmul(h, self.weight) + self.bias, self.cfg, xp)


def separable_transform(h_d, head: FlowHead, z, direction: str = "forward", xp=gc.PLAIN):
    """Apply the per-variable spline conditioned on each row of ``h_d``.

    ``h_d`` is ``(..., K, M)`` and ``z`` is ``(..., K)``. Returns the
    transformed vector and the log-Jacobian summed over the last axis, which is
    exact because the Jacobian is diagonal.
    """
    knots = head.knots(h_d, xp)
    if direction == "forward":
        out, logd = spline_forward(knots, z, head.cfg, xp)
    elif direction == "inverse":
        out, logd = spline_inverse(knots, z, head.cfg, xp)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return out, xp.sum(logd, axis=-1)

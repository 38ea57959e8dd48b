"""Quadrature check that direct marginals equal integrated-out joints, with plots."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import quad_vec

from .lowrank import LOG_2PI
from .lrs import SplineKnots, spline_forward, spline_inverse, virtual_knots
from .model import ConditionalMixture, _select_knots

R3_TOLERANCE = 1e-3
QUAD_EPSABS = 1e-11
QUAD_EPSREL = 1e-9


def evaluation_grid(cond: ConditionalMixture, k: int, n: int = 41, width: float = 4.0) -> np.ndarray:
    """Points spanning ``mu +- width * sd`` of every component, pushed through its spline."""
    marg = cond.marginal([k])
    mu = marg.mean[:, 0]
    sd = np.sqrt(1.0 + marg.scale * np.sum(marg.factor[:, 0] ** 2, axis=-1))
    ends = np.stack([mu - width * sd, mu + width * sd], axis=-1)  # D x 2
    if marg.knots is not None:
        ends, _ = spline_forward(marg.knots, ends, marg.spline)
    return np.linspace(float(ends.min()), float(ends.max()), n)


class DenseComponent:
    """One mixture component's joint density from a dense covariance.

    The Gaussian uses an explicit ``K x K`` covariance, so the evaluation path
    shares nothing with the low-rank algebra it is checked against.
    """

    def __init__(self, cond: ConditionalMixture, d: int):
        self.dim = cond.dim
        self.mean = cond.mean[d]
        u = cond.factor[d]
        cov = np.eye(self.dim) + cond.scale * u @ u.T
        chol = np.linalg.cholesky(cov)
        self.precision = np.linalg.inv(cov)
        self.log_norm = -0.5 * self.dim * LOG_2PI - np.sum(np.log(np.diag(chol)))
        self.knots = None if cond.knots is None else _select_knots(cond.knots, [d], axis=0)
        self.spline = cond.spline
        self.edges = [self._edges(cond, d, j) for j in range(self.dim)]
        self.base_edges = [self._base_edges(cond, d, j) for j in range(self.dim)]

    @staticmethod
    def _edges(cond, d, j) -> np.ndarray:
        """Ends of the pieces on which variable ``j`` has a smooth density."""
        if cond.knots is None:
            return np.array([-np.inf, np.inf])
        bound = cond.spline.bound
        _, virtual = virtual_knots(cond.knots)
        inner = np.concatenate([cond.knots.v[d, j, 1:-1], virtual[d, j]])
        return np.unique(np.concatenate([[-np.inf, -bound, bound, np.inf], inner]))

    @staticmethod
    def _base_edges(cond, d, j) -> np.ndarray:
        """The same pieces seen from the base side of variable ``j``'s spline."""
        if cond.knots is None:
            return np.array([-np.inf, np.inf])
        bound = cond.spline.bound
        virtual_u, _ = virtual_knots(cond.knots)
        inner = np.concatenate([cond.knots.u[d, j, 1:-1], virtual_u[d, j]])
        return np.unique(np.concatenate([[-np.inf, -bound, bound, np.inf], inner]))

    def _knots(self, j: int) -> SplineKnots:
        return SplineKnots(*(a[0, j] for a in (self.knots.u, self.knots.v, self.knots.deriv, self.knots.lam)))

    def via_base(self, j: int, t) -> tuple[np.ndarray, np.ndarray]:
        """Like :meth:`to_base` at ``y = spline(t)``, with ``log spline'(t)`` added so
        that integrating over ``t`` equals integrating over ``y``."""
        t = np.asarray(t, dtype=np.float64)
        if self.knots is None:
            return self.to_base(j, t)
        y, ld_fwd = spline_forward(self._knots(j), t, self.spline)
        r, ld_inv = self.to_base(j, y)
        return r, ld_inv + ld_fwd

    def to_base(self, j: int, y) -> tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=np.float64)
        if self.knots is None:
            return y - self.mean[j], np.zeros_like(y)
        z, ld = spline_inverse(self._knots(j), y, self.spline)
        return z - self.mean[j], ld

    def pdf(self, coords: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        """Density on the broadcast product of per-variable ``(z - mean, log-jacobian)`` arrays."""
        quad = 0.0
        logjac = 0.0
        for i, (ri, li) in enumerate(coords):
            logjac = logjac + li
            for j, (rj, _) in enumerate(coords):
                quad = quad + self.precision[i, j] * ri * rj
        return np.exp(self.log_norm - 0.5 * quad + logjac)


def _piece_nodes(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on one piece; infinite ends via rational substitutions."""
    s, w = np.polynomial.legendre.leggauss(n)
    if np.isfinite(lo) and np.isfinite(hi):
        return 0.5 * (hi - lo) * s + 0.5 * (hi + lo), 0.5 * (hi - lo) * w
    if np.isinf(lo) and np.isinf(hi):
        return s / (1.0 - s * s), w * (1.0 + s * s) / (1.0 - s * s) ** 2
    r = 0.5 * (s + 1.0)  # (0, 1)
    step, jac = r / (1.0 - r), 0.5 / (1.0 - r) ** 2
    return (lo + step, w * jac) if np.isfinite(lo) else (hi - step, w * jac)


class _LineRule:
    """Piecewise Gauss-Legendre over fixed edges; the order doubles until two rules agree."""

    ORDERS = (16, 32, 64, 128, 256, 512)

    def __init__(self, edges: np.ndarray, transform):
        self.pieces = list(zip(edges[:-1], edges[1:]))
        self.transform = transform
        self.cache: dict[int, tuple] = {}

    def nodes(self, n: int):
        if n not in self.cache:
            pts, wts = zip(*(_piece_nodes(lo, hi, n) for lo, hi in self.pieces))
            pts, wts = np.concatenate(pts), np.concatenate(wts)
            self.cache[n] = (self.transform(pts), wts)
        return self.cache[n]

    def integrate(self, f) -> np.ndarray:
        """``f((z - mean, logjac))`` must return values with the node axis last."""
        prev = None
        for n in self.ORDERS:
            coord, wts = self.nodes(n)
            est = f(coord) @ wts
            if prev is not None and np.max(np.abs(est - prev)) <= QUAD_EPSABS + QUAD_EPSREL * np.max(np.abs(est)):
                return est
            prev = est
        raise RuntimeError("piecewise Gauss-Legendre rule did not converge")


def _integrate_out(comp: DenseComponent, k: int, grid: np.ndarray) -> np.ndarray:
    """Adaptive ``quad_vec`` over the first removed variable, split where its density
    is only continuous; an order-adaptive piecewise rule over the second (K = 3).

    With one removed variable the integration runs directly over ``y``.  With two,
    both integrals run over the spline's base coordinate (nodes pushed through the
    forward spline, weighted by its derivative), where the integrand stays smooth
    even when a bin is strongly compressed.
    """
    others = [j for j in range(comp.dim) if j != k]
    rk, lk = comp.to_base(k, grid)
    fixed_k = (rk[:, None], lk[:, None])  # grid x inner-nodes layout
    if len(others) == 1:
        edges, at = comp.edges[others[0]], comp.to_base
        rule = None
    else:
        edges, at = comp.base_edges[others[0]], comp.via_base
        rule = _LineRule(comp.base_edges[others[1]], lambda t: comp.via_base(others[1], t))

    def outer(t: float) -> np.ndarray:
        coords = {k: fixed_k, others[0]: at(others[0], t)}
        if rule is None:
            return comp.pdf([coords[j] for j in range(comp.dim)])[:, 0]

        def inner(rb):
            coords[others[1]] = (rb[0][None, :], rb[1][None, :])
            return comp.pdf([coords[j] for j in range(comp.dim)])

        return rule.integrate(inner)

    total = np.zeros(grid.size)
    for lo, hi in zip(edges[:-1], edges[1:]):
        res, _ = quad_vec(outer, lo, hi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, norm="max")
        total += res
    return total


def quadrature_marginal(cond: ConditionalMixture, k: int, grid: np.ndarray) -> np.ndarray:
    """``int p(y) dy_{-k}`` at ``y_k = grid`` by quadrature over the other variables (K <= 3).

    Components are integrated one at a time (the integral is linear in the
    mixture) so each can be split where its spline density is only continuous.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if cond.dim == 1:
        return cond.pdf(grid[:, None])
    if cond.dim > 3:
        raise ValueError("quadrature oracle supports at most three query variables")
    weights = cond.weights
    return sum(weights[d] * _integrate_out(DenseComponent(cond, d), k, grid) for d in range(len(weights)))


@dataclass
class VariableAudit:
    k: int
    grid: np.ndarray
    direct: np.ndarray
    quadrature: np.ndarray
    hist_centers: np.ndarray
    hist_density: np.ndarray
    rel_error: float

    @property
    def passed(self) -> bool:
        return self.rel_error < R3_TOLERANCE


def relative_error(direct: np.ndarray, reference: np.ndarray) -> float:
    return float(np.max(np.abs(direct - reference)) / np.max(direct))


def audit_conditional(cond: ConditionalMixture, n_grid: int = 41, n_samples: int = 1000,
                      rng: np.random.Generator | None = None, bins: int = 30) -> list[VariableAudit]:
    rng = np.random.default_rng(0) if rng is None else rng
    joint = cond.sample(rng, n_samples)[0] if n_samples else np.zeros((0, cond.dim))
    out = []
    for k in range(cond.dim):
        grid = evaluation_grid(cond, k, n_grid)
        direct = cond.marginal([k]).pdf(grid[:, None])
        quad = quadrature_marginal(cond, k, grid)
        if n_samples:
            dens, edges = np.histogram(joint[:, k], bins=bins, range=(grid[0], grid[-1]), density=False)
            width = edges[1] - edges[0]
            dens = dens / (n_samples * width)
            centers = 0.5 * (edges[1:] + edges[:-1])
        else:
            dens = centers = np.zeros(0)
        out.append(VariableAudit(k, grid, direct, quad, centers, dens, relative_error(direct, quad)))
    return out


def write_audit_csv(path, rows: Sequence[tuple[int, VariableAudit]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "k", "curve", "y", "density"])
        for inst_id, va in rows:
            for y, d in zip(va.grid, va.direct):
                w.writerow([inst_id, va.k, "direct", repr(float(y)), repr(float(d))])
            for y, d in zip(va.grid, va.quadrature):
                w.writerow([inst_id, va.k, "quadrature", repr(float(y)), repr(float(d))])
            for y, d in zip(va.hist_centers, va.hist_density):
                w.writerow([inst_id, va.k, "joint_samples", repr(float(y)), repr(float(d))])


# -- minimal SVG -------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#7f7f7f")


def svg_polylines(curves: Sequence[tuple[str, np.ndarray, np.ndarray]], title: str = "",
                  width: int = 480, height: int = 320, pad: int = 40) -> str:
    """Render ``(label, x, y)`` curves on shared axes."""
    xs = np.concatenate([np.asarray(c[1], float) for c in curves if len(c[1])])
    ys = np.concatenate([np.asarray(c[2], float) for c in curves if len(c[2])])
    x0, x1 = float(xs.min()), float(xs.max())
    y1 = float(ys.max()) if ys.size and ys.max() > 0 else 1.0
    x1 = x1 if x1 > x0 else x0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - y / y1 * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{pad / 2}" text-anchor="middle" font-size="12">{title}</text>',
        f'<text x="{pad}" y="{height - pad / 3}" font-size="10">{x0:.3g}</text>',
        f'<text x="{width - pad}" y="{height - pad / 3}" font-size="10" text-anchor="end">{x1:.3g}</text>',
    ]
    for i, (label, x, y) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="4,3"' if i == 1 else ""
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * (i + 1)}" font-size="10" '
                     f'text-anchor="end" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_audit_svg(path, va: VariableAudit, title: str = "") -> None:
    curves = [("direct marginal", va.grid, va.direct), ("marginalized joint", va.grid, va.quadrature)]
    if va.hist_centers.size:
        curves.append(("joint samples", va.hist_centers, va.hist_density))
    with open(path, "w") as fh:
        fh.write(svg_polylines(curves, title or f"variable {va.k}  rel.err {va.rel_error:.2e}"))

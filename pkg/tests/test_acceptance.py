"""Acceptance criteria 1-9; each test records one PASS/FAIL line at the stated tolerance."""

import math
import time

import numpy as np
import pytest

from marconflow import gradcore as gc
from marconflow import lowrank
from marconflow.audit import evaluation_grid, quadrature_marginal, relative_error
from marconflow.baselines import VARIANTS, variant_config
from marconflow.lowrank import LowRankGaussian
from marconflow.lrs import FlowHead, SplineConfig, build_knots, separable_transform, spline_forward, spline_inverse
from marconflow.metrics import (
    crps_sample,
    energy_score,
    marginal_inconsistency,
    mi_report,
    wasserstein_1d,
)
from marconflow.model import ModelConfig, MosesModel
from marconflow.series import (
    TimeSeriesInstance,
    collate,
    generate_blast,
    generate_circle,
    sample_blast,
    sample_circle,
    split,
)
from marconflow.trainer import TrainConfig, evaluate_njnll, train
from helpers import random_instance, random_model
from oracles import dense_gaussian_logpdf, numerical_jacobian
from test_metrics import InconsistentReference

pytestmark = pytest.mark.slow

# toy training: 14300 draws split 70/10/20 leaves 10010 training instances
TOY_N, TOY_SPLIT = 14300, (0.7, 0.1, 0.2)
TOY_TRAIN = TrainConfig(lr=1e-3, batch_size=64, max_epochs=10**6, max_steps=5000, patience=10, seed=0)
MI_INSTANCES = 100


def toy_config(components, bound=5.0, **flags):
    return ModelConfig(n_channels=2, components=components, latent=16, pos_dim=16, rank=8, null_token=True,
                       spline=SplineConfig(bound=bound), **flags)


def toy_parts(generate):
    data = generate(TOY_N, 0)
    parts = split(data, TOY_SPLIT, 0)
    return tuple(parts.take(data, p) for p in ("train", "validation", "test"))


class Trained:
    def __init__(self, cfg, parts, train_cfg=TOY_TRAIN):
        start = time.perf_counter()
        self.model, self.report = train(MosesModel(cfg, seed=0), parts[0], parts[1], train_cfg)
        self.seconds = time.perf_counter() - start
        self.test = parts[2]
        self.steps = len(self.report.step_losses)


@pytest.fixture(scope="module")
def blast_parts():
    return toy_parts(generate_blast)


@pytest.fixture(scope="module")
def blast_moses(blast_parts):
    return Trained(toy_config(1), blast_parts)


@pytest.fixture(scope="module")
def blast_gmm(blast_parts):
    return Trained(variant_config(toy_config(1), VARIANTS["gmm"]), blast_parts)


@pytest.fixture(scope="module")
def circle_moses():
    # base variance is at least one and the flow is the identity beyond the spline
    # bound, so the bound must sit well outside the data for light model tails
    return Trained(toy_config(4, bound=10.0), toy_parts(generate_circle))


def toy_query(k_query):
    """Empty context; the two trained channels at the toy query time, then a later extra point."""
    qry = [[1.0, 1], [1.0, 2], [1.5, 1]][:k_query]
    return TimeSeriesInstance(np.zeros((0, 3)), qry, np.zeros(k_query))


# -- 1 -------------------------------------------------------------------------------------


def test_criterion_1_marginalization_consistency(acceptance, blast_moses, circle_moses, blast_parts):
    short = Trained(toy_config(4), blast_parts, TrainConfig(lr=1e-3, batch_size=64, max_epochs=10**6,
                                                            max_steps=500, seed=0))
    cases = []
    for i in range(20):
        k_query, d = 2 + i % 2, (1, 4)[(i // 2) % 2]
        cfg = ModelConfig(n_channels=2, components=d, latent=8, pos_dim=4, heads=2, rank=2)
        model = random_model(cfg, 100 + i)
        cases.append((f"random{i}", model.conditional(random_instance(np.random.default_rng(100 + i),
                                                                      n_query=k_query))))
    for name, trained, k_query in (("blast-D1", blast_moses, 2), ("blast-D1", blast_moses, 3),
                                   ("circle-D4", circle_moses, 2), ("circle-D4", circle_moses, 3),
                                   ("blast-D4", short, 3)):
        cases.append((f"{name}-K{k_query}", trained.model.conditional(toy_query(k_query))))

    start = time.perf_counter()
    worst, worst_case = 0.0, None
    for name, cond in cases:
        for k in range(cond.dim):
            grid = evaluation_grid(cond, k, 41)
            err = relative_error(cond.marginal([k]).pdf(grid[:, None]), quadrature_marginal(cond, k, grid))
            if err > worst:
                worst, worst_case = err, f"{name}/var{k}"
    seconds = time.perf_counter() - start
    passed = worst < 1e-3 and seconds < 300
    acceptance(1, passed, f"{len(cases)} models, max rel. error {worst:.2e} ({worst_case}) < 1e-3, "
                          f"quadrature time {seconds:.0f}s < 300s")
    assert passed


# -- 2 -------------------------------------------------------------------------------------


def sample_floor(sampler, seed, n=1000):
    """Mean over variables of WD2 between two independent n-draws of the true toy data."""
    a, b = sampler(n, seed), sampler(n, seed + 1)
    return float(np.mean([wasserstein_1d(a[:, k], b[:, k]) for k in range(2)]))


def test_criterion_2_toy_marginal_inconsistency(acceptance, blast_moses, circle_moses):
    lines, passed = [], True
    for name, trained, sampler in (("Blast MOSES(1)", blast_moses, sample_blast),
                                   ("Circle MOSES(4)", circle_moses, sample_circle)):
        rep = mi_report(trained.model, trained.test[:MI_INSTANCES], n_samples=1000, seed=0)
        data_floor = np.mean([sample_floor(sampler, 1000 + 2 * s) for s in range(MI_INSTANCES)])
        ok = rep.value <= 0.1 and trained.seconds < 1200 and trained.steps <= 5000
        passed &= ok
        lines.append(f"{name} MI {rep.value:.3f} +- {rep.stderr:.3f} (model noise floor "
                     f"{rep.extra['noise_floor']:.3f}, data noise floor {data_floor:.3f}) "
                     f"{'<=' if rep.value <= 0.1 else '>'} 0.1, {trained.steps} steps, {trained.seconds:.0f}s")
    acceptance(2, passed, "; ".join(lines))
    assert passed


# -- 3 -------------------------------------------------------------------------------------


def test_criterion_3_flows_beat_gaussian_mixture(acceptance, blast_moses, blast_gmm):
    moses = evaluate_njnll(blast_moses.model, blast_moses.test)
    gmm = evaluate_njnll(blast_gmm.model, blast_gmm.test)
    passed = gmm - moses >= 0.2
    acceptance(3, passed, f"Blast test njNLL MOSES(1) {moses:.3f} vs GMM(1) {gmm:.3f}, gap {gmm - moses:.3f} >= 0.2")
    assert passed


# -- 4 -------------------------------------------------------------------------------------


def test_criterion_4_low_rank_algebra(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        k, rank = int(rng.integers(1, 51)), int(rng.integers(1, 9))
        g = LowRankGaussian(rng.normal(size=k), rng.uniform(0.1, 3.0) * rng.normal(size=(k, rank)),
                            1.0 / math.sqrt(rank))
        cov = g.covariance()
        z = g.mean + 2 * rng.normal(size=k)
        worst = max(worst, abs(lowrank.log_density(g, z) - dense_gaussian_logpdf(g.mean, cov, z)))
        # at the mean only the normalizer (and so the log-determinant) is left
        at_mean = -2 * lowrank.log_density(g, g.mean) - k * math.log(2 * math.pi)
        worst = max(worst, abs(at_mean - np.linalg.slogdet(cov)[1]))

    g = LowRankGaussian(rng.normal(size=2000), rng.normal(size=(2000, 16)), 0.25)
    z = rng.normal(size=2000)
    lowrank.log_density(g, z)
    timings = []
    for _ in range(5):
        start = time.perf_counter()
        lowrank.log_density(g, z)
        timings.append(time.perf_counter() - start)
    ms = 1000 * min(timings)
    passed = worst < 1e-9 and ms < 50
    acceptance(4, passed, f"200 cases max |low-rank - dense| {worst:.1e} < 1e-9; K=2000 M'=16 log-density "
                          f"{ms:.2f} ms < 50 ms")
    assert passed


# -- 5 -------------------------------------------------------------------------------------


def test_criterion_5_spline_bijection(acceptance):
    cfg = SplineConfig()
    rng = np.random.default_rng(5)

    knots = build_knots(3.0 * rng.normal(size=(10_000, cfg.n_raw)), cfg)
    u = rng.uniform(-1.5 * cfg.bound, 1.5 * cfg.bound, 10_000)
    y, ld = spline_forward(knots, u, cfg)
    back, ild = spline_inverse(knots, y, cfg)
    round_trip = float(np.abs(back - u).max())

    grid_knots = build_knots(3.0 * rng.normal(size=(500, 1, cfg.n_raw)), cfg)
    x = np.broadcast_to(np.linspace(-1.5 * cfg.bound, 1.5 * cfg.bound, 2001), (500, 2001))
    fy, _ = spline_forward(grid_knots, x, cfg)
    iy, _ = spline_inverse(grid_knots, x, cfg)
    violations = int(np.sum(np.diff(fy, axis=-1) < 0) + np.sum(np.diff(iy, axis=-1) < 0))

    at = grid_knots.u[:, 0, :]
    left = np.exp(spline_forward(grid_knots, np.nextafter(at, -np.inf), cfg)[1])
    right = np.exp(spline_forward(grid_knots, np.nextafter(at, np.inf), cfg)[1])
    c1 = float(max(np.abs(left - right).max(), np.abs(right - grid_knots.deriv[:, 0, :]).max()))

    logdet = 0.0
    for seed in range(20):
        r = np.random.default_rng(1000 + seed)
        # head weights scaled like the initializer (1 / sqrt(fan_in)); much steeper knots push the
        # finite-difference oracle itself into roundoff
        head = FlowHead(0.5 * r.normal(size=(4, cfg.n_raw)), r.normal(size=cfg.n_raw))
        h, z = r.normal(size=(3, 4)), 2 * r.normal(size=3)
        for direction in ("forward", "inverse"):
            _, ld3 = separable_transform(h, head, z, direction)
            jac = numerical_jacobian(lambda v: separable_transform(h, head, v, direction)[0], z)
            logdet = max(logdet, abs(ld3 - np.linalg.slogdet(jac)[1]))

    passed = round_trip < 1e-8 and violations == 0 and c1 < 1e-8 and logdet < 1e-5
    acceptance(5, passed, f"round trip {round_trip:.1e} < 1e-8; monotonicity violations {violations}; "
                          f"C1 knot mismatch {c1:.1e} < 1e-8; K=3 log|det| error {logdet:.1e} < 1e-5")
    assert passed


# -- 6 -------------------------------------------------------------------------------------


def test_criterion_6_permutation_invariance(acceptance):
    cfg = ModelConfig(n_channels=2, components=3, latent=8, pos_dim=4, heads=2, rank=2)
    model = random_model(cfg, 6)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        inst = random_instance(rng, n_context=int(rng.integers(1, 8)), n_query=int(rng.integers(1, 5)))
        instances = [inst]
        for _ in range(10):
            pc, pq = rng.permutation(inst.n_context), rng.permutation(inst.n_query)
            instances.append(TimeSeriesInstance(inst.context[pc], inst.query[pq], inst.answer[pq]))
        joint = model.batch_log_density(collate(instances))[0]
        worst = max(worst, float(np.abs(joint[1:] - joint[0]).max()))
    passed = worst < 1e-12
    acceptance(6, passed, f"100 instances x 10 permutations, max |delta log_joint| {worst:.1e} < 1e-12")
    assert passed


# -- 7 -------------------------------------------------------------------------------------


def test_criterion_7_gradient_integrity(acceptance):
    cfg = ModelConfig(n_channels=2, components=2, latent=4, pos_dim=3, heads=2, rank=2)
    model = random_model(cfg, 7)
    batch = collate([random_instance(np.random.default_rng(7))])
    with gc.Tape(model.params) as tape:
        loss = gc.TAPED.sum(model.batch_log_density(batch, gc.TAPED)[0])
    grads = gc.backward(tape, loss)

    rng = np.random.default_rng(77)
    names = sorted(model.params)
    picks = [(n, tuple(rng.integers(0, s) for s in model.params[n].data.shape)) for n in names]
    while len(picks) < 50:
        n = names[rng.integers(len(names))]
        picks.append((n, tuple(rng.integers(0, s) for s in model.params[n].data.shape)))

    worst, worst_at, step = 0.0, None, 1e-6
    for name, idx in picks[:50]:
        p = model.params[name]
        old = p.data[idx]
        vals = []
        for h in (step, -step):
            p.data[idx] = old + h
            vals.append(float(model.batch_log_density(batch)[0][0]))
        p.data[idx] = old
        fd = (vals[0] - vals[1]) / (2 * step)
        # relative error, with a floor below which the difference is judged absolutely
        err = abs(grads[name][idx] - fd) / max(abs(fd), 1e-3)
        if err >= worst:
            worst, worst_at = err, name
    passed = worst < 1e-4
    acceptance(7, passed, f"50 scalars over {len(names)} parameter tensors, max rel. error {worst:.1e} "
                          f"({worst_at}) < 1e-4")
    assert passed


# -- 8 -------------------------------------------------------------------------------------


def test_criterion_8_sampler(acceptance):
    cfg = ModelConfig(n_channels=2, components=3, latent=8, pos_dim=4, heads=2, rank=2)
    cond = random_model(cfg, 8).conditional(random_instance(np.random.default_rng(8)))
    _, comp = cond.sample(np.random.default_rng(80), 10_000)
    freq = np.bincount(comp, minlength=3) / 10_000
    dev = float(np.abs(freq - cond.weights).max())

    rng = np.random.default_rng(81)
    g = LowRankGaussian(rng.normal(size=3), rng.normal(size=(3, 2)), 1.0 / math.sqrt(2))
    z = lowrank.sample(g, np.random.default_rng(82), 100_000)
    frob = float(np.linalg.norm(np.cov(z.T) - g.covariance()))

    passed = dev < 0.02 and frob < 0.05
    acceptance(8, passed, f"component frequency max deviation {dev:.4f} < 0.02 (weights "
                          f"{np.round(cond.weights, 3).tolist()}); covariance Frobenius error {frob:.4f} < 0.05")
    assert passed


# -- 9 -------------------------------------------------------------------------------------


def test_criterion_9_metric_suite(acceptance):
    table = [
        ("wd identical", wasserstein_1d([1.0, 5.0, -2.0], [1.0, 5.0, -2.0]), 0.0),
        ("wd single pair", wasserstein_1d([0.0], [3.0]), 3.0),
        ("wd sorting", wasserstein_1d([0.0, 1.0], [1.0, 0.0]), 0.0),
        ("crps point mass", crps_sample([2.5, 2.5, 2.5], 2.5), 0.0),
        ("crps {0,2} at 1", crps_sample([0.0, 2.0], 1.0), 0.0),
        ("energy point mass", energy_score([[1.0, 2.0], [1.0, 2.0]], [1.0, 2.0]), 0.0),
        ("energy two samples", energy_score([[0.0, 0.0], [2.0, 0.0]], [1.0, 0.0]), 0.0),
        ("energy K=1 is crps", energy_score([[0.0], [1.0], [4.0]], [2.0]), crps_sample([0.0, 1.0, 4.0], 2.0)),
    ]
    wrong = [name for name, got, want in table if got != want]
    mi = marginal_inconsistency(InconsistentReference(), 1000, np.random.default_rng(9)).mi
    passed = not wrong and abs(mi - 1.0) < 0.1
    acceptance(9, passed, f"{len(table) - len(wrong)}/{len(table)} example values exact"
                          f"{' (wrong: ' + ', '.join(wrong) + ')' if wrong else ''}; "
                          f"inconsistent reference MI {mi:.3f} within 1 +- 0.1")
    assert passed

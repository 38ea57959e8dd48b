"""Mixture of separable flows: densities, marginals, sampling, gradients and checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from marconflow import gradcore as gc
from marconflow.audit import DenseComponent, _piece_nodes, evaluation_grid, quadrature_marginal, relative_error
from marconflow.lrs import SplineConfig, spline_inverse
from marconflow.model import ModelConfig, MosesModel, init_parameters, load_model, save_model
from marconflow.series import TimeSeriesInstance, collate
from helpers import random_instance, random_model
from oracles import LOG_2PI, dense_gaussian_logpdf

CFG = ModelConfig(n_channels=2, components=3, latent=8, pos_dim=4, heads=2, rank=2)


def standard_normal_model(k_channels=2):
    cfg = ModelConfig(n_channels=k_channels, components=1, latent=4, pos_dim=2, rank=2)
    params = init_parameters(cfg)
    params["gauss.mean"].data[:] = 0.0
    params["gauss.cov"].data[:] = 0.0
    return MosesModel(cfg, params)


class TestLogDensity:
    def test_identity_model_is_standard_normal(self):
        inst = random_instance(np.random.default_rng(0))
        res = standard_normal_model().log_density(inst)
        expect = -0.5 * (3 * LOG_2PI + np.sum(inst.answer ** 2))
        assert res.log_joint == pytest.approx(expect, abs=1e-12)

    def test_joint_is_logsumexp_of_components(self):
        model = random_model(CFG, 1)
        res = model.log_density(random_instance(np.random.default_rng(1)))
        combined = np.logaddexp.reduce(res.log_weights + res.component_log_densities)
        assert abs(res.log_joint - combined) < 1e-12
        assert abs(np.exp(res.log_weights).sum() - 1) < 1e-12

    def test_component_matches_dense_oracle(self):
        model = random_model(CFG, 2)
        inst = random_instance(np.random.default_rng(2))
        cond = model.conditional(inst)
        res = model.log_density(inst)
        for d in range(3):
            comp = DenseComponent(cond, d)
            z, ld = zip(*(comp.to_base(j, inst.answer[j]) for j in range(3)))
            expect = dense_gaussian_logpdf(np.zeros(3), np.linalg.inv(comp.precision), np.array(z)) + sum(ld)
            assert res.component_log_densities[d] == pytest.approx(expect, abs=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(CFG, seed % 7)
        inst = random_instance(rng, n_context=6, n_query=4)
        cp, qp = rng.permutation(6), rng.permutation(4)
        other = TimeSeriesInstance(inst.context[cp], inst.query[qp], inst.answer[qp])
        assert abs(model.log_density(other).log_joint - model.log_density(inst).log_joint) < 1e-12

    def test_padding_invariance(self):
        rng = np.random.default_rng(3)
        model = random_model(CFG, 3)
        a, b = random_instance(rng, n_context=2, n_query=1), random_instance(rng, n_context=7, n_query=5)
        alone = model.batch_log_density(collate([a]))[0][0]
        padded = model.batch_log_density(collate([a, b]))[0][0]
        assert abs(alone - padded) < 1e-12

    def test_empty_context_with_null_token(self):
        cfg = ModelConfig(n_channels=2, components=2, latent=8, pos_dim=4, null_token=True)
        inst = TimeSeriesInstance(np.zeros((0, 3)), [[1.0, 1], [1.0, 2]], [0.3, -0.2])
        assert math.isfinite(random_model(cfg, 4).log_density(inst).log_joint)

    def test_normalization(self):
        cfg = ModelConfig(n_channels=2, components=2, latent=8, pos_dim=4, rank=2)
        cond = random_model(cfg, 5).conditional(random_instance(np.random.default_rng(5), n_query=2))
        # y_0 integrated out adaptively, then a piecewise Gauss-Legendre rule over y_1
        edges = np.unique(np.concatenate([DenseComponent(cond, d).edges[1] for d in range(2)]))
        nodes, wts = zip(*(_piece_nodes(lo, hi, 48) for lo, hi in zip(edges[:-1], edges[1:])))
        total = quadrature_marginal(cond, 1, np.concatenate(nodes)) @ np.concatenate(wts)
        assert abs(total - 1.0) < 1e-3

    def test_disabled_flows_are_gaussian_mixture(self):
        cfg = ModelConfig(n_channels=2, components=1, latent=8, pos_dim=4, rank=2, disable_flows=True)
        model = random_model(cfg, 6)
        inst = random_instance(np.random.default_rng(6))
        cond = model.conditional(inst)
        cov = np.eye(3) + cond.scale * cond.factor[0] @ cond.factor[0].T
        expect = dense_gaussian_logpdf(cond.mean[0], cov, inst.answer)
        assert model.log_density(inst).log_joint == pytest.approx(expect, abs=1e-10)


    def test_non_finite_names_component_and_variable(self):
        model = random_model(CFG, 19)
        model.params["gauss.mean"].data[:] = np.nan
        inst = random_instance(np.random.default_rng(19))
        with pytest.raises(gc.NumericalError, match="component 0, variable 0"):
            model.log_density(inst)
        with pytest.raises(gc.NumericalError, match="Gaussian mean at component 0, variable 0"):
            model.conditional(inst)


class TestMarginals:
    def test_full_subset_equals_joint(self):
        model = random_model(CFG, 7)
        inst = random_instance(np.random.default_rng(7))
        assert model.marginal_log_density(inst, [0, 1, 2]).log_joint == model.log_density(inst).log_joint

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_equals_encoding_the_subquery(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(CFG, seed % 5)
        inst = random_instance(rng, n_query=4)
        subset = np.sort(rng.choice(4, size=int(rng.integers(1, 5)), replace=False))
        direct = model.log_density(inst.subquery(subset)).log_joint
        assert abs(model.marginal_log_density(inst, subset).log_joint - direct) < 1e-12

    def test_univariate_handles_match_marginal_density(self):
        model = random_model(CFG, 8)
        inst = random_instance(np.random.default_rng(8))
        for k, handle in enumerate(model.predict_univariate_marginals(inst)):
            direct = model.marginal_log_density(inst, [k]).log_joint
            assert float(handle.log_pdf(inst.answer[k : k + 1])) == pytest.approx(direct, abs=1e-12)

    def test_marginal_of_mixture_is_mixture_of_marginals(self):
        model = random_model(CFG, 9)
        inst = random_instance(np.random.default_rng(9))
        res = model.marginal_log_density(inst, [2, 0])
        cond = model.conditional(inst).marginal([2, 0])
        np.testing.assert_allclose(res.component_log_densities, cond.component_log_pdf(inst.answer[[2, 0]]),
                                   atol=1e-12)
        np.testing.assert_array_equal(res.log_weights, model.log_density(inst).log_weights)

    @pytest.mark.parametrize("subset", [[], [0, 0], [3]])
    def test_bad_subsets(self, subset):
        with pytest.raises(ValueError):
            random_model(CFG, 0).marginal_log_density(random_instance(np.random.default_rng(0)), subset)

    def test_univariate_pdf_integrates_to_one(self):
        model = random_model(CFG, 10)
        handle = model.predict_univariate_marginals(random_instance(np.random.default_rng(10)))[1]
        edges = DenseComponent(handle, 0).edges[0]
        for d in range(1, 3):
            edges = np.union1d(edges, DenseComponent(handle, d).edges[0])
        total = sum(integrate.quad(lambda t: float(handle.pdf([t])), lo, hi, epsabs=1e-12, limit=200)[0]
                    for lo, hi in zip(edges[:-1], edges[1:]))
        assert abs(total - 1.0) < 1e-4

    @pytest.mark.parametrize("seed, k_query", [(11, 2), (12, 3)])
    def test_direct_marginal_matches_quadrature(self, seed, k_query):
        model = random_model(CFG, seed)
        cond = model.conditional(random_instance(np.random.default_rng(seed), n_query=k_query))
        for k in range(k_query):
            grid = evaluation_grid(cond, k, 41)
            direct = cond.marginal([k]).pdf(grid[:, None])
            assert relative_error(direct, quadrature_marginal(cond, k, grid)) < 1e-3


class TestSampling:
    def test_identity_model_is_standard_normal(self):
        inst = TimeSeriesInstance([[0.0, 1, 0.0]], [[1.0, 1]], [0.0])
        y, _ = standard_normal_model().sample(inst, np.random.default_rng(0), 10_000)
        assert abs(y.mean()) < 0.05 and 0.9 < y.var() < 1.1

    def test_component_frequencies(self):
        model = random_model(CFG, 13)
        cond = model.conditional(random_instance(np.random.default_rng(13)))
        _, comp = cond.sample(np.random.default_rng(1), 10_000)
        freq = np.bincount(comp, minlength=3) / 10_000
        assert np.abs(freq - cond.weights).max() < 0.02

    def test_reproducible(self):
        model = random_model(CFG, 14)
        inst = random_instance(np.random.default_rng(14))
        a = model.sample(inst, np.random.default_rng(5), 20)
        b = model.sample(inst, np.random.default_rng(5), 20)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_single_draw(self):
        y, comp = random_model(CFG, 15).sample(random_instance(np.random.default_rng(15)), np.random.default_rng(0))
        assert y.shape == (3,) and isinstance(comp, int)

    def test_samples_follow_marginal_cdf(self):
        model = random_model(CFG, 16)
        cond = model.conditional(random_instance(np.random.default_rng(16)))
        y, _ = cond.sample(np.random.default_rng(2), 20_000)
        marg = cond.marginal([0])
        grid = evaluation_grid(cond, 0, 41)
        # exact mixture CDF: sum_d w_d Phi((spline^-1(y) - mu_d) / sd_d)
        z, _ = spline_inverse(marg.knots, np.broadcast_to(grid[:, None, None], (41, 3, 1)), marg.spline)
        sd = np.sqrt(1 + marg.scale * np.sum(marg.factor ** 2, axis=-1))
        cdf = special.ndtr((z - marg.mean) / sd)[..., 0] @ marg.weights
        ecdf = np.searchsorted(np.sort(y[:, 0]), grid, side="right") / 20_000
        assert np.abs(ecdf - cdf).max() < 0.015


class TestGradients:
    def test_every_group_matches_finite_differences(self):
        cfg = ModelConfig(n_channels=2, components=2, latent=4, pos_dim=3, heads=2, rank=2)
        model = random_model(cfg, 17)
        inst = random_instance(np.random.default_rng(17))
        batch = collate([inst])
        with gc.Tape(model.params) as tape:
            out = model.batch_log_density(batch, gc.TAPED)[0]
            loss = gc.TAPED.sum(out)
        grads = gc.backward(tape, loss)
        rng = np.random.default_rng(0)
        for name, p in model.params.items():
            idx = tuple(rng.integers(0, s) for s in p.data.shape)
            old = p.data[idx]
            vals = []
            for step in (1e-6, -1e-6):
                p.data[idx] = old + step
                vals.append(float(model.batch_log_density(batch)[0][0]))
            p.data[idx] = old
            fd = (vals[0] - vals[1]) / 2e-6
            assert abs(grads[name][idx] - fd) <= 1e-4 * max(abs(fd), 1e-3), name

    def test_every_group_receives_gradient(self):
        cfg = ModelConfig(n_channels=2, components=2, latent=4, pos_dim=3, heads=2, rank=2)
        model = random_model(cfg, 18)
        rng = np.random.default_rng(18)
        batch = collate([random_instance(rng) for _ in range(4)])
        with gc.Tape(model.params) as tape:
            loss = gc.TAPED.sum(model.batch_log_density(batch, gc.TAPED)[0])
        grads = gc.backward(tape, loss)
        # these two only shift every mixture logit equally, which the softmax cancels
        shift = {"mix.bo", "mix.proj_b"}
        assert all(np.any(g != 0) for k, g in grads.items() if k not in shift)
        for k in shift:
            np.testing.assert_allclose(grads[k], 0.0, atol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = ModelConfig(n_channels=2, components=2, latent=4, pos_dim=3, spline=SplineConfig(bins=4, bound=3.0))
        model = random_model(cfg, 19)
        save_model(tmp_path / "m.ckpt", model, {"note": "x"})
        back, doc, adam = load_model(tmp_path / "m.ckpt")
        assert back.cfg == cfg and doc["note"] == "x" and adam is None
        inst = random_instance(np.random.default_rng(19))
        assert back.log_density(inst).log_joint == model.log_density(inst).log_joint

    def test_shape_mismatch(self, tmp_path):
        model = random_model(CFG, 20)
        doc = model.manifest()
        doc["model"]["latent"] = 4
        gc.save_checkpoint(tmp_path / "m.ckpt", model.params, doc)
        with pytest.raises(gc.ContractError):
            load_model(tmp_path / "m.ckpt")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(latent=6, heads=4)
        with pytest.raises(ValueError):
            ModelConfig(components=0)

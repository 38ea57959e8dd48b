"""Randomized models and instances shared by several test modules."""

import numpy as np

from marconflow import gradcore as gc
from marconflow.model import ModelConfig, MosesModel, init_parameters
from marconflow.series import TimeSeriesInstance


# noise per parameter group: large enough for non-identity splines and correlated
# bases, small enough that most mass stays inside the spline range
NOISE = {"gauss": 0.5, "flow": 1.5}


def random_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.2) -> MosesModel:
    """Initial parameters plus Gaussian noise, so flows and covariances are far from identity."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, p in init_parameters(cfg, seed).items():
        s = scale * NOISE.get(name.split(".")[0], 1.0)
        params[name] = gc.Parameter(name, p.data + s * rng.normal(size=p.data.shape))
    return MosesModel(cfg, params)


def random_instance(rng, n_channels: int = 2, n_context: int = 5, n_query: int = 3) -> TimeSeriesInstance:
    ctx = np.column_stack([
        np.sort(rng.uniform(0, 1, n_context)),
        rng.integers(1, n_channels + 1, n_context),
        rng.normal(size=n_context),
    ])
    qry = np.column_stack([rng.uniform(1.0, 1.5, n_query), rng.integers(1, n_channels + 1, n_query)])
    return TimeSeriesInstance(ctx, qry, rng.normal(size=n_query) * 2)

"""njNLL, mNLL, marginal inconsistency, CRPS and energy score."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .series import TimeSeriesInstance


@dataclass
class MetricReport:
    metric: str
    value: float
    stderr: float
    n: int  # instances, or Monte-Carlo samples per distribution for sampled metrics
    dataset: str = ""
    model: str = ""
    per_instance: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "metric": self.metric, "dataset": self.dataset, "model": self.model,
            "value": self.value, "stderr": self.stderr, "n": self.n,
        }

    def to_dict(self) -> dict:
        return asdict(self)


CSV_FIELDS = ["metric", "dataset", "model", "value", "stderr", "n"]


def write_reports(reports: Sequence[MetricReport], csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for r in reports:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)


def _summary(name: str, values: Sequence[float], n: int | None = None, **kw) -> MetricReport:
    arr = np.asarray(values, dtype=np.float64)
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return MetricReport(name, float(arr.mean()), se, arr.size if n is None else n,
                        per_instance=arr.tolist(), **kw)


def parallel_map(fn, items: Sequence, threads: int = 1) -> list:
    """Ordered map; results are reduced in input order whatever the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per instance so results do not depend on evaluation order."""
    return np.random.default_rng([seed, index])


# -- sample-based scores -------------------------------------------------------------


def wasserstein_1d(a, b) -> float:
    """Empirical 2-Wasserstein distance between equal-size samples on the line."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("samples must be nonempty")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def crps_sample(samples, y: float) -> float:
    s = np.asarray(samples, dtype=np.float64).ravel()
    n = s.size
    if n < 2:
        raise ValueError("CRPS needs at least two samples")
    pair = np.abs(s[:, None] - s[None, :]).sum() / (n * (n - 1))
    return float(np.mean(np.abs(s - y)) - 0.5 * pair)


def energy_score(samples, y, p: float = 1.0) -> float:
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if s.shape[0] < 2:
        raise ValueError("energy score needs at least two samples")
    if s.shape[1] != y.size:
        raise ValueError("sample dimension does not match y")
    to_y = np.linalg.norm(s - y, axis=1) ** p
    pair = pdist(s) ** p  # each unordered pair once, so mean == ordered-pair mean
    return float(to_y.mean() - 0.5 * pair.mean())


# -- marginal inconsistency ------------------------------------------------------------


class JointSampler(Protocol):
    def sample_joint(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    def sample_marginal(self, k: int, rng: np.random.Generator, n: int) -> np.ndarray: ...


class ModelPredictor:
    """Adapter exposing joint and direct-marginal sampling of a trained model for one instance."""

    def __init__(self, model, instance: TimeSeriesInstance):
        self.cond = model.conditional(instance)
        self.marginals = model.predict_univariate_marginals(instance)

    @property
    def dim(self) -> int:
        return self.cond.dim

    def sample_joint(self, rng, n):
        return self.cond.sample(rng, n)[0]

    def sample_marginal(self, k, rng, n):
        return self.marginals[k].sample(rng, n)[0][:, 0]


@dataclass
class InconsistencyResult:
    mi: float
    per_variable: list[float]
    noise_floor: float
    n_samples: int


def marginal_inconsistency(predictor, n_samples: int = 1000, rng: np.random.Generator | None = None,
                           dim: int | None = None) -> InconsistencyResult:
    """Mean over k of WD2(joint coordinate k, direct marginal k).

    The noise floor is the same statistic between two independent joint sample
    sets, i.e. what a perfectly consistent model scores at this sample size.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    k_dim = dim if dim is not None else predictor.dim
    if k_dim < 1:
        raise ValueError("need at least one query variable")
    joint = np.asarray(predictor.sample_joint(rng, n_samples)).reshape(n_samples, k_dim)
    per_var = [
        wasserstein_1d(joint[:, k], predictor.sample_marginal(k, rng, n_samples)) for k in range(k_dim)
    ]
    other = np.asarray(predictor.sample_joint(rng, n_samples)).reshape(n_samples, k_dim)
    floor = float(np.mean([wasserstein_1d(joint[:, k], other[:, k]) for k in range(k_dim)]))
    return InconsistencyResult(float(np.mean(per_var)), per_var, floor, n_samples)


def mi_report(model, instances: Sequence[TimeSeriesInstance], /, n_samples: int = 1000, seed: int = 0,
              threads: int = 1, **kw) -> MetricReport:
    results = parallel_map(
        lambda i: marginal_inconsistency(ModelPredictor(model, instances[i]), n_samples, instance_rng(seed, i)),
        range(len(instances)), threads,
    )
    rep = _summary("mi", [r.mi for r in results], n=n_samples, **kw)
    rep.extra = {"noise_floor": float(np.mean([r.noise_floor for r in results])),
                 "n_instances": len(results)}
    return rep


# -- likelihoods -------------------------------------------------------------------------


def njnll(model, instances: Sequence[TimeSeriesInstance], /, threads: int = 1, **kw) -> MetricReport:
    vals = parallel_map(lambda inst: -model.log_density(inst).log_joint / inst.n_query, instances, threads)
    return _summary("njnll", vals, **kw)


def _mnll_terms(model, inst: TimeSeriesInstance) -> list[float]:
    margs = model.predict_univariate_marginals(inst)
    return [-float(m.log_pdf(inst.answer[k : k + 1])) for k, m in enumerate(margs)]


def mnll(model, instances: Sequence[TimeSeriesInstance], /, threads: int = 1, **kw) -> MetricReport:
    """Mean over all scalar targets of the direct univariate negative log-likelihood."""
    terms = parallel_map(lambda inst: _mnll_terms(model, inst), instances, threads)
    return _summary("mnll", [v for t in terms for v in t], **kw)


def _crps_terms(model, inst, n_samples, rng) -> list[float]:
    margs = model.predict_univariate_marginals(inst)
    return [crps_sample(m.sample(rng, n_samples)[0][:, 0], inst.answer[k]) for k, m in enumerate(margs)]


def crps_report(model, instances: Sequence[TimeSeriesInstance], /, n_samples: int = 1000, seed: int = 0,
                threads: int = 1, **kw) -> MetricReport:
    terms = parallel_map(lambda i: _crps_terms(model, instances[i], n_samples, instance_rng(seed, i)),
                         range(len(instances)), threads)
    return _summary("crps", [v for t in terms for v in t], n=n_samples, **kw)


def energy_report(model, instances: Sequence[TimeSeriesInstance], /, n_samples: int = 1000, seed: int = 0,
                  threads: int = 1, **kw) -> MetricReport:
    vals = parallel_map(
        lambda i: energy_score(model.sample(instances[i], instance_rng(seed, i), n_samples)[0], instances[i].answer),
        range(len(instances)), threads,
    )
    return _summary("energy", vals, n=n_samples, **kw)


SAMPLED_METRICS = {"mi", "crps", "energy"}
METRICS = {"njnll": njnll, "mnll": mnll, "mi": mi_report, "crps": crps_report, "energy": energy_report}

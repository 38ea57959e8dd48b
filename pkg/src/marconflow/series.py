"""Irregular time series instances, JSONL/CSV I/O, toy generators, splits, batching."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TOY_QUERY_TIME = 1.0


class DataValidationError(ValueError):
    pass


@dataclass
class TimeSeriesInstance:
    """Context triplets ``(t, c, v)``, query pairs ``(t, c)`` and answers.

    Channel ids are 1-based.
    """

    context: np.ndarray  # N x 3
    query: np.ndarray  # K x 2
    answer: np.ndarray  # K

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64).reshape(-1, 3)
        self.query = np.asarray(self.query, dtype=np.float64).reshape(-1, 2)
        self.answer = np.asarray(self.answer, dtype=np.float64).reshape(-1)

    @property
    def n_context(self) -> int:
        return len(self.context)

    @property
    def n_query(self) -> int:
        return len(self.query)

    def validate(self, n_channels: int | None = None) -> None:
        if self.n_query < 1:
            raise DataValidationError("query must contain at least one entry")
        if len(self.answer) != self.n_query:
            raise DataValidationError(
                f"answer length {len(self.answer)} != query length {self.n_query}"
            )
        arrays = [self.context, self.query, self.answer]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DataValidationError("non-finite value in instance")
        channels = np.concatenate([self.context[:, 1], self.query[:, 1]])
        if np.any(channels != np.round(channels)) or np.any(channels < 1):
            raise DataValidationError("channel ids must be integers >= 1")
        if n_channels is not None and np.any(channels > n_channels):
            raise DataValidationError(f"channel id exceeds C={n_channels}")
        if self.n_context and self.query[:, 0].min() <= self.context[:, 0].max():
            raise DataValidationError("query times must lie after the last context time")

    def subquery(self, indices: Sequence[int]) -> "TimeSeriesInstance":
        idx = np.asarray(indices, dtype=np.intp)
        return TimeSeriesInstance(self.context, self.query[idx], self.answer[idx])

    def to_json(self) -> dict:
        ctx = [[float(t), int(c), float(v)] for t, c, v in self.context]
        qry = [[float(t), int(c)] for t, c in self.query]
        return {"context": ctx, "query": qry, "answer": [float(a) for a in self.answer]}

    def equals(self, other: "TimeSeriesInstance") -> bool:
        return (
            np.array_equal(self.context, other.context)
            and np.array_equal(self.query, other.query)
            and np.array_equal(self.answer, other.answer)
        )


def parse_instance(obj: dict, n_channels: int | None = None) -> TimeSeriesInstance:
    try:
        inst = TimeSeriesInstance(obj["context"], obj["query"], obj["answer"])
    except KeyError as exc:
        raise DataValidationError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"malformed arrays: {exc}") from None
    inst.validate(n_channels)
    return inst


def load_jsonl(path, n_channels: int | None = None) -> list[TimeSeriesInstance]:
    """Read one instance per line. Times are returned as stored; see :class:`TimeScaler`."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(parse_instance(json.loads(line), n_channels))
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            except DataValidationError as exc:
                raise DataValidationError(f"line {lineno}: {exc}") from None
    return out


def write_jsonl(instances: Iterable[TimeSeriesInstance], path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), separators=(",", ":")) + "\n")


def export_csv(instances: Sequence[TimeSeriesInstance], path) -> None:
    """Long format: ``instance_id, role, t, c, v``; query rows carry the answer."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "role", "t", "c", "v"])
        for i, inst in enumerate(instances):
            for t, c, v in inst.context:
                writer.writerow([i, "ctx", repr(float(t)), int(c), repr(float(v))])
            for (t, c), v in zip(inst.query, inst.answer):
                writer.writerow([i, "qry", repr(float(t)), int(c), repr(float(v))])


def n_channels_of(instances: Iterable[TimeSeriesInstance]) -> int:
    top = 1
    for inst in instances:
        chans = np.concatenate([inst.context[:, 1], inst.query[:, 1]])
        top = max(top, int(chans.max(initial=1)))
    return top


@dataclass(frozen=True)
class TimeScaler:
    """Min-max map of times onto [0, 1], fitted on the training split."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, instances: Iterable[TimeSeriesInstance]) -> "TimeScaler":
        times = [np.concatenate([i.context[:, 0], i.query[:, 0]]) for i in instances]
        flat = np.concatenate(times) if times else np.zeros(1)
        return cls(float(flat.min()), float(flat.max()))

    def _scale(self, t: np.ndarray) -> np.ndarray:
        span = self.hi - self.lo
        return (t - self.lo) / span if span > 0 else np.zeros_like(t)

    def transform(self, instances: Iterable[TimeSeriesInstance]) -> list[TimeSeriesInstance]:
        out = []
        for inst in instances:
            ctx = inst.context.copy()
            qry = inst.query.copy()
            ctx[:, 0] = self._scale(ctx[:, 0])
            qry[:, 0] = self._scale(qry[:, 0])
            out.append(TimeSeriesInstance(ctx, qry, inst.answer.copy()))
        return out


# -- toy distributions ---------------------------------------------------------

BLAST_COV = np.array([[1.0, 1.0], [1.0, 2.0]])
CIRCLE_NOISE = 0.05


def blast_transform(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * z * z


def circle_transform(z: np.ndarray, noise: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / norm + CIRCLE_NOISE * np.asarray(noise, dtype=np.float64)


def toy_instance(y: np.ndarray) -> TimeSeriesInstance:
    """Wrap an unconditional 2-D draw as an empty-context, two-variable query."""
    query = np.array([[TOY_QUERY_TIME, 1.0], [TOY_QUERY_TIME, 2.0]])
    return TimeSeriesInstance(np.zeros((0, 3)), query, y)


def blast_latent(n: int, seed: int) -> np.ndarray:
    """The Gaussian draws ``z`` underlying :func:`sample_blast` for the same seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.multivariate_normal(np.zeros(2), BLAST_COV, size=n, method="cholesky")


def sample_blast(n: int, seed: int) -> np.ndarray:
    return blast_transform(blast_latent(n, seed))


def sample_circle(n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 2))
    degenerate = np.linalg.norm(z, axis=1) < 1e-12
    while np.any(degenerate):
        z[degenerate] = rng.standard_normal((int(degenerate.sum()), 2))
        degenerate = np.linalg.norm(z, axis=1) < 1e-12
    return circle_transform(z, rng.standard_normal((n, 2)))


def generate_blast(n: int, seed: int) -> list[TimeSeriesInstance]:
    return [toy_instance(y) for y in sample_blast(n, seed)]


def generate_circle(n: int, seed: int) -> list[TimeSeriesInstance]:
    return [toy_instance(y) for y in sample_circle(n, seed)]


TOY_GENERATORS = {"blast": generate_blast, "circle": generate_circle}


# -- splits and batches --------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]

    def take(self, instances: Sequence[TimeSeriesInstance], part: str) -> list[TimeSeriesInstance]:
        return [instances[i] for i in getattr(self, part)]


def split(n_or_instances, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    n = n_or_instances if isinstance(n_or_instances, int) else len(n_or_instances)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return DatasetSplit(
        train=perm[:n_train].tolist(),
        validation=perm[n_train : n_train + n_val].tolist(),
        test=perm[n_train + n_val :].tolist(),
    )


@dataclass
class Batch:
    """Padded raw arrays; padding entries are zero and masked out."""

    ctx_time: np.ndarray  # B x N
    ctx_channel: np.ndarray  # B x N (int, 0 at padding)
    ctx_value: np.ndarray  # B x N
    ctx_mask: np.ndarray  # B x N
    qry_time: np.ndarray  # B x K
    qry_channel: np.ndarray  # B x K
    qry_mask: np.ndarray  # B x K
    answer: np.ndarray  # B x K
    ids: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.qry_mask.shape[0]


def collate(instances: Sequence[TimeSeriesInstance], ids=None, pad_context: int = 0, pad_query: int = 0) -> Batch:
    """Stack instances; ``pad_*`` add extra masked columns (used by padding-invariance checks)."""
    b = len(instances)
    n = max(i.n_context for i in instances) + pad_context
    k = max(i.n_query for i in instances) + pad_query
    out = Batch(
        np.zeros((b, n)), np.zeros((b, n), dtype=np.intp), np.zeros((b, n)), np.zeros((b, n), dtype=bool),
        np.zeros((b, k)), np.zeros((b, k), dtype=np.intp), np.zeros((b, k), dtype=bool), np.zeros((b, k)),
        list(range(b)) if ids is None else list(ids),
    )
    for row, inst in enumerate(instances):
        nn, kk = inst.n_context, inst.n_query
        out.ctx_time[row, :nn] = inst.context[:, 0]
        out.ctx_channel[row, :nn] = inst.context[:, 1].astype(np.intp)
        out.ctx_value[row, :nn] = inst.context[:, 2]
        out.ctx_mask[row, :nn] = True
        out.qry_time[row, :kk] = inst.query[:, 0]
        out.qry_channel[row, :kk] = inst.query[:, 1].astype(np.intp)
        out.qry_mask[row, :kk] = True
        out.answer[row, :kk] = inst.answer
    return out


def make_batches(
    instances: Sequence[TimeSeriesInstance], batch_size: int, seed: int = 0, shuffle: bool = True
) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(instances))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(instances))
    batches = []
    for start in range(0, len(order), batch_size):
        ids = order[start : start + batch_size].tolist()
        batches.append(collate([instances[i] for i in ids], ids))
    return batches

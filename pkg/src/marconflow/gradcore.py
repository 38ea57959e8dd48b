"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape`. With no tape
active they reduce to plain numpy calls, which is the evaluation fast path.

    >>> x = Parameter("x", [1.0, 2.0, 3.0])
    >>> with Tape([x]) as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)["x"]
    array([2., 4., 6.])
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DomainError",
    "NumericalError",
    "Tensor",
    "Parameter",
    "Tape",
    "as_tensor",
    "backward",
    "forward_op",
    "AdamState",
    "adam_init",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


class ContractError(ValueError):
    """Inputs violate an operation's shape or type contract."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of an operation."""


class NumericalError(ArithmeticError):
    """A non-finite value was produced."""


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Named trainable leaf."""

    __slots__ = ()

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Records operations in execution order, which is a topological order.

    A tape supports exactly one backward pass.
    """

    def __init__(self, parameters: Iterable[Parameter] | Mapping[str, Parameter] = ()):
        if isinstance(parameters, Mapping):
            parameters = parameters.values()
        self.parameters: dict[str, Parameter] = {}
        for p in parameters:
            self.parameters[p.name] = p
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, op, inputs, output, vjp) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        self.nodes.append(_Node(op, inputs, output, vjp))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out: np.ndarray, inputs: tuple, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite output from op '{op}'")
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    result = Tensor(out, requires_grad=track)
    if track:
        tape.record(op, inputs, result, vjp)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op, a, b, fn, vjp_fn):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = fn(a.data, b.data)
    except ValueError as exc:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc

    def vjp(g):
        ga, gb = vjp_fn(g, a.data, b.data, out)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish(op, out, (a, b), vjp)


# -- elementwise -----------------------------------------------------------


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b):
    def fn(x, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.divide(x, y)

    return _binary("div", a, b, fn, lambda g, x, y, o: (g / y, -g * o / y))


def _unary(op, x, fn, vjp_fn):
    x = as_tensor(x)
    with np.errstate(all="ignore"):
        out = fn(x.data)
    return _finish(op, out, (x,), lambda g: (vjp_fn(g, x.data, out),))


def neg(x):
    return _unary("neg", x, np.negative, lambda g, x, o: -g)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x, o: g * o)


def log(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("log of negative value")
    return _unary("log", x, np.log, lambda g, x, o: g / x)


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    return _unary("sqrt", x, np.sqrt, lambda g, x, o: g * 0.5 / o)


def sin(x):
    return _unary("sin", x, np.sin, lambda g, x, o: g * np.cos(x))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def softplus(x):
    return _unary("softplus", x, lambda v: np.logaddexp(0.0, v), lambda g, x, o: g * _sigmoid(x))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``. ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.where(cond, a.data, b.data)
    except ValueError as exc:
        raise ContractError("where: incompatible shapes") from exc

    def vjp(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _finish("where", out, (a, b), vjp)


# -- reductions --------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _finish(
        "sum", np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),)
    )


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size / max(np.asarray(out).size, 1)

    def vjp(g):
        return (_expand(g, x.shape, axis, keepdims) / count,)

    return _finish("mean", np.asarray(out), (x,), vjp)


def softmax_masked(x, mask=None, axis: int = -1):
    """Softmax along ``axis`` over entries where ``mask`` is true.

    Masked entries get exactly zero weight. A row with no unmasked entry
    yields all zeros.
    """
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError as exc:
            raise ContractError(
                f"softmax_masked: mask shape {mask.shape} does not match {x.shape}"
            ) from exc
    shifted = np.where(mask, x.data, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x.data, 0.0) - top), 0.0)
    total = np.sum(e, axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _finish("softmax_masked", out, (x,), vjp)


def logsumexp(x, axis=None, keepdims=False):
    x = as_tensor(x)
    top = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - top)
    s = np.sum(e, axis=axis, keepdims=True)
    out_k = np.log(s) + top
    out = out_k if keepdims else np.squeeze(out_k, axis=axis) if axis is not None else out_k.reshape(())
    weights = e / s

    def vjp(g):
        return (_expand(g, x.shape, axis, keepdims) * weights,)

    return _finish("logsumexp", np.asarray(out), (x,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects operands with ndim >= 2")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", out, (a, b), vjp)


def spd_logdet(a):
    """log det of a batch of symmetric positive-definite matrices (Cholesky)."""
    a = as_tensor(a)
    try:
        chol = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("spd_logdet: matrix is not positive definite") from exc
    out = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)

    def vjp(g):
        inv = np.linalg.inv(a.data)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        return (np.asarray(g)[..., None, None] * inv,)

    return _finish("spd_logdet", out, (a,), vjp)


def spd_solve(a, b):
    """Solve ``a x = b`` for SPD ``a`` (..., n, n) and vector ``b`` (..., n)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        chol = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("spd_solve: matrix is not positive definite") from exc
    y = np.linalg.solve(chol, b.data[..., None])
    out = np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]

    def vjp(g):
        gy = np.linalg.solve(a.data, np.asarray(g)[..., None])[..., 0]
        ga = -gy[..., :, None] * out[..., None, :]
        return _unbroadcast(ga, a.shape), _unbroadcast(gy, b.shape)

    return _finish("spd_solve", out, (a, b), vjp)


# -- structural --------------------------------------------------------------


def gather(x, index, axis: int = -1):
    """Pick entries of ``x`` along ``axis``.

    A 1-D ``index`` selects slices (like ``np.take``); an index with the same
    ndim as ``x`` picks per position (like ``np.take_along_axis``).
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    ax = axis % x.ndim
    if index.ndim == 1:
        out = np.take(x.data, index, axis=ax)
    elif index.ndim == x.ndim:
        out = np.take_along_axis(x.data, index, axis=ax)
    else:
        raise ContractError("gather: index must be 1-D or match the ndim of x")

    def vjp(g):
        if index.ndim == 1:
            grad = np.zeros(x.shape)
            np.add.at(np.moveaxis(grad, ax, 0), index, np.moveaxis(g, ax, 0))
            return (grad,)
        # take_along_axis broadcasts non-axis dims; scatter into the broadcast shape
        wide = list(g.shape)
        wide[ax] = x.shape[ax]
        grad = np.zeros(wide)
        full = list(np.indices(g.shape, sparse=True))
        full[ax] = np.broadcast_to(index, g.shape)
        np.add.at(grad, tuple(full), g)
        return (_unbroadcast(grad, x.shape),)

    return _finish("gather", out, (x,), vjp)


def concat(tensors: Sequence, axis: int = 0):
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ContractError("concat: incompatible shapes") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, tensors, vjp)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = np.reshape(x.data, shape)
    except ValueError as exc:
        raise ContractError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return _finish("reshape", out, (x,), lambda g: (np.reshape(g, x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _finish("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sin": sin,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "tanh": tanh,
    "softmax_masked": softmax_masked,
    "logsumexp": logsumexp,
    "gather": gather,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "neg": neg,
    "where": where,
    "spd_logdet": spd_logdet,
    "spd_solve": spd_solve,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse pass. Returns a gradient for every parameter registered on the tape."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a backward pass")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
    return {
        name: grads.get(id(p), np.zeros(p.shape)).reshape(p.shape)
        for name, p in tape.parameters.items()
    }


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_init(params: Mapping[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros(p.shape) for k, p in params.items()},
        v={k: np.zeros(p.shape) for k, p in params.items()},
    )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place Adam update with bias correction; returns the same state."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        if state.m[name].shape != params[name].shape:
            raise ContractError(f"optimizer state shape mismatch for '{name}'")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        params[name].data = params[name].data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# -- checkpoints -------------------------------------------------------------

_FIXED_TIME = (2020, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(
    path,
    params: Mapping[str, Tensor | np.ndarray],
    manifest: Mapping,
    adam: AdamState | None = None,
) -> None:
    """Write a zip archive: ``manifest.json`` plus one raw little-endian f64 blob per array.

    Output bytes depend only on the inputs.
    """
    arrays: dict[str, np.ndarray] = {}
    for name, p in params.items():
        arrays[f"param/{name}"] = p.data if isinstance(p, Tensor) else np.asarray(p)
    if adam is not None:
        for name in adam.m:
            arrays[f"adam_m/{name}"] = adam.m[name]
            arrays[f"adam_v/{name}"] = adam.v[name]
    shapes = {name: list(a.shape) for name, a in arrays.items()}
    doc = dict(manifest)
    doc["arrays"] = shapes
    if adam is not None:
        doc["adam_step"] = adam.step
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(doc, indent=2, sort_keys=True).encode())
        for name, a in arrays.items():
            _write_entry(zf, name + ".f64", np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, AdamState | None]:
    with zipfile.ZipFile(path) as zf:
        doc = json.loads(zf.read("manifest.json"))
        arrays = {}
        for name, shape in doc.pop("arrays").items():
            raw = zf.read(name + ".f64")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = None
    if "adam_step" in doc:
        adam = AdamState(
            m={k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")},
            v={k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")},
            step=int(doc.pop("adam_step")),
        )
    return params, doc, adam


# -- backends ----------------------------------------------------------------
# Model math is written once against these two namespaces: ``TAPED`` records
# gradients, ``PLAIN`` runs on bare ndarrays for fast evaluation.


class _Taped:
    add = staticmethod(add)
    exp = staticmethod(exp)
    log = staticmethod(log)
    sqrt = staticmethod(sqrt)
    sin = staticmethod(sin)
    sigmoid = staticmethod(sigmoid)
    softplus = staticmethod(softplus)
    where = staticmethod(where)
    gather = staticmethod(gather)
    concat = staticmethod(concat)
    matmul = staticmethod(matmul)
    transpose = staticmethod(transpose)
    reshape = staticmethod(reshape)
    softmax = staticmethod(softmax_masked)
    logsumexp = staticmethod(logsumexp)
    spd_logdet = staticmethod(spd_logdet)
    spd_solve = staticmethod(spd_solve)

    @staticmethod
    def sum(x, axis=None, keepdims=False):
        return sum_(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def value(x) -> np.ndarray:
        return as_tensor(x).data


def _np_softmax(x, mask=None, axis=-1):
    return softmax_masked(x, mask, axis).data


def _np_gather(x, index, axis=-1):
    index = np.asarray(index, dtype=np.intp)
    if index.ndim == 1:
        return np.take(x, index, axis=axis)
    return np.take_along_axis(x, index, axis=axis)


def _np_spd_logdet(a):
    chol = np.linalg.cholesky(a)
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


def _np_spd_solve(a, b):
    chol = np.linalg.cholesky(a)
    y = np.linalg.solve(chol, b[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]


def _np_logsumexp(x, axis=None, keepdims=False):
    top = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top
    if keepdims:
        return out
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


class _Plain:
    add = staticmethod(np.add)
    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    sqrt = staticmethod(np.sqrt)
    sin = staticmethod(np.sin)
    sigmoid = staticmethod(_sigmoid)
    softplus = staticmethod(lambda x: np.logaddexp(0.0, x))
    where = staticmethod(np.where)
    gather = staticmethod(_np_gather)
    concat = staticmethod(lambda xs, axis=0: np.concatenate(xs, axis=axis))
    matmul = staticmethod(np.matmul)
    transpose = staticmethod(np.transpose)
    reshape = staticmethod(np.reshape)
    softmax = staticmethod(_np_softmax)
    logsumexp = staticmethod(_np_logsumexp)
    spd_logdet = staticmethod(_np_spd_logdet)
    spd_solve = staticmethod(_np_spd_solve)

    @staticmethod
    def sum(x, axis=None, keepdims=False):
        return np.sum(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def value(x) -> np.ndarray:
        return np.asarray(x)


TAPED = _Taped
PLAIN = _Plain

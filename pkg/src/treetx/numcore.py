"""A small reverse-mode autodiff layer over numpy arrays.

Every operation the model performs goes through the functions in this module.
Each op computes its forward value eagerly and, when gradients are enabled and
some input requires them, records a closure that maps the output gradient to
input gradients.  :func:`backward` walks the recorded graph in reverse
topological order.

Values are checked for NaN/Inf after every op (:class:`~treetx.errors.NonFinite`).
Training runs in float32; :func:`grad_check` requires float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NonFinite, ShapeMismatch

CHECK_FINITE = True

_grad_enabled = True
# active only inside grad_check: each relu appends the sign pattern of its input
_kink_log: list[np.ndarray] | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NonFinite(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}") from exc

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}") from exc

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), back, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    if _kink_log is not None:
        _kink_log.append(pos)
    return _result(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * pos,), "relu")


def softmax_rows(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``allowed`` (broadcastable boolean) excludes entries exactly: they get
    probability 0 and their logits never influence the result.
    """
    z = x.data
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm over {d} features with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), back, "layer_norm")


def embed(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding ids outside [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), back, "embed")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor in one batched pass."""
    if x.ndim != 2:
        raise ShapeMismatch(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx)
    out = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.shape[1]))
        return (gx,)

    return _result(out, (x,), back, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat of {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, back, "concat")


def take_slice(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), back, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {x.shape} -> {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(tsum(x), 1.0 / n)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return mul(x, Tensor(keep))


def word_dropout(x: Tensor, p: float, rng: np.random.Generator | None,
                 training: bool = True) -> Tensor:
    """Zero whole vectors along the last axis with probability ``p``; no rescaling."""
    if not 0 <= p < 1:
        raise ValueError(f"word dropout probability {p} outside [0, 1)")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape[:-1]) >= p).astype(x.dtype)[..., None]
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    Intermediate nodes are released afterwards, so a graph can be walked once.
    When ``store`` is given its gradients are checked for NaN/Inf.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        if store is not None:
            store.check_grads()
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:  # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._prev = ()
        node._backward = None
    if store is not None:
        store.check_grads()


class ParamStore:
    """Named parameters (leaf tensors) with gradient accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def check_grads(self) -> None:
        for name, t in self._params.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            elif t.grad.shape != t.data.shape:
                raise ShapeMismatch(f"gradient of {name} has shape {t.grad.shape}, "
                                    f"parameter {t.data.shape}")
            elif not np.isfinite(t.grad).all():
                raise NonFinite(f"non-finite gradient in parameter {name}")

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for name, t in self._params.items():
            out.add(name, t.data)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}


# -------------------------------------------------------------- grad check


@dataclass
class GradCheckEntry:
    max_rel_error: float
    n_checked: int
    excluded: list[int] = field(default_factory=list)


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def grad_check(fn: Callable[[], Tensor], store: ParamStore, eps: float = 1e-6,
               n_coords: int = 32, rng: np.random.Generator | None = None,
               params: Sequence[str] | None = None) -> dict[str, GradCheckEntry]:
    """Compare backprop gradients of ``fn()`` with central differences.

    Samples ``n_coords`` coordinates per parameter (all of them for smaller
    parameters).  A coordinate whose perturbation flips the sign of any relu
    input is excluded from the error and listed in ``excluded``.
    """
    global _kink_log
    if store.dtype != np.float64:
        raise ValueError("grad_check needs a float64 parameter store")
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-4]")
    rng = rng if rng is not None else np.random.default_rng(0)

    store.zero_grad()
    backward(fn(), store)
    analytic = {name: store.grad(name).copy() for name in store}

    def evaluate() -> tuple[float, list[np.ndarray]]:
        global _kink_log
        _kink_log = []
        try:
            with no_grad():
                value = float(fn().data)
            return value, _kink_log
        finally:
            _kink_log = None

    _, base_signs = evaluate()
    report: dict[str, GradCheckEntry] = {}
    for name in (params if params is not None else store.names()):
        flat = store[name].data.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        entry = GradCheckEntry(0.0, 0)
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + eps
            f_plus, s_plus = evaluate()
            flat[c] = orig - eps
            f_minus, s_minus = evaluate()
            flat[c] = orig
            crossed = any(not np.array_equal(a, b) or not np.array_equal(a, m)
                          for a, b, m in zip(base_signs, s_plus, s_minus))
            if crossed:
                entry.excluded.append(c)
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            err = _rel_error(float(analytic[name].reshape(-1)[c]), numeric)
            entry.max_rel_error = max(entry.max_rel_error, err)
            entry.n_checked += 1
        report[name] = entry
    return report

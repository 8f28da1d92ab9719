"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every public op builds a node that remembers its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the graph in
reverse topological order, so each node is visited once and fan-out sums.

Broadcasting is deliberately narrow: element-wise binary ops accept equal
shapes, a python scalar, or a bias vector matching the last axis. Anything
else raises :class:`DimensionError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DimensionError", "ContractError",
    "tensor", "matmul", "add", "sub", "mul", "neg", "scale", "transpose", "reshape",
    "softmax_lastdim", "layer_norm", "activation", "sigmoid", "relu", "absolute",
    "concat", "concat_seq", "sum", "mean", "broadcast_to", "embedding", "dropout",
    "backward", "grad_check", "no_grad", "is_grad_enabled", "set_training", "is_training",
    "evaluating",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its contract (non-scalar backward, nondeterminism, ...)."""


_GRAD_ENABLED = True
_TRAINING = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_training(flag: bool) -> None:
    """Global train/eval switch; dropout is the identity in eval mode."""
    global _TRAINING
    _TRAINING = bool(flag)


def is_training() -> bool:
    return _TRAINING


@contextlib.contextmanager
def evaluating():
    prev = _TRAINING
    set_training(False)
    try:
        yield
    finally:
        set_training(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = backward_fn if needs else None
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return out


# ---------------------------------------------------------------- element-wise


def _coerce_pair(a, b, op: str) -> tuple[Tensor, Tensor, str]:
    """Classify a binary operand pair as 'same', 'bias_b', 'bias_a' or 'scalar_b'."""
    a = tensor(a)
    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            return a, Tensor(float(b)), "scalar_b"
        b = Tensor(b)
    if a.shape == b.shape:
        return a, b, "same"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return a, b, "bias_b"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return a, b, "bias_a"
    if b.ndim == 0:
        return a, b, "scalar_b"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if (kind == "bias_b" and side == "b") or (kind == "bias_a" and side == "a"):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    if kind == "scalar_b" and side == "b":
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b, kind = _coerce_pair(a, b, "add")

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b, kind = _coerce_pair(a, b, "sub")

    def bw(g):
        return _reduce_to(g, kind, "a"), -_reduce_to(g, kind, "b")

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b, kind = _coerce_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, kind, "a"), _reduce_to(g * ad, kind, "b")

    return _make(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def absolute(a: Tensor) -> Tensor:
    # np.sign gives subgradient 0 at the kink
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _make(np.where(m, x.data, 0.0), (x,), lambda g: (g * m,), "relu")


def convex_mix(g: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """g * a + (1 - g) * b for g in [0, 1], all three of equal shape.

    Rounding can push the two-product sum one ulp outside [min(a, b), max(a, b)];
    the forward value is pinned back into that interval. The gradient is that of
    the exact expression.
    """
    if not g.shape == a.shape == b.shape:
        raise DimensionError(f"convex_mix: {g.shape}, {a.shape}, {b.shape}")
    out = np.clip(g.data * a.data + (1.0 - g.data) * b.data,
                  np.minimum(a.data, b.data), np.maximum(a.data, b.data))
    return _make(out, (g, a, b),
                 lambda gr: (gr * (a.data - b.data), gr * g.data, gr * (1.0 - g.data)), "convex_mix")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]`` with equal batch dims."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(x, axis, keepdims), 1.0 / n)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 axes; gradient sums back over them."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,),
                 lambda g: (g.sum(axis=axes, keepdims=True),), "broadcast")


# ------------------------------------------------------------ normalization


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Stable softmax over the last axis; ``mask`` is boolean, False entries get exactly 0."""
    d = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), d.shape)
        dead = ~mask.any(axis=-1)
        if dead.any():
            row = tuple(int(i) for i in np.argwhere(dead)[0])
            raise ContractError(f"softmax: fully masked row at index {row}")
        d = np.where(mask, d, -np.inf)
    z = d - d.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    n = d.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {d.shape}")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


# ------------------------------------------------------------------ layout


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def concat_seq(a: Tensor, b: Tensor) -> Tensor:
    """Stack the rows of ``a`` then ``b`` along the sequence (second to last) axis."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"concat_seq: need [..., L, d] operands, got {a.shape} and {b.shape}")
    return concat([a, b], axis=-2)


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    n = table.shape[0]

    def bw(g):
        full = np.zeros((n, g.shape[-1]))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when p == 0, in eval mode, or without a random source."""
    if p <= 0.0 or not _TRAINING or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(_topo(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is re-evaluated with each parameter entry nudged by +/- eps in place,
    so it must close over ``params`` and be deterministic.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    first, second = f(), f()
    if first.data.tobytes() != second.data.tobytes():
        raise ContractError("grad_check: f is not deterministic (two evaluations differ)")
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst

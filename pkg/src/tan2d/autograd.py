"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure that pushes
the output gradient back to them. ``Tensor.backward`` linearises the graph
into a tape (topological order), clears every gradient slot on it, then
replays the tape in reverse.

Broadcasting is deliberately limited to python scalars; anything else must
go through :func:`broadcast_to` or :func:`reshape` so shape bugs stay loud.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # graph construction -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap ``data`` as the output of a differentiable op.

        ``backward(g)`` receives the output gradient and must return one
        gradient (or ``None``) per parent, in order.
        """
        out = Tensor(data)
        live = tuple(parents)
        if any(p.requires_grad for p in live):
            out.requires_grad = True
            out._parents = live

            def _push(g: np.ndarray) -> None:
                grads = backward(g)
                for p, gp in zip(live, grads):
                    if gp is None or not p.requires_grad:
                        continue
                    p.grad += gp

            out._backward = _push
        out.op = op
        return out

    def tape(self) -> list["Tensor"]:
        """Nodes reachable from ``self`` in topological order (inputs first)."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DimensionError("implicit gradient only defined for scalar outputs")
            grad = np.ones_like(self.data)
        nodes = self.tape()
        for node in nodes:
            node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.asarray(grad, dtype=DTYPE).reshape(self.shape)
        for node in reversed(nodes):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # sugar ----------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(shape):
    raise DimensionError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        shape = like.shape if like is not None else ()
        return Tensor(np.full(shape, float(x)))
    return Tensor(np.asarray(x, dtype=DTYPE))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)
        return Tensor.from_op(a.data + c, (a,), lambda g: (g,), "add")
    b = _as_tensor(b)
    _check_same("add", a, b)
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)
        return Tensor.from_op(a.data - c, (a,), lambda g: (g,), "sub")
    b = _as_tensor(b)
    _check_same("sub", a, b)
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor) and np.isscalar(b):
        c = float(b)
        return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "mul")
    b = _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return Tensor.from_op(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., k] @ weight[k, n] + bias[n]`` over any number of leading axes."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "affine")


# reductions and shape ops ----------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return Tensor.from_op(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; gradient sums over the expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor.from_op(out, (x,), backward, "broadcast")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    basic = _is_basic(idx)

    def backward(g):
        gx = np.zeros(src)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return Tensor.from_op(np.array(x.data[idx]), (x,), backward, "getitem")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """``x[rows]`` along axis 0; repeated rows accumulate their gradients."""
    rows = np.asarray(rows, dtype=np.intp)
    src = x.shape

    def backward(g):
        gx = np.zeros(src)
        np.add.at(gx, rows, g)
        return (gx,)

    return Tensor.from_op(x.data[rows], (x,), backward, "take_rows")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=ax), parts, backward, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor.from_op(np.stack([p.data for p in parts], axis=axis), parts, backward, "stack")


def masked(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero every entry where ``keep`` is false; ``keep`` broadcasts against ``x``."""
    k = np.broadcast_to(np.asarray(keep, dtype=DTYPE), x.shape)
    return Tensor.from_op(x.data * k, (x,), lambda g: (g * k,), "mask")


def blend(new: Tensor, old: Tensor, gate: np.ndarray) -> Tensor:
    """``gate * new + (1 - gate) * old`` for a constant 0/1 gate broadcastable to the operands."""
    _check_same("blend", new, old)
    gt = np.broadcast_to(np.asarray(gate, dtype=DTYPE), new.shape)
    return Tensor.from_op(
        gt * new.data + (1.0 - gt) * old.data,
        (new, old),
        lambda g: (g * gt, g * (1.0 - gt)),
        "blend",
    )


# normalisation -----------------------------------------------------------------


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each trailing-axis vector by ``max(norm, eps)``."""
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("l2_normalize_channels needs a channel axis of length >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = (y * g).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return Tensor.from_op(y, (x,), backward, "l2norm")


def l2_normalize_whole(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each sample (axis 0 slice) by its Frobenius norm, guarded by ``eps``."""
    axes = tuple(range(1, x.data.ndim))
    norm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = (y * g).sum(axis=axes, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return Tensor.from_op(y, (x,), backward, "fro_norm")


def no_grad_copy(x: Tensor) -> Tensor:
    return Tensor(x.data.copy())


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)

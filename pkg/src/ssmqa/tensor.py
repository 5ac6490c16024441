"""Dense tensors with reverse-mode automatic differentiation.

Everything numeric in this package (SSM blocks, attention, LoRA adapters,
the training loop) runs on the :class:`Tensor` class below: a numpy array
plus an optional gradient and a record of the operation that produced it.
Calling :func:`backward` on a scalar loss replays the recorded graph in
reverse topological order and accumulates ``grad`` on every tensor that
requested it.

Design constraints, in rough order of importance:

* determinism: identical seeds and inputs give bitwise-identical results
  (no parallel reductions are introduced by this module itself);
* loud shape errors: elementwise ops broadcast only across leading batch
  dims, never by stretching interior size-1 axes;
* guarded numerics: ``exp``/``softplus``/``sigmoid`` use overflow-safe
  forms so finite inputs never produce NaN/Inf.

64-bit floats are the default dtype (tests and gradient checks run there);
training code may opt into 32-bit.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "create",
    "zeros",
    "ones",
    "uniform",
    "tensor",
    "matmul",
    "softmax",
    "rmsnorm",
    "cross_entropy",
    "embedding",
    "conv1d_causal",
    "dropout",
    "backward",
]

Number = Union[int, float]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_leading_broadcast(sa: tuple, sb: tuple) -> None:
    # Equal shapes always fine; otherwise the lower-rank operand must match
    # the trailing dims of the higher-rank one exactly (leading-batch
    # broadcast only, no size-1 stretching).
    if sa == sb:
        return
    if len(sa) == len(sb):
        raise ShapeError(f"elementwise op on mismatched shapes {sa} and {sb}")
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ShapeError(
            f"operand of shape {small} does not match trailing dims of {big}"
        )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Undo a leading-dims broadcast by summing the extra axes.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


class Tensor:
    """A dense array with optional gradient tracking.

    ``data`` is immutable by convention once the tensor has been used in a
    forward op; only ``grad`` accumulates (and is reset explicitly by the
    caller, matching the gradient-accumulation training contract).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward_fn: Optional[Callable] = None,
        name: str = "",
    ):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}"
        if self.requires_grad:
            head += ", requires_grad=True"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # -- graph construction ---------------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn) -> "Tensor":
        tracked = _GRAD_ENABLED and any(
            isinstance(p, Tensor) and (p.requires_grad or p._parents) for p in parents
        )
        if tracked:
            return Tensor(data, requires_grad=False, _parents=tuple(parents), _backward_fn=backward_fn)
        return Tensor(data)

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_leading_broadcast(self.shape, other.shape)
            out_data = self.data + other.data

            def bw(g):
                return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

            return Tensor._make(out_data, (self, other), bw)
        c = self.data.dtype.type(other)
        return Tensor._make(self.data + c, (self,), lambda g: (g,))

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_leading_broadcast(self.shape, other.shape)
            out_data = self.data - other.data

            def bw(g):
                return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

            return Tensor._make(out_data, (self, other), bw)
        c = self.data.dtype.type(other)
        return Tensor._make(self.data - c, (self,), lambda g: (g,))

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_leading_broadcast(self.shape, other.shape)
            a, b = self.data, other.data
            out_data = a * b

            def bw(g):
                return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)

            return Tensor._make(out_data, (self, other), bw)
        c = self.data.dtype.type(other)
        return Tensor._make(self.data * c, (self,), lambda g: (g * c,))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _check_leading_broadcast(self.shape, other.shape)
            a, b = self.data, other.data
            out_data = a / b

            def bw(g):
                return (
                    _unbroadcast(g / b, self.shape),
                    _unbroadcast(-g * a / (b * b), other.shape),
                )

            return Tensor._make(out_data, (self, other), bw)
        return self.__mul__(1.0 / other)

    def __pow__(self, exponent: Number):
        n = float(exponent)
        x = self.data
        out_data = x ** n

        def bw(g):
            return (g * n * x ** (n - 1.0),)

        return Tensor._make(out_data, (self,), bw)

    # -- shape ops -------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        out_data = self.data.reshape(shape)
        return Tensor._make(out_data, (self,), lambda g: (g.reshape(orig),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        out_data = np.swapaxes(self.data, a, b)
        return Tensor._make(out_data, (self,), lambda g: (np.swapaxes(g, a, b),))

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = np.transpose(self.data, axes)
        return Tensor._make(out_data, (self,), lambda g: (np.transpose(g, inv),))

    def expand(self, shape: Sequence[int]) -> "Tensor":
        """Broadcast to ``shape``; gradient sums over the expanded axes."""
        shape = tuple(shape)
        orig = self.shape
        out_data = np.broadcast_to(self.data, shape)

        def bw(g):
            g = _unbroadcast(g, orig)
            # interior axes that were size 1 in the input sum back down
            for ax, (so, sg) in enumerate(zip(orig, g.shape)):
                if so == 1 and sg != 1:
                    g = g.sum(axis=ax, keepdims=True)
            return (g.reshape(orig),)

        return Tensor._make(out_data, (self,), bw)

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]
        shape = self.shape
        dtype = self.data.dtype

        def bw(g):
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, idx, g)
            return (gx,)

        return Tensor._make(out_data, (self,), bw)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def bw(g):
            g = np.asarray(g)
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- unary maps --------------------------------------------------------

    def exp(self) -> "Tensor":
        # clip keeps exp finite for float64; finite inputs stay finite
        out_data = np.exp(np.minimum(self.data, 700.0))
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        x = np.maximum(self.data, np.finfo(self.data.dtype).tiny)
        out_data = np.log(x)
        return Tensor._make(out_data, (self,), lambda g: (g / x,))

    def sigmoid(self) -> "Tensor":
        out_data = _sigmoid(self.data)
        return Tensor._make(
            out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),)
        )

    def silu(self) -> "Tensor":
        s = _sigmoid(self.data)
        out_data = self.data * s

        def bw(g):
            return (g * s * (1.0 + self.data * (1.0 - s)),)

        return Tensor._make(out_data, (self,), bw)

    def softplus(self) -> "Tensor":
        # log(1 + e^x) via logaddexp, stable for large |x|
        out_data = np.logaddexp(0.0, self.data)
        s = _sigmoid(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * s,))

    # -- python protocol -----------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# -- constructors ----------------------------------------------------------


def create(
    shape: Sequence[int],
    init: str = "zeros",
    seed: Optional[int] = None,
    values=None,
    requires_grad: bool = False,
    dtype=np.float64,
) -> Tensor:
    """Create a tensor: ``zeros``, ``ones``, ``uniform`` (seeded) or ``from_values``."""
    shape = tuple(int(d) for d in shape)
    if any(d < 0 for d in shape):
        raise ShapeError(f"negative dimension in shape {shape}")
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "ones":
        data = np.ones(shape, dtype=dtype)
    elif init == "uniform":
        if seed is None:
            raise ValueError("uniform init requires a seed")
        rng = np.random.default_rng(seed)
        data = rng.random(shape, dtype=np.float64).astype(dtype)
    elif init == "from_values":
        data = np.asarray(values, dtype=dtype).reshape(shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False, dtype=np.float64) -> Tensor:
    return create(shape, "zeros", requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad=False, dtype=np.float64) -> Tensor:
    return create(shape, "ones", requires_grad=requires_grad, dtype=dtype)


def uniform(shape, seed: int, requires_grad=False, dtype=np.float64) -> Tensor:
    return create(shape, "uniform", seed=seed, requires_grad=requires_grad, dtype=dtype)


def tensor(values, requires_grad=False, dtype=np.float64) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    return create(arr.shape, "from_values", values=arr, requires_grad=requires_grad, dtype=dtype)


# -- composite / fused ops -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dims on either operand."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeError(f"matmul leading batch dims disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        while ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        while gb.ndim > b.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return Tensor._make(out_data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Shift-invariant softmax along ``axis``.

    ``mask`` (plain boolean array, True = visible) restricts the
    normalization to visible entries; each row must keep at least one
    visible entry.
    """
    ax = axis if axis >= 0 else x.ndim + axis
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    data = x.data
    if mask is not None:
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax mask leaves a row with no visible entry")
        data = np.where(mask, data, -np.inf)
    m = np.max(data, axis=ax, keepdims=True)
    e = np.exp(data - m)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return Tensor._make(y, (x,), bw)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """y = gamma * x / sqrt(mean(x^2, last axis) + eps)."""
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(f"gamma shape {gamma.shape} must match last dim of {x.shape}")
    d = x.shape[-1]
    ms = np.mean(x.data ** 2, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    y = gamma.data * x.data * r

    def bw(g):
        gg = g * gamma.data
        inner = (gg * x.data).sum(axis=-1, keepdims=True)
        gx = gg * r - x.data * (r ** 3) * inner / d
        ggam = (g * x.data * r).reshape(-1, d).sum(axis=0)
        return gx, ggam

    return Tensor._make(y, (x, gamma), bw)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    ignore_index: int = -100,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` has shape ``[..., V]``; ``targets`` the matching leading
    shape. Positions equal to ``ignore_index`` contribute nothing; raising
    if every position is ignored (the mean would be undefined).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = targets.reshape(-1)
    valid = t != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: every target position is ignored")
    tv = t[valid]
    if tv.min() < 0 or tv.max() >= V:
        raise ValueError("cross_entropy: target id out of range")

    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1))
    logp_t = z[np.arange(flat.shape[0]), np.where(valid, t, 0)] - lse
    nll = -(logp_t[valid])
    total = nll.sum()
    if reduction == "mean":
        out = total / n_valid
    elif reduction == "sum":
        out = total
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        p = np.exp(z - lse[:, None])
        rows = np.arange(flat.shape[0])
        p[rows, np.where(valid, t, 0)] -= 1.0
        p[~valid] = 0.0
        if reduction == "mean":
            p /= n_valid
        return (float(g) * p.reshape(logits.shape),)

    data = np.asarray(out, dtype=logits.data.dtype)
    return Tensor._make(data, (logits,), bw)


def cross_entropy_count(targets: np.ndarray, ignore_index: int = -100) -> int:
    """Number of positions cross_entropy would average over."""
    return int((np.asarray(targets) != ignore_index).sum())


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"token id out of range for vocab of size {V}")
    out_data = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return Tensor._make(out_data, (weight,), bw)


def conv1d_causal(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Depthwise causal 1-D convolution over the time axis.

    ``x`` is ``[B, T, C]`` (or ``[T, C]``), ``w`` is ``[C, K]``; output at
    position t sees inputs t-K+1 .. t (zero padded on the left).
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d_causal expects [B,T,C] or [T,C], got {x.shape}")
    B, T, C = xd.shape
    Cw, K = w.shape
    if Cw != C:
        raise ShapeError(f"conv weight channels {Cw} != input channels {C}")
    xp = np.concatenate([np.zeros((B, K - 1, C), dtype=xd.dtype), xd], axis=1)
    y = np.zeros((B, T, C), dtype=xd.dtype)
    for k in range(K):
        y += w.data[:, k] * xp[:, k:k + T, :]
    if b is not None:
        y = y + b.data
    out_data = y[0] if squeeze else y

    def bw(g):
        g3 = g[None] if squeeze else g
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for k in range(K):
            gw[:, k] = (g3 * xp[:, k:k + T, :]).sum(axis=(0, 1))
            gxp[:, k:k + T, :] += w.data[:, k] * g3
        gx = gxp[:, K - 1:, :]
        grads = [gx[0] if squeeze else gx, gw]
        if b is not None:
            grads.append(g3.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out_data, parents, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out_data = x.data * keep
    return Tensor._make(out_data, (x,), lambda g: (g * keep,))


# -- backward pass -----------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Every op's inputs precede it in ``ops``; the list is what the reverse
    sweep in :func:`backward` walks.
    """

    def __init__(self, ops: list):
        self.ops = ops

    @staticmethod
    def from_root(root: Tensor) -> "Tape":
        order: list = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return Tape(order)

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be scalar. Gradients accumulate across calls until the
    caller zeroes them.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.ops):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.accumulate_grad(g)
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not isinstance(p, Tensor):
                continue
            if not (p.requires_grad or p._parents):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def collect_parameters(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]

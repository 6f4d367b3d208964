"""Small dense 2-D tensor with reverse-mode automatic differentiation.

Only the handful of operations the model and the group-lasso penalty need are
provided.  Every op records its parents and a closure that pushes the output
gradient back to them; :meth:`Tensor.backward` linearises the graph into a
:class:`ComputationTape` and walks it in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf values reach a tensor boundary."""


def _as_matrix(value, dtype) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A row-major matrix of floats with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, _check: bool = True):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DTYPE
        arr = _as_matrix(data, dtype)
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> "ComputationTape":
        """Back-propagate from this tensor; a 1x1 output defaults to seed 1."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        tape = ComputationTape.record(self)
        tape.run(self, np.asarray(grad, dtype=self.data.dtype))
        return tape

    # arithmetic sugar used by the model and penalty code
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


@dataclass
class ComputationTape:
    """Topologically ordered record of the ops that produced an output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def __len__(self) -> int:
        return len(self.nodes)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype, _check=False)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1xN row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        def backward(g):
            return ((a, g), (b, g))
    elif b.rows == 1 and b.cols == a.cols:
        def backward(g):
            return ((a, g), (b, g.sum(axis=0, keepdims=True)))
    else:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _result(a.data + b.data, (a, b), "add", backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)

    def backward(g):
        return ((x, g * c),)

    return _result(x.data * c, (x,), "scale", backward)


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    def backward(g):
        return ((x, np.full_like(x.data, g[0, 0])),)

    return _result(x.data.sum(dtype=x.data.dtype).reshape(1, 1), (x,), "sum", backward)


def masked(w: Tensor, keep: np.ndarray) -> Tensor:
    """Select ``w`` where ``keep`` is true and exact zero elsewhere.

    Unlike a product with a 0/1 matrix this never reads the dropped entries,
    so their contents (even garbage) cannot influence the output.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != w.shape:
        raise DimensionError(f"mask shape {keep.shape} does not match {w.shape}")
    zero = w.data.dtype.type(0)

    def backward(g):
        return ((w, np.where(keep, g, zero)),)

    return _result(np.where(keep, w.data, zero), (w,), "masked", backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` for a (batch, k) id array; returns (batch, k*dim)."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be (batch, k), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise IndexError(f"symbol id out of range [0, {table.rows})")
    batch, k = ids.shape
    dim = table.cols
    flat = ids.reshape(-1)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g.reshape(-1, dim))
        return ((table, gt),)

    return _result(table.data[flat].reshape(batch, k * dim), (table,), "embedding", backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GeLU."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * (v + 0.044715 * v2 * v)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return ((x, (g * d).astype(v.dtype, copy=False)),)

    return _result(out.astype(v.dtype, copy=False), (x,), "gelu", backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    batch, vocab = logits.shape
    if batch < 1:
        raise DimensionError("cross-entropy needs a batch of at least one row")
    if targets.shape[0] != batch:
        raise DimensionError(f"{targets.shape[0]} targets for {batch} logit rows")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target index out of range [0, {vocab})")
    logp = log_softmax(logits.data)
    rows = np.arange(batch)
    loss = -logp[rows, targets].mean(dtype=logits.data.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return ((logits, d * (g[0, 0] / batch)),)

    return _result(np.asarray(loss, dtype=logits.data.dtype).reshape(1, 1), (logits,), "xent", backward)


def group_l2_norms(w: Tensor, partition) -> Tensor:
    """Per-block L2 norms of ``w`` as a 1 x n_blocks tensor.

    The subgradient at an all-zero block is taken to be zero.
    """
    if tuple(w.shape) != tuple(partition.shape):
        raise DimensionError(f"partition for {partition.shape} applied to tensor {w.shape}")
    norms = partition.block_norms(w.data)

    def backward(g):
        safe = np.where(norms > 0, norms, 1)
        coef = np.where(norms > 0, g.reshape(-1) / safe, 0).astype(w.data.dtype)
        return ((w, partition.expand(coef) * w.data),)

    return _result(norms.reshape(1, -1), (w,), "group_l2", backward)


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    """First/second moments per parameter name and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    frozen: dict[str, np.ndarray] | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``frozen`` maps parameter names to boolean arrays marking entries that
    must not move; neither their values nor their moments are touched.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        m_new = dt(beta1) * m + dt(1 - beta1) * g
        v_new = dt(beta2) * v + dt(1 - beta2) * (g * g)
        step = dt(lr) * (m_new / dt(c1)) / (np.sqrt(v_new / dt(c2)) + dt(eps))
        hold = None if frozen is None else frozen.get(name)
        if hold is None:
            m[...] = m_new
            v[...] = v_new
            p -= step
        else:
            live = ~hold
            m[live] = m_new[live]
            v[live] = v_new[live]
            p[live] -= step[live]

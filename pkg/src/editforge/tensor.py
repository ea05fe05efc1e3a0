"""Minimal reverse-mode tensor engine.

Dense float64 arrays with per-operation lineage recording (define-by-run).
Just enough surface for attention blocks, a token denoiser, and
gradient-checked training: 2-D matmul, row softmax, concat, pointwise ops,
flat gathers for patchify/embedding lookup, and full reductions.

Values live in numpy; the tape, backward rules, gradient checking, and the
binary dump format are owned here. No implicit broadcasting beyond scalars,
so every backward rule is directly auditable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParseError, ShapeError

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


class Tensor:
    """A dense float64 array with optional grad and recorded lineage.

    Tensors produced by operations carry their parents and a backward
    closure; leaf tensors have neither. Lineage forms a DAG by
    construction (every op allocates a fresh node).
    """

    __slots__ = ("values", "grad", "op", "_parents", "_backward")

    def __init__(self, values: np.ndarray, op: str = "",
                 parents: tuple = (), backward: Callable | None = None):
        self.values = values
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def detach(self) -> "Tensor":
        """Copy of the values with no lineage."""
        return Tensor(self.values.copy())

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of size {self.size}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class Parameter:
    """A named, optionally trainable tensor.

    ``stage`` tags the training phase that owns this parameter; the
    trainers and checkpoint manifest use it, the engine does not.
    """

    tensor: Tensor
    name: str
    trainable: bool = True
    stage: str = ""


def make_tensor(shape: Sequence[int], values: Iterable[float]) -> Tensor:
    """Build a leaf tensor from a row-major flat value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    flat = np.asarray(list(values), dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ShapeError(
            f"shape {shape} wants {expected} values, got {flat.size}")
    return Tensor(flat.reshape(shape))


def from_array(a: np.ndarray) -> Tensor:
    """Leaf tensor wrapping a float64 copy of ``a``."""
    return Tensor(np.asarray(a, dtype=np.float64).copy())


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=np.float64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values, "matmul", (a, b))

    def backward(g: np.ndarray) -> None:
        a.accumulate(g @ b.values.T)
        b.accumulate(a.values.T @ g)

    out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    out = Tensor(a.values.T.copy(), "transpose", (a,))
    out._backward = lambda g: a.accumulate(g.T)
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if a.values.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {a.shape}")
    if not np.all(np.isfinite(a.values)):
        raise NumericError("softmax_rows input contains NaN or infinity")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, "softmax_rows", (a,))

    def backward(g: np.ndarray) -> None:
        # dL/dx = y * (g - sum(g * y, row))
        dot = (g * y).sum(axis=1, keepdims=True)
        a.accumulate(y * (g - dot))

    out._backward = backward
    return out


def concat(axis: int, a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two tensors along ``axis``; backward splits the grad."""
    if a.values.ndim != b.values.ndim:
        raise ShapeError(f"rank mismatch: {a.shape} vs {b.shape}")
    if not 0 <= axis < a.values.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {a.values.ndim}")
    for ax in range(a.values.ndim):
        if ax != axis and a.shape[ax] != b.shape[ax]:
            raise ShapeError(
                f"extents differ off the concat axis: {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.values, b.values], axis=axis),
                 "concat", (a, b))
    split = a.shape[axis]

    def backward(g: np.ndarray) -> None:
        ga, gb = np.split(g, [split], axis=axis)
        a.accumulate(ga)
        b.accumulate(gb)

    out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values, "add", (a, b))

    def backward(g: np.ndarray) -> None:
        a.accumulate(g)
        b.accumulate(g)

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values - b.values, "sub", (a, b))

    def backward(g: np.ndarray) -> None:
        a.accumulate(g)
        b.accumulate(-g)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise product; equal shapes required."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values, "mul", (a, b))

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * b.values)
        b.accumulate(g * a.values)

    out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = Tensor(a.values * c, "scale", (a,))
    out._backward = lambda g: a.accumulate(g * c)
    return out


def scale_t(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a size-1 tensor (differentiable scalar gain)."""
    if s.size != 1:
        raise ShapeError(f"scale_t gain must have size 1, got {s.shape}")
    sval = float(s.values.reshape(-1)[0])
    out = Tensor(a.values * sval, "scale_t", (a, s))

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * sval)
        s.accumulate(np.full(s.shape, (g * a.values).sum()))

    out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    out = Tensor(a.values * mask, "relu", (a,))
    out._backward = lambda g: a.accumulate(g * mask)
    return out


def gelu(a: Tensor) -> Tensor:
    """Smooth gating activation (tanh form); the tanh form is the
    definition here, so forward and backward agree exactly."""
    x = a.values
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), "gelu", (a,))

    def backward(g: np.ndarray) -> None:
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        a.accumulate(g * d)

    out._backward = backward
    return out


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements; returns a scalar (rank-0) tensor."""
    out = Tensor(np.asarray(a.values.sum()), "sum", (a,))
    out._backward = lambda g: a.accumulate(np.full(a.shape, float(g)))
    return out


def mean(a: Tensor) -> Tensor:
    """Mean of all elements; returns a scalar (rank-0) tensor."""
    n = a.size
    out = Tensor(np.asarray(a.values.mean()), "mean", (a,))
    out._backward = lambda g: a.accumulate(np.full(a.shape, float(g) / n))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} -> {shape}")
    out = Tensor(a.values.reshape(shape).copy(), "reshape", (a,))
    out._backward = lambda g: a.accumulate(g.reshape(a.shape))
    return out


def take_flat(a: Tensor, indices: np.ndarray, shape: Sequence[int]) -> Tensor:
    """Gather flat (row-major) positions of ``a`` into a new tensor.

    Covers patchify/unpatchify permutations, embedding-row lookup and
    element slicing with one scatter-add backward rule. Indices may repeat.
    """
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError(f"gather index out of range for size {a.size}")
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != idx.size:
        raise ShapeError(f"index count {idx.size} does not fill shape {shape}")
    out = Tensor(a.values.reshape(-1)[idx].reshape(shape), "take_flat", (a,))

    def backward(g: np.ndarray) -> None:
        acc = np.zeros(a.size, dtype=np.float64)
        np.add.at(acc, idx, g.reshape(-1))
        a.accumulate(acc.reshape(a.shape))

    out._backward = backward
    return out


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a length-n row vector to every row of an [m, n] matrix."""
    if a.values.ndim != 2 or row.values.ndim != 1:
        raise ShapeError(f"add_row wants [m,n] + [n], got {a.shape} + {row.shape}")
    if a.shape[1] != row.shape[0]:
        raise ShapeError(f"row width {row.shape[0]} != matrix width {a.shape[1]}")
    out = Tensor(a.values + row.values[None, :], "add_row", (a, row))

    def backward(g: np.ndarray) -> None:
        a.accumulate(g)
        row.accumulate(g.sum(axis=0))

    out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss over its lineage.

    Repeated calls without clearing grads accumulate additively.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss._parents:
        # A leaf scalar: nothing upstream, its own grad is still defined.
        loss.accumulate(np.ones(loss.shape))
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.accumulate(np.ones(loss.shape))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Parameter],
                      epsilon: float = 1e-4) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a
    scalar tensor. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ContractError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    for p in params:
        p.tensor.zero_grad()
    loss = fn()
    if not np.isfinite(loss.values).all():
        raise NumericError("finite_diff_check: loss is not finite")
    backward(loss)
    analytic = [np.zeros(p.tensor.shape) if p.tensor.grad is None
                else p.tensor.grad.copy() for p in params]
    for p in params:
        p.tensor.zero_grad()

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.tensor.values.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = fn().item()
            flat[i] = orig - epsilon
            down = fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("finite_diff_check: perturbed loss not finite")
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst


def optimizer_step(params: Sequence[Parameter], learning_rate: float) -> None:
    """Plain gradient descent: p <- p - lr * grad for trainable params.

    Gradients are cleared afterwards; non-trainable parameters keep their
    values. A trainable parameter with no populated gradient is a contract
    violation (it was never part of the loss graph).
    """
    if learning_rate <= 0:
        raise ContractError(f"learning rate must be > 0, got {learning_rate}")
    for p in params:
        if p.trainable:
            if p.tensor.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient")
            p.tensor.values -= learning_rate * p.tensor.grad
        p.tensor.zero_grad()


class AdamOptimizer:
    """Optional adaptive-moment optimizer. Off by default everywhere;
    plain ``optimizer_step`` is the mandatory path."""

    def __init__(self, params: Sequence[Parameter], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0:
            raise ContractError(f"learning rate must be > 0, got {learning_rate}")
        self.params = list(params)
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {id(p): np.zeros(p.tensor.shape) for p in self.params}
        self._v = {id(p): np.zeros(p.tensor.shape) for p in self.params}

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            if p.trainable:
                if p.tensor.grad is None:
                    raise ContractError(f"parameter {p.name!r} has no gradient")
                g = p.tensor.grad
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** self.t)
                vhat = v / (1 - self.beta2 ** self.t)
                p.tensor.values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.tensor.zero_grad()


_MAGIC = b"EFTN"
_VERSION = 1
_DTYPE_F64 = 0


def save_tensor(path, t: Tensor) -> None:
    """Write the binary dump: little-endian header then raw f64 values."""
    shape = t.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(shape)))
        for s in shape:
            f.write(struct.pack("<Q", s))
        f.write(struct.pack("<I", _DTYPE_F64))
        f.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def load_tensor(path) -> Tensor:
    """Read a binary dump; truncation or bad headers raise ParseError."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise ParseError("bad-magic", f"not a tensor dump: {path}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ParseError("bad-version", f"unsupported version {version}")
    offset = 12
    if len(blob) < offset + 8 * rank + 4:
        raise ParseError("truncated", f"header cut short in {path}")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
    offset += 8 * rank
    (dtype_code,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if dtype_code != _DTYPE_F64:
        raise ParseError("bad-dtype", f"unsupported dtype code {dtype_code}")
    count = int(np.prod(shape)) if shape else 1
    payload = blob[offset:]
    if len(payload) != 8 * count:
        raise ParseError(
            "truncated", f"expected {8 * count} value bytes, got {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Tensor(values.reshape(shape))

"""
Semi-Implicit Studio - Tensor Core

Dense double-precision tensors, a tape-based reverse-mode autodiff engine,
and the multilayer perceptron that implements the mixer T_phi.

Design:
- A Tensor is a numpy array plus (optionally) the Tape it was recorded on.
- Every primitive computes its forward value with plain numpy, so taped
  and untaped evaluation return bit-identical arrays.
- A Tape stores, per node, the parent node indices and one vector-Jacobian
  closure per parent. grad() replays them in reverse insertion order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import linalg as sla
from scipy import special

from tools.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]
Vjp = Callable[[np.ndarray], np.ndarray]


# ============================================================
# Tape
# ============================================================

@dataclass
class _Node:
    parents: tuple[int, ...] = ()
    vjps: tuple[Vjp, ...] = ()


class Tape:
    """Records primitive operations for reverse-mode differentiation."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}

    def watch(self, value: ArrayLike, name: str) -> "Tensor":
        """Register a differentiable input. Watching the same name twice returns the same leaf."""
        if name in self.leaves:
            return self.leaves[name]
        data = value.data if isinstance(value, Tensor) else value
        leaf = Tensor(np.array(data, dtype=np.float64), tape=self, node=len(self.nodes))
        self.nodes.append(_Node())
        self.leaves[name] = leaf
        return leaf

    def record(self, value: np.ndarray, parents: Sequence[tuple[int, Vjp]]) -> "Tensor":
        node = len(self.nodes)
        self.nodes.append(_Node(
            parents=tuple(p for p, _ in parents),
            vjps=tuple(v for _, v in parents),
        ))
        return Tensor(value, tape=self, node=node)

    def __len__(self) -> int:
        return len(self.nodes)


# ============================================================
# Tensor
# ============================================================

class Tensor:
    """Double-precision array, optionally recorded on a Tape."""

    __slots__ = ("data", "tape", "node")
    # numpy operands defer to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None, node: Optional[int] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @classmethod
    def from_flat(cls, shape: Sequence[int], values: Sequence[float]) -> "Tensor":
        values = np.asarray(values, dtype=np.float64).ravel()
        if int(np.prod(shape)) != values.size:
            raise ShapeError(f"shape {tuple(shape)} holds {int(np.prod(shape))} values, got {values.size}")
        return cls(values.reshape(tuple(shape)))

    # --- metadata ---
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", taped" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    # --- operators ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return take(self, index)

    # --- reductions / reshapes as methods ---
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x: ArrayLike) -> Tensor:
    """Same values, detached from any tape."""
    return Tensor(as_tensor(x).data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast adjoint back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(value: np.ndarray, *inputs: tuple[Tensor, Vjp]) -> Tensor:
    """Wrap a forward value, recording it if any input lives on a tape."""
    tape = None
    for t, _ in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    parents = [(t.node, v) for t, v in inputs if t.tape is tape]
    return tape.record(value, parents)


# ============================================================
# Elementwise primitives
# ============================================================

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit(out,
                 (a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit(out,
                 (a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(out,
                 (a, lambda g: _unbroadcast(g * b.data, a.shape)),
                 (b, lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(out,
                 (a, lambda g: _unbroadcast(g / b.data, a.shape)),
                 (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a, lambda g: -g))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _emit(out, (a, lambda g: g * exponent * a.data ** (exponent - 1)))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a, lambda g: 2.0 * g * a.data))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit(out, (a, lambda g: 0.5 * g / out))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a, lambda g: g * out))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log(a.data), (a, lambda g: g / a.data))


def log1p(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(np.log1p(a.data), (a, lambda g: g / (1.0 + a.data)))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return _emit(out, (a, lambda g: g * out * (1.0 - out)))


def softplus(a: ArrayLike) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _emit(out, (a, lambda g: g * special.expit(a.data)))


def log_sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _emit(out, (a, lambda g: g * special.expit(-a.data)))


def tabs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(np.abs(a.data), (a, lambda g: g * np.sign(a.data)))


def relu(a: ArrayLike) -> Tensor:
    # subgradient at exactly 0 is 0
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a, lambda g: g * mask))


def lgamma(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(special.gammaln(a.data), (a, lambda g: g * special.digamma(a.data)))


def digamma(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(special.digamma(a.data), (a, lambda g: g * special.polygamma(1, a.data)))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a, lambda g: g * inside))


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select elementwise; `cond` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _emit(out,
                 (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ============================================================
# Linear algebra
# ============================================================

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """2-D @ 2-D, or 1-D @ 2-D treated as a single row."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[-1],))
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _emit(out,
                 (a, lambda g: g @ b.data.T),
                 (b, lambda g: a.data.T @ g))


def solve_triangular(L: ArrayLike, B: ArrayLike) -> Tensor:
    """X = L^{-1} B for lower-triangular L and 2-D B."""
    L, B = as_tensor(L), as_tensor(B)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or B.ndim != 2 or B.shape[0] != L.shape[0]:
        raise ShapeError(f"solve_triangular: L {L.shape}, B {B.shape}")
    X = sla.solve_triangular(L.data, B.data, lower=True)

    def _gb(g):
        return sla.solve_triangular(L.data, g, lower=True, trans="T")

    def _gl(g):
        return -np.tril(_gb(g) @ X.T)

    return _emit(X, (L, _gl), (B, _gb))


def diagonal(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    n = a.shape[0]

    def _vjp(g):
        out = np.zeros(a.shape)
        out[np.arange(n), np.arange(n)] = g
        return out

    return _emit(np.diagonal(a.data).copy(), (a, _vjp))


def scatter(values: ArrayLike, shape: Sequence[int], index) -> Tensor:
    """Zeros of `shape` with `values` placed at `index` (no repeated positions)."""
    values = as_tensor(values)
    out = np.zeros(tuple(shape))
    out[index] = values.data
    return _emit(out, (values, lambda g: g[index].reshape(values.shape)))


# ============================================================
# Reductions and shape ops
# ============================================================

def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_like(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(_axes(axis, len(shape))):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _emit(np.asarray(out), (a, lambda g: _expand_like(g, a.shape, axis, keepdims)))


def tmean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = int(np.prod([a.shape[i] for i in _axes(axis, a.ndim)])) if a.ndim else 1
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _emit(np.asarray(out),
                 (a, lambda g: _expand_like(g, a.shape, axis, keepdims) / count))


def logmeanexp(a: ArrayLike, axis: int = -1) -> Tensor:
    """log(mean(exp(a))) along `axis`.

    Computed as m + log(mean(exp(a - m))) over the sorted shifted values, so
    the result is exactly invariant to the order of entries and returns m
    exactly when all entries are equal.
    """
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m)
    mean = np.mean(np.sort(shifted, axis=axis), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(mean)
    out = np.squeeze(out_k, axis=axis)

    def _vjp(g):
        weights = shifted / (mean * shifted.shape[axis])
        return np.expand_dims(g, axis) * np.nan_to_num(weights)

    return _emit(out, (a, _vjp))


def logsumexp(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return add(logmeanexp(a, axis=axis), float(np.log(a.shape[axis])))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _emit(out, (a, lambda g: g.reshape(a.shape)))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a, lambda g: np.transpose(g, inverse)))


def expand_dims(a: ArrayLike, axis: int) -> Tensor:
    a = as_tensor(a)
    return _emit(np.expand_dims(a.data, axis), (a, lambda g: g.reshape(a.shape)))


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = np.array(np.broadcast_to(a.data, tuple(shape)))
    return _emit(out, (a, lambda g: _unbroadcast(g, a.shape)))


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a: ArrayLike, index) -> Tensor:
    """a[index] for basic or integer-array indexing."""
    a = as_tensor(a)
    out = np.array(a.data[index])
    advanced = _is_advanced(index)

    def _vjp(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return full

    return _emit(out, (a, _vjp))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    pairs = []
    for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(lo), int(hi))
        pairs.append((t, lambda g, sl=tuple(sl): g[sl]))
    return _emit(out, *pairs)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


# ============================================================
# Differentiation
# ============================================================

def grad(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar output w.r.t. every watched leaf of `tape`.

    Leaves the output does not depend on get a zero gradient.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    adjoints: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    if output.tape is tape:
        adjoints[output.node] = np.ones(output.shape)
        for i in range(output.node, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            node = tape.nodes[i]
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                adjoints[parent] = contrib if adjoints[parent] is None else adjoints[parent] + contrib
    return {
        name: (np.array(adjoints[leaf.node], dtype=np.float64).reshape(leaf.shape)
               if adjoints[leaf.node] is not None else np.zeros(leaf.shape))
        for name, leaf in tape.leaves.items()
    }


def finite_diff_grad(f: Callable[[np.ndarray], float], at: Union["ParamVector", np.ndarray],
                     step: float = 1e-5, coords: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    If `coords` is given, only those coordinates are differenced; the rest stay 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(at.data if isinstance(at, ParamVector) else at, dtype=np.float64).ravel()
    out = np.zeros_like(x0)
    for i in (range(x0.size) if coords is None else coords):
        hi, lo = x0.copy(), x0.copy()
        hi[i] += step
        lo[i] -= step
        f_hi, f_lo = float(f(hi)), float(f(lo))
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        out[i] = (f_hi - f_lo) / (2.0 * step)
    return out


# ============================================================
# Parameters and the MLP
# ============================================================

@dataclass
class ParamVector:
    """Flat parameter vector with named, contiguous slices."""

    data: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        total = sum(int(np.prod(shape)) for _, shape in self.layout)
        if total != self.data.size:
            raise ShapeError(f"layout covers {total} values, vector has {self.data.size}")

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        blocks = [(name, np.asarray(v, dtype=np.float64)) for name, v in blocks]
        data = np.concatenate([v.ravel() for _, v in blocks]) if blocks else np.zeros(0)
        return cls(data, [(name, v.shape) for name, v in blocks])

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.layout]

    def offsets(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        out, offset = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = (offset, offset + n, shape)
            offset += n
        return out

    def view(self, name: str) -> np.ndarray:
        lo, hi, shape = self.offsets()[name]
        return self.data[lo:hi].reshape(shape)

    def slice_of(self, flat: Tensor, name: str) -> Tensor:
        """Taped slice of a flat tensor laid out like this vector."""
        lo, hi, shape = self.offsets()[name]
        return reshape(take(flat, slice(lo, hi)), shape)

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(data, dtype=np.float64), list(self.layout))


@dataclass
class Mlp:
    """Rectifier MLP; identity on the output layer."""

    layer_sizes: list[int]
    params: ParamVector

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(w < 1 for w in self.layer_sizes):
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        expected = sum((i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if self.params.size != expected:
            raise ShapeError(f"MLP {self.layer_sizes} needs {expected} parameters, got {self.params.size}")

    @staticmethod
    def layout_for(layer_sizes: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
        layout = []
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            layout.append((f"W{i}", (fan_in, fan_out)))
            layout.append((f"b{i}", (fan_out,)))
        return layout

    @classmethod
    def glorot(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        blocks = []
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            blocks.append((f"W{i}", rng.uniform(-limit, limit, size=(fan_in, fan_out))))
            blocks.append((f"b{i}", np.zeros(fan_out)))
        return cls(list(layer_sizes), ParamVector.from_blocks(blocks))

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "Mlp":
        layout = cls.layout_for(layer_sizes)
        n = sum(int(np.prod(s)) for _, s in layout)
        return cls(list(layer_sizes), ParamVector(np.zeros(n), layout))

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def with_params(self, data: np.ndarray) -> "Mlp":
        return Mlp(list(self.layer_sizes), self.params.with_data(data))

    def forward(self, x: ArrayLike, phi: Optional[Tensor] = None) -> Tensor:
        """T_phi(x) for x of shape (in,) or (n, in).

        `phi` is the flat parameter tensor (typically a tape leaf); the stored
        parameters are used when it is omitted.
        """
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"MLP expects input width {self.in_dim}, got {x.shape}")
        flat = phi if phi is not None else Tensor(self.params.data)
        single = x.ndim == 1
        h = reshape(x, (1, self.in_dim)) if single else x
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            W = self.params.slice_of(flat, f"W{i}")
            b = self.params.slice_of(flat, f"b{i}")
            h = matmul(h, W) + b
            if i < n_layers - 1:
                h = relu(h)
        return reshape(h, (self.out_dim,)) if single else h


def mlp_forward(mlp: Mlp, input: ArrayLike, tape: Optional[Tape] = None) -> Tensor:
    """Evaluate the MLP; with a tape, its parameters are watched as leaf "phi"."""
    phi = tape.watch(mlp.params.data, "phi") if tape is not None else None
    return mlp.forward(input, phi)


# ============================================================
# Optimizers (ascent)
# ============================================================

class Adam:
    """Adaptive-moment ascent on a flat parameter vector."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None
        self.t = 0

    def step(self, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * gradient
        self.v = self.beta2 * self.v + (1 - self.beta2) * gradient * gradient
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class DecayedAscent:
    """Plain gradient ascent with step size `step * decay ** (t / every)`."""

    def __init__(self, step: float = 0.001, decay: float = 0.9, every: int = 100):
        if step <= 0 or every <= 0:
            raise ValueError("step and decay period must be positive")
        self.base, self.decay, self.every = step, decay, every

    def rate(self, t: int) -> float:
        return self.base * self.decay ** (t / self.every)

    def step(self, params: np.ndarray, gradient: np.ndarray, t: int) -> np.ndarray:
        return params + self.rate(t) * gradient

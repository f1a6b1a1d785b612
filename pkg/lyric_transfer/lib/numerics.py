"""
A small reverse-mode differentiation core on top of numpy.

### Main Functionalities
1. **Tensor graph**:
   `Tensor` wraps a float64 array. Operations on tensors that require gradients record their parents
   and a reverse rule; `backward` walks the graph once in reverse topological order and accumulates
   the gradient of a scalar root into every leaf.

2. **Operator set**:
   Element-wise arithmetic, matmul, nonlinearities, (log-)softmax, logsumexp, layer norm, reductions,
   slicing, concatenation, embedding lookup, 1-D convolution, masked row replacement and cosine
   similarity. Recurrent cells and the linear layer are composed from these primitives.

3. **Optimisation and checks**:
   `adam_step` applies a bias-corrected Adam update to a dict of parameter arrays and
   `check_gradients` compares analytic gradients with central finite differences.

4. **Reproducibility and persistence**:
   `make_rng` returns independent counter-based random streams derived from one seed and a stream
   name. `save_checkpoint` / `load_checkpoint` store named arrays in a flat binary container with a
   JSON sidecar.

Broadcasting is restricted to equal shapes, a 0-d scalar, or an operand whose shape is a suffix of
the other's (a shared leading batch dimension). Anything else raises `ShapeMismatchError`.
"""
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from lyric_transfer.lib.config import FORMAT_VERSION, LOG_FLOOR
from lyric_transfer.lib.errors import (
    NonScalarRootError,
    ShapeMismatchError,
    ZeroNormVectorError,
)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
ParamArrays = Dict[str, np.ndarray]


class Tensor:
    """
    A node of the differentiation graph.

    Attributes:
        data (np.ndarray): Forward value, always float64.
        requires_grad (bool): Whether gradients flow to this node.
        grad (Optional[np.ndarray]): Accumulated gradient, filled by `Tensor.backward` on leaves.
        name (Optional[str]): Parameter name for leaves created from a parameter dict.
    """
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        """Accumulates d(self)/d(leaf) into the `grad` attribute of every leaf requiring gradients."""
        for leaf, g in backward(self).items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wraps a constant in a Tensor that does not require gradients; tensors pass through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def custom_op(data: np.ndarray, parents: Tuple[Tensor, ...], rule) -> Tensor:
    """
    Creates a graph node from a precomputed value and a reverse rule.

    `rule(g)` receives the gradient of the output and returns one gradient (or None) per parent.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=rule)
    return Tensor(data)


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Propagates the gradient of a scalar root to every leaf that requires gradients.

    Shared subexpressions accumulate their contributions. Leaves are returned in a dict keyed by the
    leaf tensor; nothing is written on the tensors, so several graphs built on the same leaves can be
    differentiated from different threads.

    Raises:
        NonScalarRootError: If the root holds more than one value.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = leaves[node] + g if node in leaves else g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# Broadcasting helpers

def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    if a.shape == b.shape or b.ndim == 0:
        return a.shape
    if a.ndim == 0:
        return b.shape
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return a.shape
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return b.shape
    raise ShapeMismatchError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# Element-wise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return custom_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return custom_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return custom_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    return custom_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """
    Matrix product for 1-D and 2-D operands: (n,k)@(k,m), (k,)@(k,m), (n,k)@(k,) and (k,)@(k,).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def rule(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return custom_op(out, (a, b), rule)


# Nonlinearities

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural logarithm, clamped at `LOG_FLOOR` for non-positive inputs (zero gradient there)."""
    a = as_tensor(a)
    positive = a.data > 0
    safe = np.where(positive, a.data, 1.0)
    out = np.where(positive, np.maximum(np.log(safe), LOG_FLOOR), LOG_FLOOR)
    return custom_op(out, (a,), lambda g: (np.where(positive, g / safe, 0.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU with the tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return custom_op(out, (a,), rule)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)
    return custom_op(out, (a,), lambda g: (np.where(positive, g, slope * g),))


# Normalisation and reductions

def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, LOG_FLOOR)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.maximum(out, LOG_FLOOR)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data - _lse(a.data, axis))
    return custom_op(
        out, (a,),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
    )


def log_softmax(a, axis: int = -1) -> Tensor:
    """Log-softmax along `axis`; every output row logsumexps to zero and is floored at `LOG_FLOOR`."""
    a = as_tensor(a)
    out = np.maximum(a.data - _lse(a.data, axis), LOG_FLOOR)
    probs = np.exp(out)
    return custom_op(
        out, (a,),
        lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),),
    )


def logsumexp(a, axis: int = -1) -> Tensor:
    """log(sum(exp(a))) along `axis`; a row of only `-inf` / floor values yields `LOG_FLOOR`."""
    a = as_tensor(a)
    lse = _lse(a.data, axis)
    weights = np.exp(a.data - lse)
    return custom_op(
        np.squeeze(lse, axis=axis), (a,),
        lambda g: (np.expand_dims(g, axis) * weights,),
    )


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalises the last axis of `x` to zero mean and unit variance, then scales and shifts."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatchError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_sigma
    out = xhat * gamma.data + beta.data

    def rule(g):
        dxhat = g * gamma.data
        dx = inv_sigma * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return custom_op(out, (x, gamma, beta), rule)


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return custom_op(out, (a,), rule)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return div(sum(a, axis), float(count))


# Shape manipulation

def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return custom_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return custom_op(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in the reverse pass."""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=np.float64)
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def rule(g):
        grad = np.zeros_like(a.data)
        if advanced:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return custom_op(out, (a,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[p.shape for p in parts]) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return custom_op(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding_lookup(table, ids: Sequence[int]) -> Tensor:
    """Rows of `table` (V, E) selected by `ids`; returns (len(ids), E)."""
    table = as_tensor(table)
    index = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or (index.size and (index.min() < 0 or index.max() >= table.shape[0])):
        raise ShapeMismatchError("embedding_lookup", table.shape, index.shape)
    return getitem(table, index)


# Structured primitives

def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    1-D cross-correlation of `x` (L, C_in) with `weight` (w, C_in, C_out).

    The output has floor((L + 2 * padding - w) / stride) + 1 frames and `C_out` channels.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError("conv1d", x.shape, weight.shape)
    width, c_in, c_out = weight.shape
    padded_len = x.shape[0] + 2 * padding
    if padded_len < width:
        raise ShapeMismatchError("conv1d", x.shape, weight.shape)
    frames = (padded_len - width) // stride + 1
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    index = np.arange(frames)[:, None] * stride + np.arange(width)[None, :]
    cols = xp[index].reshape(frames, width * c_in)
    w2 = weight.data.reshape(width * c_in, c_out)
    out = cols @ w2
    parents: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatchError("conv1d", weight.shape, bias.shape)
        out = out + bias.data
        parents = (x, weight, bias)

    def rule(g):
        gcols = (g @ w2.T).reshape(frames, width, c_in)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, index, gcols)
        gx = gxp[padding:padding + x.shape[0]] if padding else gxp
        gw = (cols.T @ g).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return custom_op(out, parents, rule)


def where_rows(x, mask: np.ndarray, replacement) -> Tensor:
    """Replaces the rows of `x` (T, D) where `mask` (T,) is True with the vector `replacement` (D,)."""
    x, replacement = as_tensor(x), as_tensor(replacement)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != (x.shape[0],) or replacement.shape != (x.shape[1],):
        raise ShapeMismatchError("where_rows", x.shape, mask.shape, replacement.shape)
    out = np.where(mask[:, None], replacement.data[None, :], x.data)
    return custom_op(
        out, (x, replacement),
        lambda g: (np.where(mask[:, None], 0.0, g), g[mask].sum(axis=0)),
    )


def cosine_similarity(c, candidates) -> Tensor:
    """
    Cosine similarity between each row of `c` (M, D) and its candidates (M, K, D); returns (M, K).

    Raises:
        ZeroNormVectorError: If any vector has zero norm.
    """
    c, candidates = as_tensor(c), as_tensor(candidates)
    if (
        c.ndim != 2 or candidates.ndim != 3
        or candidates.shape[0] != c.shape[0] or candidates.shape[2] != c.shape[1]
    ):
        raise ShapeMismatchError("cosine_similarity", c.shape, candidates.shape)
    c_norm = np.linalg.norm(c.data, axis=-1)
    q_norm = np.linalg.norm(candidates.data, axis=-1)
    if np.any(c_norm == 0.0) or np.any(q_norm == 0.0):
        raise ZeroNormVectorError("cosine similarity is undefined for a zero vector")
    dots = np.einsum("md,mkd->mk", c.data, candidates.data)
    denom = c_norm[:, None] * q_norm
    out = dots / denom

    def rule(g):
        gc = np.einsum("mk,mkd->md", g / denom, candidates.data) \
            - (g * out).sum(axis=1)[:, None] * c.data / (c_norm ** 2)[:, None]
        gq = (g / denom)[:, :, None] * c.data[:, None, :] \
            - (g * out / q_norm ** 2)[:, :, None] * candidates.data
        return gc, gq

    return custom_op(out, (c, candidates), rule)


# Composite layers

def linear(x, weight, bias=None) -> Tensor:
    """`x @ weight + bias` for `x` of shape (in,) or (N, in) and `weight` of shape (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """
    One GRU update with gates packed as [reset, update, candidate] along the last axis of the weights.

    h' = (1 - z) * n + z * h, with n = tanh(W_in x + b_in + r * (W_hn h + b_hn)).
    """
    hidden = as_tensor(h).shape[-1]
    gi = linear(x, w_ih, b_ih)
    gh = linear(h, w_hh, b_hh)
    r = sigmoid(gi[..., :hidden] + gh[..., :hidden])
    z = sigmoid(gi[..., hidden:2 * hidden] + gh[..., hidden:2 * hidden])
    n = tanh(gi[..., 2 * hidden:] + r * gh[..., 2 * hidden:])
    return (1.0 - z) * n + z * h


def lstm_cell(x, h, c, w_ih, w_hh, bias) -> Tuple[Tensor, Tensor]:
    """One LSTM update with gates packed as [input, forget, cell, output]; returns (h', c')."""
    hidden = as_tensor(h).shape[-1]
    gates = linear(x, w_ih, bias) + matmul(h, w_hh)
    i = sigmoid(gates[..., :hidden])
    f = sigmoid(gates[..., hidden:2 * hidden])
    g = tanh(gates[..., 2 * hidden:3 * hidden])
    o = sigmoid(gates[..., 3 * hidden:])
    c_next = f * c + i * g
    return o * tanh(c_next), c_next


# Parameters

def tensors_from(params: Mapping[str, np.ndarray], requires_grad: bool = True,
                 frozen: Iterable[str] = ()) -> Dict[str, Tensor]:
    """Wraps a parameter dict into named leaf tensors; names listed in `frozen` get no gradient."""
    frozen = set(frozen)
    return {
        name: Tensor(value, requires_grad=requires_grad and name not in frozen, name=name)
        for name, value in params.items()
    }


def gradients_by_name(grads: Mapping[Tensor, np.ndarray]) -> ParamArrays:
    """Maps the leaf-keyed result of `backward` to parameter names."""
    return {leaf.name: g for leaf, g in grads.items() if leaf.name is not None}


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform initialisation in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# Optimiser

@dataclass
class AdamState:
    """First and second moment estimates per parameter name, plus the shared step counter."""
    step: int = 0
    m: ParamArrays = field(default_factory=dict)
    v: ParamArrays = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: Union[float, Mapping[str, float]],
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[ParamArrays, AdamState]:
    """
    Applies one bias-corrected Adam update.

    Parameters without an entry in `grads` are returned unchanged and keep their moments. A learning
    rate of zero leaves parameters bit-identical.

    Args:
        params (Mapping[str, np.ndarray]): Current parameter values.
        grads (Mapping[str, np.ndarray]): Gradients per parameter name.
        state (AdamState): Moments from the previous step.
        lr (Union[float, Mapping[str, float]]): A single learning rate or one per parameter name.
        betas (Tuple[float, float]): Moment decay rates.
        eps (float): Denominator offset.

    Returns:
        Tuple[ParamArrays, AdamState]: New parameters and new optimiser state.
    """
    beta1, beta2 = betas
    step = state.step + 1
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        rate = lr[name] if isinstance(lr, Mapping) else lr
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[name] = params[name] - rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


# Gradient verification

def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
) -> List[float]:
    """
    Compares analytic gradients of a scalar function with central finite differences.

    Args:
        fn (Callable[..., Tensor]): Function of `len(inputs)` tensors returning a scalar tensor.
        inputs (Sequence[np.ndarray]): Points at which to differentiate.
        step (float): Finite-difference step.

    Returns:
        List[float]: Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) per input.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(fn(*leaves))
    errors = []
    for k, base in enumerate(arrays):
        analytic = grads.get(leaves[k], np.zeros_like(base))
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            shifted = [a.copy() for a in arrays]
            shifted[k].reshape(-1)[i] += step
            plus = fn(*[Tensor(a) for a in shifted]).item()
            shifted[k].reshape(-1)[i] -= 2 * step
            minus = fn(*[Tensor(a) for a in shifted]).item()
            flat[i] = (plus - minus) / (2 * step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        errors.append(float(np.linalg.norm(analytic - numeric) / scale))
    return errors


# Random streams

def make_rng(seed: int, *stream_names: str) -> np.random.Generator:
    """
    Returns a Philox generator for the stream identified by `stream_names` under `seed`.

    The same (seed, names) always yields the same stream, and different names yield independent
    streams, so no component ever shares hidden global random state.
    """
    key = tuple(
        int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")
        for name in stream_names
    )
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


# Checkpoints

CHECKPOINT_MAGIC = b"LTCKPT\x00\x01"


def architecture_hash(architecture: Mapping) -> str:
    """SHA-256 of the canonical JSON rendering of an architecture config."""
    canonical = json.dumps(architecture, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_checkpoint(path: Path, params: Mapping[str, np.ndarray], metadata: Mapping) -> None:
    """
    Writes named arrays to a flat container and its metadata to `<path>.meta.json`.

    Layout: magic bytes, little-endian uint32 format version, uint64 header length, a JSON header
    listing `(name, shape, offset)` entries with offsets counted in values, then every array as
    row-major little-endian float64.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    for name in sorted(params):
        shape = list(np.shape(params[name]))
        entries.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape, dtype=np.int64))
    header = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for name in sorted(params):
            f.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    meta = {"format_version": FORMAT_VERSION, **dict(metadata)}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    logging.debug(f"Checkpoint with {len(entries)} arrays written to {path}")


def load_checkpoint(path: Path) -> Tuple[ParamArrays, dict]:
    """
    Reads a checkpoint written by `save_checkpoint`.

    Returns:
        Tuple[ParamArrays, dict]: The named arrays and the sidecar metadata (empty if absent).
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    start = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<IQ", raw, start)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start += struct.calcsize("<IQ")
    entries = json.loads(raw[start:start + header_len].decode("utf-8"))
    values = np.frombuffer(raw, dtype="<f8", offset=start + header_len)
    params = {}
    for entry in entries:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = values[entry["offset"]:entry["offset"] + count]
        params[entry["name"]] = chunk.reshape(entry["shape"]).astype(np.float64)
    sidecar = _sidecar(path)
    metadata = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return params, metadata

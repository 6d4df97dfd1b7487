"""
Minimal reverse-mode automatic differentiation over NumPy arrays.

Every primitive takes and returns :class:`Tensor` objects holding float64
arrays. When a :class:`Tape` is active (``with Tape() as tape:``) and at least
one input requires a gradient, the primitive appends a node to the tape with a
closure that maps the output gradient to input gradients. Nodes are appended
in execution order, so the tape is topologically sorted by construction and
:meth:`Tape.backward` is a single reverse sweep.

Primitives accept optional leading batch axes. Shapes in the docstrings refer
to the trailing (per-sample) axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError, DimensionError

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

_TAPE_STACK: list["Tape"] = []
_PATTERN_SINKS: list[list[np.ndarray]] = []


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing buffers; callers zero them between
    optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    end = None
    for i in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[i].output is loss:
            end = i
            break
    if end is None:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes[: end + 1]):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                touched[key] = t
        # the output's own gradient is final once its producer has run
        _accumulate(node.output, g_out)
    for key, g in grads.items():
        _accumulate(touched[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPE_STACK:
        _TAPE_STACK[-1].nodes.append(Node(op, tuple(inputs), out, bwd))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), A @ B, bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with x (..., D), weight (D, H), bias (H,)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx = g @ W.T if x.requires_grad else None
        gw = X.reshape(-1, X.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record("linear", inputs, out, bwd)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation.

    x is (B, C_in, L) or (C_in, L); weight is (C_out, C_in, k); output length
    is ``L + 2*padding - k + 1``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    squeeze = x.data.ndim == 2
    X = x.data[None] if squeeze else x.data
    if X.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(f"conv1d: expected (B,C,L) input and (O,C,k) weight, got {x.shape} and {weight.shape}")
    c_out, c_in, k = weight.shape
    if X.shape[1] != c_in:
        raise DimensionError(f"conv1d: input channels {X.shape[1]} != weight channels {c_in} (shapes {x.shape}, {weight.shape})")
    length = X.shape[2]
    if k > length + 2 * padding:
        raise ConfigurationError(f"conv1d: kernel {k} longer than padded length {length + 2 * padding}")
    l_out = length + 2 * padding - k + 1
    n = X.shape[0]

    if k == 1 and padding == 0:
        cols = X
    else:
        xp = np.pad(X, ((0, 0), (0, 0), (padding, padding))) if padding else X
        cols = np.stack([xp[:, :, j:j + l_out] for j in range(k)], axis=2).reshape(n, c_in * k, l_out)
    W2 = weight.data.reshape(c_out, c_in * k)
    out = np.tensordot(W2, cols, axes=([1], [1])).transpose(1, 0, 2)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        G = g[None] if squeeze else g
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.tensordot(G, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.tensordot(W2, G, axes=([0], [1])).transpose(1, 0, 2)
            if k == 1 and padding == 0:
                gx = gcols
            else:
                gcols = gcols.reshape(n, c_in, k, l_out)
                gxp = np.zeros((n, c_in, length + 2 * padding))
                for j in range(k):
                    gxp[:, :, j:j + l_out] += gcols[:, :, j, :]
                gx = gxp[:, :, padding:padding + length]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        if bias.requires_grad:
            gb = G.sum(axis=(0, 2))
        return gx, gw, gb

    return _record("conv1d", inputs, out[0] if squeeze else out, bwd)


# ---------------------------------------------------------------------------
# Softmax and normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable to x, boolean) marks valid positions; masked
    positions get probability exactly 0.
    """
    X = x.data
    if mask is None:
        shifted = X - X.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), X.shape)
        if not m.any(axis=-1).all():
            raise ContractError("softmax mask leaves a row with no valid positions")
        top = np.where(m, X, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(np.where(m, X - top, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
               eps: float = NORM_EPS) -> Tensor:
    """Per-channel normalisation of (B, C, L) over the batch and length axes.

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance).
    """
    X = x.data
    if X.ndim != 3:
        raise DimensionError(f"batch_norm expects (B, C, L), got {x.shape}")
    axes = (0, 2)
    shape = (1, -1, 1)
    if train:
        mu = X.mean(axis=axes)
        var = X.var(axis=axes)
        m = X.shape[0] * X.shape[2]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bwd(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if train:
                m = X.shape[0] * X.shape[2]
                gx = (inv.reshape(shape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv.reshape(shape)
        return gx, gg, gb

    return _record("batch_norm", (x, gamma, beta), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Normalise each sample over one feature axis, then apply an affine map."""
    X = x.data
    axis = axis % X.ndim
    shape = [1] * X.ndim
    shape[axis] = X.shape[axis]
    if gamma.data.size != X.shape[axis]:
        raise DimensionError(f"layer_norm: gain of size {gamma.data.size} for axis of size {X.shape[axis]}")
    mu = X.mean(axis=axis, keepdims=True)
    var = X.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    red = tuple(i for i in range(X.ndim) if i != axis)
    n = X.shape[axis]

    def bwd(g):
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            gx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True)
            )
        return gx, gg, gb

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def normalize(x: Tensor, mode: str, gamma: Tensor, beta: Tensor, **kwargs) -> Tensor:
    """Dispatch to :func:`batch_norm` or :func:`layer_norm`."""
    if mode == "batch":
        return batch_norm(x, gamma, beta, **kwargs)
    if mode == "layer":
        return layer_norm(x, gamma, beta, **kwargs)
    raise ConfigurationError(f"unknown normalisation mode {mode!r}")


# ---------------------------------------------------------------------------
# Pointwise and shape primitives
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    X = x.data
    keep = X > 0
    if _PATTERN_SINKS:
        _PATTERN_SINKS[-1].append(keep)

    def bwd(g):
        return (g * keep,)

    return _record("relu", (x,), np.where(keep, X, 0.0), bwd)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the exact identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit random generator")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        return (g * scale,)

    return _record("dropout", (x,), x.data * scale, bwd)


def max_pool_length(x: Tensor) -> Tensor:
    """Reduce (..., C, L) to (..., 1, C) by per-channel maximum.

    Ties go to the lowest index; the gradient is routed to the argmax only.
    """
    X = x.data
    idx = X.argmax(axis=-1)
    if _PATTERN_SINKS:
        _PATTERN_SINKS[-1].append(idx)
    out = np.take_along_axis(X, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(X)
        np.put_along_axis(gx, idx[..., None], np.swapaxes(g, -1, -2), axis=-1)
        return (gx,)

    return _record("max_pool_length", (x,), out[..., None, :], bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    ndim = arrays[0].ndim
    ax = axis % ndim
    for a in arrays[1:]:
        if a.ndim != ndim or any(a.shape[i] != arrays[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}")
    sizes = np.cumsum([a.shape[ax] for a in arrays])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _record("concat", tuple(tensors), np.concatenate(arrays, axis=ax), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g, g

    return _record("add", (a, b), a.data + b.data, bwd)


def replicate(x: Tensor, n: int, axis: int = -1) -> Tensor:
    """Tile a size-1 axis ``n`` times; the gradient sums over the replicas."""
    ax = axis % x.data.ndim
    if x.shape[ax] != 1:
        raise DimensionError(f"replicate: axis {axis} of {x.shape} must have size 1")
    if n < 1:
        raise ConfigurationError(f"replicate count must be positive, got {n}")

    def bwd(g):
        return (g.sum(axis=ax, keepdims=True),)

    return _record("replicate", (x,), np.repeat(x.data, n, axis=ax), bwd)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose", (x,), np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def bwd(g):
        return (g.reshape(src),)

    return _record("reshape", (x,), x.data.reshape(shape), bwd)


def pad_length(x: Tensor, length: int) -> Tensor:
    """Zero-pad the last axis on the right up to ``length``."""
    cur = x.shape[-1]
    if length < cur:
        raise DimensionError(f"pad_length: cannot pad length {cur} down to {length}")
    widths = [(0, 0)] * (x.data.ndim - 1) + [(0, length - cur)]

    def bwd(g):
        return (g[..., :cur],)

    return _record("pad_length", (x,), np.pad(x.data, widths), bwd)


def crop_length(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` positions of the last axis."""
    full = x.shape[-1]
    if length > full:
        raise DimensionError(f"crop_length: {length} exceeds length {full}")

    def bwd(g):
        gx = np.zeros(x.shape)
        gx[..., :length] = g
        return (gx,)

    return _record("crop_length", (x,), np.ascontiguousarray(x.data[..., :length]), bwd)


def take(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing ``x.data[index]`` with scatter-add gradient."""
    def bwd(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("take", (x,), np.array(x.data[index]), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray, frozen_row: int | None = 0) -> Tensor:
    """Gather rows of a (V, C) table for integer ids (..., L) -> (..., C, L).

    The gradient never reaches ``frozen_row`` (the padding row).
    """
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    out = np.swapaxes(table.data[ids], -1, -2)

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), np.swapaxes(g, -1, -2).reshape(-1, table.shape[1]))
        if frozen_row is not None:
            gt[frozen_row] = 0.0
        return (gt,)

    return _record("embedding", (table,), np.ascontiguousarray(out), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(x.shape, float(g)),)

    return _record("sum", (x,), np.array(x.data.sum()), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g * c,)

    return _record("scale", (x,), x.data * c, bwd)


def pointwise_and_shape(kind: str, *args, **kwargs) -> Tensor:
    """Name-based dispatch over the pointwise and shape primitives."""
    table = {
        "relu": relu,
        "dropout": dropout,
        "max_pool_length": max_pool_length,
        "concat": concat,
        "add": add,
        "replicate": replicate,
    }
    if kind not in table:
        raise ConfigurationError(f"unknown primitive {kind!r}")
    return table[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy fused with the sigmoid."""
    Z = logits.data
    T = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if Z.shape != T.shape:
        raise DimensionError(f"bce: logits {Z.shape} vs targets {T.shape}")
    # -[t log s(z) + (1-t) log(1-s(z))] = max(z,0) - z t + log(1 + e^-|z|)
    per = np.maximum(Z, 0.0) - Z * T + np.log1p(np.exp(-np.abs(Z)))
    n = Z.size

    def bwd(g):
        sig = np.where(Z >= 0, 1.0 / (1.0 + np.exp(-np.abs(Z))), np.exp(-np.abs(Z)) / (1.0 + np.exp(-np.abs(Z))))
        return (float(g) * (sig - T) / n,)

    return _record("bce", (logits,), np.array(per.mean()), bwd)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on plain arrays."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``t.data``."""
    grad = np.zeros(t.shape)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


class ActivationPattern:
    """Collect ReLU masks and max-pool argmaxes produced inside the block."""

    def __enter__(self) -> list[np.ndarray]:
        self.items: list[np.ndarray] = []
        _PATTERN_SINKS.append(self.items)
        return self.items

    def __exit__(self, *exc) -> None:
        _PATTERN_SINKS.remove(self.items)


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient_smooth(fn: Callable[[], float], t: Tensor, eps: float = 1e-4):
    """Central differences plus a mask of coordinates whose perturbation
    flipped a ReLU or max-pool decision (where the function has a kink inside
    the difference window and the estimate is meaningless).
    """
    with ActivationPattern() as base:
        fn()
    grad = np.zeros(t.shape)
    kinked = np.zeros(t.shape, dtype=bool)
    flat, gflat, kflat = t.data.reshape(-1), grad.reshape(-1), kinked.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with ActivationPattern() as up:
            hi = fn()
        flat[i] = orig - eps
        with ActivationPattern() as down:
            lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
        kflat[i] = not (_same_pattern(base, up) and _same_pattern(base, down))
    return grad, kinked


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6,
                   mode: str = "elementwise") -> float:
    """Relative gap between two gradient arrays.

    ``elementwise``: largest ``|a - n| / max(|a|, |n|, floor)``.
    ``norm``: ``||a - n|| / max(||a||, ||n||, floor)`` over the whole array.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    if mode == "norm":
        denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        return float(np.linalg.norm(a - n) / denom)
    if mode != "elementwise":
        raise ConfigurationError(f"relative_error mode must be 'elementwise' or 'norm', got {mode!r}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())

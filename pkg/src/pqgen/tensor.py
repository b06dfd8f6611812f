"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation validates shapes eagerly, computes forward with numpy, and
records a closure on a global tape. `backward` replays the tape once in
reverse, accumulating into `.grad` (repeated calls keep accumulating).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not line up for the requested operation."""


class EmptyPoolError(ValueError):
    """Every position is masked out; there is nothing to reduce over."""


class DegenerateVectorError(ValueError):
    """Cosine similarity against a (near-)zero vector is undefined."""


class Tensor:
    """A float64 ndarray plus gradient metadata.

    `data` is treated as immutable by all ops; optimizers that mutate it in
    place must do so between tape resets.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __sub__(self, other):
        rhs = other if isinstance(other, Tensor) else Tensor(other)
        return add(self, scale(rhs, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# A tape entry is (inputs, output, backward_fn); backward_fn maps the output
# gradient to one gradient (or None) per input, shaped exactly like the input.
TapeEntry = tuple[tuple[Tensor, ...], Tensor, Callable[[np.ndarray], tuple]]


class ComputationTape:
    """Append-only record of executed ops, in execution order."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        self.entries.clear()


_TAPE = ComputationTape()
_GRAD_ENABLED = True


def active_tape() -> ComputationTape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray, bwd) -> Tensor:
    out = Tensor(out_data, requires_grad=_GRAD_ENABLED and any(t.requires_grad for t in inputs))
    if out.requires_grad:
        _TAPE.entries.append((inputs, out, bwd))
    return out


def backward(loss: Tensor, tape: ComputationTape | None = None) -> None:
    """Reverse sweep from a scalar loss; visits each recorded op exactly once.

    Gradients accumulate (+=) into `.grad` of every requires_grad tensor
    reachable from `loss`, including intermediates. Calling backward twice on
    the same tape doubles the gradients.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    entries = (tape if tape is not None else _TAPE).entries
    flowing: dict[Tensor, np.ndarray] = {loss: np.array(1.0)}
    for inputs, out, bwd in reversed(entries):
        g = flowing.pop(out, None)
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        for inp, gi in zip(inputs, bwd(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = flowing.get(inp)
            flowing[inp] = gi if prev is None else prev + gi
    # Whatever never appeared as an op output is a leaf.
    for leaf, g in flowing.items():
        if leaf.requires_grad:
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a @ b."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _emit((a, b), out, bwd)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing a transpose op."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t shapes incompatible: {a.shape} @ {b.shape}.T")
    out = a.data @ b.data.T

    def bwd(g):
        return g @ b.data, g.T @ a.data

    return _emit((a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a 2-D a."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def bwd(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return _emit((a, b), a.data + b.data, bwd)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors, left to right."""
    if not tensors:
        raise ShapeError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n shapes incompatible: {shape} vs {t.shape}")
    out = tensors[0].data
    for t in tensors[1:]:
        out = out + t.data

    def bwd(g):
        return tuple(g for _ in tensors)

    return _emit(tuple(tensors), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")

    def bwd(g):
        return g * b.data, g * a.data

    return _emit((a, b), a.data * b.data, bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _emit((x,), x.data * s, bwd)


def add_const(x: Tensor, c) -> Tensor:
    """Add a constant array (no gradient into c); result keeps x's shape."""
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"add_const would change shape: {x.shape} + {c.shape}")

    def bwd(g):
        return (g,)

    return _emit((x,), x.data + c, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _emit((x,), np.where(mask, x.data, 0.0), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum over all elements, yielding a 0-d scalar."""
    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit((x,), np.asarray(x.data.sum()), bwd)


def tmean(x: Tensor) -> Tensor:
    """Mean over all elements, yielding a 0-d scalar."""
    n = x.data.size
    if n == 0:
        raise EmptyPoolError("mean over an empty tensor")

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit((x,), np.asarray(x.data.mean()), bwd)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather: out[t] = table[ids[t]]."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]}): {idx.tolist()}")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit((table,), table.data[idx], bwd)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"slice_cols [{lo}:{hi}] invalid for shape {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    return _emit((x,), x.data[:, lo:hi].copy(), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]].copy() for i in range(len(parts)))

    return _emit(tuple(parts), np.concatenate([p.data for p in parts], axis=1), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction); -inf entries become 0."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _emit((x,), s, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize along the last axis with population variance; y = g*xhat + b."""
    d = x.shape[-1] if x.data.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bwd(g):
        dxhat = g * gain.data
        # Standard layer-norm backward along the last axis.
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        flat_g = (g * xhat).reshape(-1, d)
        dgain = flat_g.sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _emit((x, gain, bias), xhat * gain.data + bias.data, bwd)


def mean_pool_sequence(states: Tensor, mask: Sequence[bool]) -> Tensor:
    """Mean over the rows of states[T, d] where mask is True."""
    if states.data.ndim != 2 or len(mask) != states.shape[0]:
        raise ShapeError(f"mean_pool_sequence: states {states.shape} vs mask length {len(mask)}")
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise EmptyPoolError("mean_pool_sequence: every position is masked out")

    def bwd(g):
        gx = np.zeros_like(states.data)
        gx[idx] = g / idx.size
        return (gx,)

    return _emit((states,), states.data[idx].mean(axis=0), bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two 1-D vectors, as a 0-d scalar."""
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs matching 1-D vectors: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu < 1e-12 or nv < 1e-12:
        raise DegenerateVectorError(f"cosine_similarity: norms {nu:.3e}, {nv:.3e} below 1e-12")
    c = float(u.data @ v.data) / (nu * nv)

    def bwd(g):
        g = float(g)
        du = g * (v.data / (nu * nv) - c * u.data / (nu * nu))
        dv = g * (u.data / (nu * nv) - c * v.data / (nv * nv))
        return du, dv

    return _emit((u, v), np.asarray(c), bwd)


def cross_entropy(logits: Tensor, targets: Sequence[int], pad_id: int) -> Tensor:
    """Token-mean negative log-likelihood over non-pad target positions.

    logits is [T, V]; targets is a length-T id sequence. Positions whose
    target equals pad_id are excluded from the mean.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be 2-D, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets length {tgt.shape}")
    vocab = logits.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"cross_entropy target id out of range [0, {vocab}): {tgt.tolist()}")
    keep = np.flatnonzero(tgt != pad_id)
    if keep.size == 0:
        raise EmptyPoolError("cross_entropy: all target positions are pad")
    m = logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits.data - m).sum(axis=1)) + m[:, 0]
    nll = lse - logits.data[np.arange(tgt.size), tgt]
    loss = nll[keep].mean()

    def bwd(g):
        p = np.exp(logits.data - m - lse[:, None] + m)  # softmax rows
        gx = np.zeros_like(logits.data)
        gx[keep] = p[keep]
        gx[keep, tgt[keep]] -= 1.0
        return (gx * (float(g) / keep.size),)

    return _emit((logits,), np.asarray(loss), bwd)

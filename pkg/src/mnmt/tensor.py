"""Dense tensors with reverse-mode automatic differentiation.

Everything numeric in the package flows through this module: a Tensor wraps a
numpy array plus an optional gradient buffer, and a Tape records the primitive
operations of a forward pass so `backward` can replay them in reverse. Ops are
plain functions; recording happens only while a Tape is active (``with Tape()``)
and only for results that depend on a ``requires_grad`` tensor.

The default element type is float32. Gradient-check suites switch the whole
module to float64 via `set_default_dtype`.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

from .errors import UsageError

_DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the element type (np.float32 or np.float64) for new tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported default dtype: {dtype}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def _tape_stack() -> list:
    stack = getattr(_local, "tape_stack", None)
    if stack is None:
        stack = []
        _local.tape_stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops; one tape per training thread."""

    def __init__(self):
        self._records = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, fn) -> None:
        self._records.append(fn)

    def clear(self) -> None:
        self._records.clear()

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """A dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    """A non-recorded tensor in the current default dtype."""
    return Tensor(data, requires_grad=False)


def grad_of(t: Tensor) -> np.ndarray:
    """The accumulated gradient of `t`, zeros if nothing reached it."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, extent in enumerate(shape) if extent == 1 and g.shape[lead + i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap raw output data, recording `backward_fn` on the active tape."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if needs:
        def record():
            g = out.grad
            if g is not None:
                backward_fn(g)
        tape.record(record)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-replay `tape`, accumulating d(loss)/d(leaf) into `.grad`.

    Gradients add onto existing buffers, so micro-batch accumulation is a
    sequence of backward calls; zero the leaves between optimizer steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for record in reversed(tape._records):
        record()


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _emit(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _emit(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _emit(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bw(g):
        _accumulate(a, g * s)

    return _emit(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands must have rank >= 2")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # common activations @ weight case: one flattened GEMM
                rows = a.data.reshape(-1, a.data.shape[-1])
                gb = rows.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                                  b.data.shape)
            _accumulate(b, gb)

    return _emit(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x @ w + b for activation tensors against a 2-d weight."""
    if w.ndim != 2 or b.ndim != 1:
        raise UsageError("linear expects a 2-d weight and 1-d bias")
    out = np.matmul(x.data, w.data)
    out += b.data

    def bw(g):
        if x.requires_grad:
            _accumulate(x, np.matmul(g, w.data.T))
        if w.requires_grad:
            rows = x.data.reshape(-1, x.data.shape[-1])
            _accumulate(w, rows.T @ g.reshape(-1, g.shape[-1]))
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _emit(out, (x, w, b), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _emit(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _emit(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _emit(out, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _emit(out, (a,), bw)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along `axis`; -inf inputs get exactly zero mass."""
    if not -a.ndim <= axis < a.ndim:
        raise UsageError(f"softmax axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _emit(y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    h = a.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise UsageError(
            f"layer_norm gain/bias must have shape ({h},), "
            f"got {gain.data.shape} and {bias.data.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def bw(g):
        g_hat = g * gain.data
        n = x_hat.shape[-1]
        gx = inv_std / n * (
            n * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        _accumulate(a, gx)
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * x_hat).sum(axis=reduce_axes))
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _emit(out, (a, gain, bias), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...]]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise UsageError("embedding id out of range")
    out = table.data[ids]

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return _emit(out, (table,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted-scaling dropout; identity when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    keep /= (1.0 - rate)
    return mul(a, constant(keep))


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                      epsilon: float, reduction: str = "mean") -> Tensor:
    """Label-smoothed cross-entropy over the masked positions.

    Per position: -sum_v y'_v log softmax(logits)_v with
    y' = (1 - epsilon) * onehot(target) + epsilon / V. Reduction is the mean
    (or sum) over positions where `mask` is True.
    """
    if not 0.0 <= epsilon < 1.0:
        raise UsageError(f"label smoothing must be in [0, 1), got {epsilon}")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction: {reduction}")
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != logits.data.shape[:-1] or mask.shape != targets.shape:
        raise UsageError("targets/mask must match the logits' leading shape")
    vocab = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise UsageError("target id out of range")
    count = int(mask.sum())
    if count == 0:
        raise UsageError("label_smoothed_ce: no unmasked positions")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - log_norm
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    uniform = -logp.mean(axis=-1)
    per_pos = (1.0 - epsilon) * nll + epsilon * uniform
    total = (per_pos * mask).sum()
    denom = count if reduction == "mean" else 1
    out = np.asarray(total / denom, dtype=logits.data.dtype)

    def bw(g):
        # d loss / d logits = (softmax - y') at masked positions
        grad = np.exp(logp)
        grad -= epsilon / vocab
        flat = grad.reshape(-1, vocab)
        flat[np.arange(flat.shape[0]), targets.reshape(-1)] -= (1.0 - epsilon)
        grad *= mask[..., None] * (float(g) / denom)
        _accumulate(logits, grad)

    return _emit(out, (logits,), bw)

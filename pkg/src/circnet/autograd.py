"""Tape-based reverse-mode automatic differentiation over batched numpy tensors.

A `Tape` records every operation executed while it is active (and touching at
least one grad-requiring input); `Tape.backward` replays the records in exact
reverse execution order. The op set is deliberately small: just what the
diagonal-circulant video models need, plus Adam with exponential decay and
global-norm gradient clipping.

One tape belongs to one training step and one thread. Ops executed with no
active tape compute values only, which is what evaluation paths use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fft

EPS_LOG = 1e-8  # clamp for softmax/BCE log arguments
BN_EPS = 1e-3


class DetachedGraphError(RuntimeError):
    """backward() called for a loss that no active tape recorded."""


class NonFiniteGradientError(ArithmeticError):
    """A parameter gradient contained NaN or infinity; the step was aborted."""


class Tensor:
    """N-dimensional value participating in taped computation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed operations; backward walks it in reverse."""

    def __init__(self):
        self._records: list[tuple[Tensor, callable]] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self._records or not loss.requires_grad:
            raise DetachedGraphError("loss is not connected to this tape")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)


def _tracing() -> bool:
    return _ACTIVE_TAPE is not None


def _make_out(data, *inputs) -> Tensor:
    tracked = _tracing() and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=tracked)


def _push(out: Tensor, backward_fn) -> None:
    if out.requires_grad:
        _ACTIVE_TAPE._records.append((out, backward_fn))


def _accum(t: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place, so storing a view is safe
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data + b.data, a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    _push(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data - b.data, a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    _push(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data * b.data, a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    _push(out, backward)
    return out


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    out = _make_out(x.data * s, x)

    def backward(g):
        _accum(x, g * s)

    _push(out, backward)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = _make_out(x.data.reshape(shape), x)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    _push(out, backward)
    return out


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = _make_out(np.concatenate([p.data for p in parts], axis=axis), *parts)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                _accum(p, gp)

    _push(out, backward)
    return out


def slice_lastaxis(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = _make_out(np.ascontiguousarray(x.data[..., start:stop]), x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        _accum(x, gx)

    _push(out, backward)
    return out


def pad_lastaxis(x, length: int) -> Tensor:
    """Zero-pad the last axis up to `length`."""
    x = as_tensor(x)
    n = x.data.shape[-1]
    if length < n:
        raise ValueError(f"pad target {length} below current size {n}")
    widths = [(0, 0)] * (x.data.ndim - 1) + [(0, length - n)]
    out = _make_out(np.pad(x.data, widths), x)

    def backward(g):
        _accum(x, g[..., :n])

    _push(out, backward)
    return out


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    out = _make_out(np.maximum(x.data, floor), x)

    def backward(g):
        _accum(x, g * (x.data > floor))

    _push(out, backward)
    return out


# ---------------------------------------------------------------------------
# linear-algebra ops
# ---------------------------------------------------------------------------

def dense_matmul(x, w) -> Tensor:
    """x @ w for x of shape (..., i) and w of shape (i, o)."""
    x, w = as_tensor(x), as_tensor(w)
    out = _make_out(x.data @ w.data, x, w)

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            i, o = w.data.shape
            _accum(w, x.data.reshape(-1, i).T @ g.reshape(-1, o))

    _push(out, backward)
    return out


def batched_matmul(a, b) -> Tensor:
    """np.matmul of stacked matrices: (B, X, Y) @ (B, Y, Z)."""
    a, b = as_tensor(a), as_tensor(b)
    out = _make_out(a.data @ b.data, a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    _push(out, backward)
    return out


def swap_last_axes(x) -> Tensor:
    """Transpose the trailing two axes."""
    x = as_tensor(x)
    out = _make_out(np.swapaxes(x.data, -1, -2).copy(), x)

    def backward(g):
        _accum(x, np.swapaxes(g, -1, -2))

    _push(out, backward)
    return out


def circ_matvec_batched(c, x) -> Tensor:
    """Rows of x multiplied by the circulant matrix defined by first column c."""
    c, x = as_tensor(c), as_tensor(x)
    out = _make_out(fft.circular_convolve(c.data, x.data), c, x)

    def backward(g):
        if x.requires_grad:
            _accum(x, fft.circular_correlate(c.data, g))
        if c.requires_grad:
            gc = fft.circular_correlate(x.data, g)
            _accum(c, _unbroadcast(gc, c.data.shape))

    _push(out, backward)
    return out


def diag_scale(d, x) -> Tensor:
    """Rows of x scaled elementwise by the diagonal vector d."""
    d, x = as_tensor(d), as_tensor(x)
    out = _make_out(x.data * d.data, d, x)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * d.data)
        if d.requires_grad:
            _accum(d, _unbroadcast(g * x.data, d.data.shape))

    _push(out, backward)
    return out


def bias_add(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    out = _make_out(x.data + b.data, x, b)

    def backward(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    _push(out, backward)
    return out


def gather_frames(x, idx: np.ndarray) -> Tensor:
    """Select frames from x (B, F, p) with integer indices idx (B, S)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = _make_out(np.take_along_axis(x.data, idx[..., None], axis=1), x)

    def backward(g):
        gx = np.zeros_like(x.data)
        rows = np.arange(x.data.shape[0])[:, None]
        np.add.at(gx, (rows, idx), g)
        _accum(x, gx)

    _push(out, backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    out = _make_out(np.maximum(x.data, 0.0), x)

    def backward(g):
        _accum(x, g * (x.data > 0))

    _push(out, backward)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = _make_out(y, x)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    _push(out, backward)
    return out


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.maximum(e.sum(axis=axis, keepdims=True), EPS_LOG)
    out = _make_out(y, x)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    _push(out, backward)
    return out


def reduce_max_over_set(x, axis=1) -> Tensor:
    """Elementwise max over a set axis; gradient flows to the first argmax only."""
    x = as_tensor(x)
    am = np.argmax(x.data, axis=axis)
    out_data = np.take_along_axis(x.data, np.expand_dims(am, axis), axis=axis).squeeze(axis)
    out = _make_out(out_data, x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(am, axis), np.expand_dims(g, axis), axis=axis)
        _accum(x, gx)

    _push(out, backward)
    return out


def _reduction_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    if isinstance(axis, tuple):
        return int(np.prod([shape[a] for a in axis]))
    return shape[axis]


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = _make_out(x.data.sum(axis=axis), x)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    _push(out, backward)
    return out


def reduce_mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = _reduction_count(x.data.shape, axis)
    out = _make_out(x.data.mean(axis=axis), x)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / count, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape) / count)

    _push(out, backward)
    return out


def l2_normalize(x, axis=-1, eps=1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe
    out = _make_out(y, x)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = (g - y * dot) / safe
        gx = np.where(norm > eps, gx, g / eps)
        _accum(x, gx)

    _push(out, backward)
    return out


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.99, eps=BN_EPS) -> Tensor:
    """Normalize over all axes but the last; running stats updated in train mode.

    `running_mean`/`running_var` are plain arrays owned by the layer and are
    mutated in place during training so evaluation sees a deterministic
    affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = _make_out(gamma.data * xhat + beta.data, x, gamma, beta)

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            if training:
                gmean = g.mean(axis=axes)
                gdot = (g * xhat).mean(axis=axes)
                gx = gamma.data * inv * (g - gmean - xhat * gdot)
            else:
                gx = g * (gamma.data * inv)
            _accum(x, gx)

    _push(out, backward)
    return out


def binary_cross_entropy_multilabel(probs, targets) -> Tensor:
    """Independent per-label BCE, summed over labels and averaged over the batch."""
    probs = as_tensor(probs)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.data.shape:
        raise ValueError(f"targets shape {t.shape} != predictions shape {probs.data.shape}")
    p = np.clip(probs.data, EPS_LOG, 1.0 - EPS_LOG)
    batch = p.shape[0] if p.ndim > 1 else 1
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / batch
    out = _make_out(np.float64(loss), probs)

    def backward(g):
        inside = (probs.data > EPS_LOG) & (probs.data < 1.0 - EPS_LOG)
        gp = g * inside * (p - t) / (p * (1.0 - p)) / batch
        _accum(probs, gp)

    _push(out, backward)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam with a continuous exponential learning-rate decay in examples.

    effective_lr = lr0 * decay_rate ** (examples_seen / decay_every); a
    decay_every of 0 disables decay.
    """

    lr0: float
    decay_rate: float = 1.0
    decay_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    examples_seen: int = 0
    moments: dict = field(default_factory=dict)

    def effective_lr(self) -> float:
        if self.decay_every <= 0 or self.decay_rate == 1.0:
            return self.lr0
        return self.lr0 * self.decay_rate ** (self.examples_seen / self.decay_every)


def global_grad_norm(params) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def adam_step(state: AdamState, params, clip_norm: float = 1.0, examples: int = 1) -> float:
    """One clipped Adam update over named parameters; returns the grad norm.

    `params` is a sequence of (name, Tensor) pairs; moments are keyed by name.
    Raises NonFiniteGradientError (and leaves parameters untouched) if any
    gradient is not finite.
    """
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r} at step {state.step}")
    norm = global_grad_norm(params)
    scale_factor = 1.0
    if clip_norm > 0 and norm > clip_norm:
        scale_factor = clip_norm / norm
    lr = state.effective_lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params:
        if p.grad is None:
            continue
        g = p.grad * scale_factor
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    state.step = t
    state.examples_seen += examples
    return norm


def zero_grads(params) -> None:
    for _, p in params:
        p.grad = None

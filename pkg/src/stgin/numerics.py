"""Dense float64 tensors with taped reverse-mode gradients.

The model needs a small, auditable set of differentiable operations rather
than a general array framework. Each operation computes its forward value
with numpy and, while gradient recording is enabled, appends a backward
closure to a per-forward tape. ``backward(loss)`` walks the tape in reverse
(creation order is already topological), accumulates gradients into every
tensor that requires them, and discards the tape.

Conventions:
  * everything is float64, row-major;
  * data tensors carry ``requires_grad=False`` and never receive gradients;
  * the tape is process-global and confined to one worker — concurrent
    forwards must run in separate processes (see ``no_grad`` for read-only
    evaluation);
  * ``grad_check`` is the independent oracle: central differences against
    whatever the tape produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

_TAPE: list = []
_GRAD_DEPTH = 0  # >0 means recording is suspended


class no_grad:
    """Context manager suspending tape recording (evaluation, FD probes)."""

    def __enter__(self):
        global _GRAD_DEPTH
        _GRAD_DEPTH += 1
        return self

    def __exit__(self, *exc):
        global _GRAD_DEPTH
        _GRAD_DEPTH -= 1
        return False


def clear_tape():
    _TAPE.clear()


def tape_size() -> int:
    return len(_TAPE)


class Tensor:
    """Dense array with shape, float64 data and an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracing(*tensors: Tensor) -> bool:
    return _GRAD_DEPTH == 0 and any(t.requires_grad for t in tensors)


def _record(out: Tensor, backward: Callable[[np.ndarray], None]):
    out.requires_grad = True
    _TAPE.append((out, backward))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast when producing it."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Propagate d(loss)/d(x) to every recorded tensor, then drop the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward() expects a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(_TAPE):
            g = out.grad
            if g is not None:
                fn(g)
                out.grad = None  # intermediate buffers are single-use
    _TAPE.clear()


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    if _tracing(a, b):
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        _record(out, bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None
    if _tracing(a, b):
        def bwd(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, -_unbroadcast(g, b.data.shape))
        _record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    if _tracing(a, b):
        def bwd(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        _record(out, bwd)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    if _tracing(a):
        _record(out, lambda g: _accum(a, -g))
    return out


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 axes, got shape {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2))
    if _tracing(a):
        _record(out, lambda g: _accum(a, np.swapaxes(g, -1, -2)))
    return out


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    if _tracing(a):
        _record(out, lambda g: _accum(a, np.transpose(g, inv)))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.data.shape
    out = Tensor(a.data.reshape(shape))
    if _tracing(a):
        _record(out, lambda g: _accum(a, g.reshape(src)))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}") from None
    if _tracing(*ts):
        sizes = [t.data.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
        _record(out, bwd)
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.stack([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeError(f"cannot stack shapes {[t.shape for t in ts]}") from None
    if _tracing(*ts):
        def bwd(g):
            for i, t in enumerate(ts):
                _accum(t, np.take(g, i, axis=axis))
        _record(out, bwd)
    return out


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing; integer-array indices are rejected."""
    for part in idx if isinstance(idx, tuple) else (idx,):
        if isinstance(part, (list, np.ndarray)):
            raise ContractError("fancy indexing is not supported on tensors")
    out = Tensor(a.data[idx])
    if _tracing(a):
        def bwd(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g  # basic indexing never aliases, plain assign suffices
            _accum(a, buf)
        _record(out, bwd)
    return out


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.mean()))
    if _tracing(a):
        n = a.data.size
        _record(out, lambda g: _accum(a, np.full(a.data.shape, float(g) / n)))
    return out


def mean_axis0(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(axis=0))
    if _tracing(a):
        n = a.data.shape[0]
        _record(out, lambda g: _accum(a, np.broadcast_to(g / n, a.data.shape).copy()))
    return out


# ---------------------------------------------------------------------------
# linear algebra and activations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast, the last two contract."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}") from None
    if _tracing(a, b):
        def bwd(g):
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))
        _record(out, bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), fused into one tape entry."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[-2]:
        raise ShapeError(f"linear inner dimensions disagree: {x.shape} x {w.shape}")
    y = np.matmul(x.data, w.data)
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    tensors = (x, w) if b is None else (x, w, b)
    if _tracing(*tensors):
        def bwd(g):
            _accum(x, _unbroadcast(np.matmul(g, np.swapaxes(w.data, -1, -2)), x.data.shape))
            _accum(w, _unbroadcast(np.matmul(np.swapaxes(x.data, -1, -2), g), w.data.shape))
            if b is not None:
                _accum(b, _unbroadcast(g, b.data.shape))
        _record(out, bwd)
    return out


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stable softmax over the last axis.

    ``mask`` (broadcastable boolean, True = participate) pins excluded
    entries to exactly 0; every row must keep at least one entry.
    """
    x = _as_tensor(x)
    s = x.data
    if mask is None:
        m = s.max(axis=-1, keepdims=True)
        e = np.exp(s - m)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax row with every entry masked out")
        masked = np.where(mask, s, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        e = np.exp(masked - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    if _tracing(x):
        def bwd(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accum(x, p * (g - dot))
        _record(out, bwd)
    return out


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Elementwise max(x, slope * x); slope must lie in (0, 1)."""
    if not (0.0 < slope < 1.0):
        raise ParameterError(f"leaky_relu slope must be in (0, 1), got {slope}")
    x = _as_tensor(x)
    out = Tensor(np.where(x.data >= 0.0, x.data, slope * x.data))
    if _tracing(x):
        d = np.where(x.data >= 0.0, 1.0, slope)
        _record(out, lambda g: _accum(x, g * d))
    return out


def elu(x: Tensor) -> Tensor:
    """x for x >= 0, exp(x) - 1 below."""
    x = _as_tensor(x)
    out = Tensor(np.where(x.data >= 0.0, x.data, np.expm1(np.minimum(x.data, 0.0))))
    if _tracing(x):
        d = np.where(x.data >= 0.0, 1.0, out.data + 1.0)
        _record(out, lambda g: _accum(x, g * d))
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gain.data + bias.data)
    if _tracing(x, gain, bias):
        def bwd(g):
            _accum(gain, _unbroadcast(g * xh, gain.data.shape))
            _accum(bias, _unbroadcast(g, bias.data.shape))
            dxh = g * gain.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xh).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxh - m1 - xh * m2))
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# time-axis convolution and pooling
# ---------------------------------------------------------------------------


def conv1d_time(x: Tensor, kernels: Tensor) -> Tensor:
    """Cross-correlation along the time axis with zero same-padding.

    ``x`` is [L, c_in] or batched [B, L, c_in]; ``kernels`` is
    [c_out, c_in, w] with odd w. The output keeps length L.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim not in (2, 3) or kernels.data.ndim != 3:
        raise ShapeError(
            f"conv1d_time expects [L, c_in] (optionally batched) and [c_out, c_in, w], "
            f"got {x.shape} and {kernels.shape}"
        )
    c_out, c_in, w = kernels.data.shape
    if w % 2 == 0:
        raise ParameterError(f"kernel width must be odd, got {w}")
    if x.data.shape[-1] != c_in:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    length = x.data.shape[-2]
    pad = (w - 1) // 2
    xp = np.zeros(x.data.shape[:-2] + (length + 2 * pad, c_in))
    xp[..., pad:pad + length, :] = x.data
    # columns laid out [..., L, w, c_in] so a single matmul does the contraction
    cols = np.stack([xp[..., tau:tau + length, :] for tau in range(w)], axis=-2)
    cols_flat = cols.reshape(cols.shape[:-2] + (w * c_in,))
    k_flat = np.transpose(kernels.data, (0, 2, 1)).reshape(c_out, w * c_in)
    out = Tensor(np.matmul(cols_flat, k_flat.T))
    if _tracing(x, kernels):
        def bwd(g):
            dk_flat = _unbroadcast(
                np.matmul(np.swapaxes(g, -1, -2), cols_flat), (c_out, w * c_in)
            )
            _accum(kernels, np.transpose(dk_flat.reshape(c_out, w, c_in), (0, 2, 1)))
            dcols = np.matmul(g, k_flat).reshape(cols.shape)
            dxp = np.zeros_like(xp)
            for tau in range(w):
                dxp[..., tau:tau + length, :] += dcols[..., tau, :]
            _accum(x, dxp[..., pad:pad + length, :])
        _record(out, bwd)
    return out


def maxpool1d(x: Tensor, window: int, stride: int, pad: int) -> Tensor:
    """Max pooling along the time axis of [L, c] or [B, L, c]; -inf padding."""
    x = _as_tensor(x)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"maxpool1d expects [L, c] (optionally batched), got {x.shape}")
    if window < 1 or stride < 1:
        raise ParameterError(f"window and stride must be positive, got ({window}, {stride})")
    if pad < 0 or pad >= window:
        raise ParameterError(f"pad must satisfy 0 <= pad < window, got pad={pad}, window={window}")
    length = x.data.shape[-2]
    padded = length + 2 * pad
    l_out = (padded - window) // stride + 1
    if l_out < 1:
        raise ParameterError(
            f"pooling window {window} (stride {stride}, pad {pad}) exceeds length {length}"
        )
    xp = np.full(x.data.shape[:-2] + (padded, x.data.shape[-1]), -np.inf)
    xp[..., pad:pad + length, :] = x.data
    idx = np.arange(l_out)[:, None] * stride + np.arange(window)[None, :]
    vals = xp[..., idx, :]  # [..., l_out, window, c]
    arg = vals.argmax(axis=-2)
    out = Tensor(vals.max(axis=-2))
    if _tracing(x):
        def bwd(g):
            buf = np.zeros_like(xp)
            rows = idx[np.arange(l_out)[:, None], arg]  # [..., l_out, c] source rows
            channels = np.arange(x.data.shape[-1])[None, :]
            if buf.ndim == 2:
                np.add.at(buf, (rows, channels), g)
            else:
                batch = np.arange(buf.shape[0])[:, None, None]
                np.add.at(buf, (batch, rows, channels[None, :, :]), g)
            _accum(x, buf[..., pad:pad + length, :])
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of a central-difference check over a parameter list.

    ``worst_index`` is the flat position (parameters concatenated in call
    order) where the relative error peaks. Relative error divides by
    max(|analytic|, |numeric|, 1e-3 * gscale, 1e-12), gscale being the
    largest gradient magnitude seen: coordinates with gradients far below
    the problem's scale are finite-difference noise, not signal.
    """

    max_abs_error: float
    max_rel_error: float
    worst_index: int


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> GradReport:
    """Compare taped gradients of ``f()`` against central differences.

    ``f`` must be a deterministic scalar-valued closure over ``params``
    (a Tensor or a sequence of Tensors, each ``requires_grad=True``).
    """
    if h <= 0.0:
        raise ParameterError(f"step h must be positive, got {h}")
    plist = [params] if isinstance(params, Tensor) else list(params)
    if not plist:
        raise ContractError("grad_check needs at least one parameter")

    for p in plist:
        p.zero_grad()
    clear_tape()
    loss = f()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued f")
    backward(loss)
    analytic = np.concatenate(
        [
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for p in plist
        ]
    )

    numeric = np.empty_like(analytic)
    pos = 0
    with no_grad():
        for p in plist:
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f().data)
                flat[i] = orig - h
                f_minus = float(f().data)
                flat[i] = orig
                numeric[pos] = (f_plus - f_minus) / (2.0 * h)
                pos += 1

    abs_err = np.abs(analytic - numeric)
    gscale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    denom = np.maximum.reduce([np.abs(analytic), np.abs(numeric), np.full_like(abs_err, max(1e-3 * gscale, 1e-12))])
    rel_err = abs_err / denom
    worst = int(np.argmax(rel_err))
    return GradReport(
        max_abs_error=float(abs_err.max()),
        max_rel_error=float(rel_err.max()),
        worst_index=worst,
    )

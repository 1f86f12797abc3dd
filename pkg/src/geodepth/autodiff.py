"""Dense-tensor engine with reverse-mode automatic differentiation.

Everything the completion pipeline differentiates goes through the ops in
this module: they run on plain numpy arrays and record themselves on an
explicit tape. Opening a ``Tape`` context enables recording; with no tape
open every op is a pure forward function, so evaluation never pays for
gradient bookkeeping.

Precision is a process-global setting (``float32`` by default, switchable
to ``float64`` for gradient checking). Tensors are immutable after creation
except for gradient accumulation; a single tape/optimizer pair must not be
shared across concurrent training steps.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ContractError, EmptyInputError, ShapeError

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_ACTIVE_TAPES: list["Tape"] = []


def default_dtype():
    """Return the dtype newly created tensors use."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def precision(dtype):
    """Temporarily switch the global default dtype (e.g. for 64-bit checks)."""
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(saved)


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness assertions (slow; for debug runs)."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """A shaped scalar array, optionally participating in a tape.

    Existing float32/float64 arrays are wrapped as-is (zero copy); any other
    input is cast to the process-wide default dtype. ``grad`` is populated
    on leaf tensors by ``Tape.backward`` and holds an array of the same
    shape as ``data``. Repeated backward passes without a reset accumulate
    into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            self.data = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
            self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._leaf = True
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable tensor plus its Adam state.

    Names are dot-separated paths, unique within a model; they key the
    checkpoint records.
    """

    def __init__(self, name: str, data):
        if not name or any(not part for part in name.split(".")):
            raise ConfigError(f"parameter name must be a non-empty dot path, got {name!r}")
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.m = None
        self.v = None
        self.step = 0

    @property
    def data(self):
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class Tape:
    """Ordered record of executed ops; backward replays it in reverse.

    Execution order is a topological order of the data-flow graph, so a
    single reverse sweep sees every tensor's gradient fully accumulated
    before handing it to the op that produced the tensor. Gradients of
    intermediate tensors are transient to the sweep; only leaf tensors
    (parameters, inputs created with ``requires_grad=True``) keep ``grad``.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self._records:
            raise ContractError("backward on an empty tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, back_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, ig in zip(inputs, back_fn(g)):
                if ig is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t._leaf:
                    t.grad = ig.copy() if t.grad is None else t.grad + ig
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = ig if prev is None else prev + ig


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from ``loss`` over the tape that recorded it."""
    if loss._tape is None:
        raise ContractError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.tensor
    if isinstance(x, Tensor):
        return x
    raise ContractError(f"expected Tensor or Parameter, got {type(x).__name__}")


def _finish(out: Tensor, inputs: tuple, back_fn) -> Tensor:
    """Attach ``out`` to the active tape if any input is being tracked."""
    if _DEBUG and not np.isfinite(out.data).all():
        raise ContractError("non-finite values produced by a forward op")
    if not _ACTIVE_TAPES:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    tape = _ACTIVE_TAPES[-1]
    out.requires_grad = True
    out._leaf = False
    out._tape = tape
    tape._records.append((out, inputs, back_fn))
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data + b.data)

    def back(g):
        return g, g

    return _finish(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")
    out = Tensor(a.data - b.data)

    def back(g):
        return g, -g

    return _finish(out, (a, b), back)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated w.r.t. c)."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.data.dtype))

    def back(g):
        return (g * c,)

    return _finish(out, (a,), back)


def relu(a) -> Tensor:
    """max(0, x); subgradient at exactly 0 is 0."""
    a = _as_tensor(a)
    keep = a.data > 0
    out = Tensor(np.where(keep, a.data, 0))

    def back(g):
        return (g * keep,)

    return _finish(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    src_shape = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def back(g):
        return (g.reshape(src_shape),)

    return _finish(out, (a,), back)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.data.shape}")
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))

    def back(g):
        return (g.transpose(inverse),)

    return _finish(out, (a,), back)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise EmptyInputError("concat of zero tensors")
    ref = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
            i != (axis % len(ref)) and s[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {s} differ off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(ts), back)


def gather_rows(a, index) -> Tensor:
    """Pick rows of a [N, D] tensor by an integer [M, K] index -> [M, K, D].

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    a = _as_tensor(a)
    index = np.asarray(index)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects [N, D] input, got {a.data.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.data.shape[0]):
        raise ContractError("gather_rows: index out of range")
    n = a.data.shape[0]
    out = Tensor(a.data[index])

    def back(g):
        da = np.zeros_like(a.data)
        np.add.at(da, index.ravel(), g.reshape(-1, g.shape[-1]))
        return (da,)

    return _finish(out, (a,), back)


def max_over_neighbors(edge_feats):
    """Channel-wise max over the neighbor axis of a [N, k, D] tensor.

    Returns ``(out, argmax)`` where ``argmax`` is the plain [N, D] index
    array of the winning neighbor (first occurrence on ties). Backward
    routes the full gradient to that entry only.
    """
    e = _as_tensor(edge_feats)
    if e.data.ndim != 3:
        raise ShapeError(f"max_over_neighbors expects [N, k, D], got {e.data.shape}")
    if e.data.shape[1] == 0:
        raise EmptyInputError("max over an empty neighborhood (k = 0)")
    arg = np.argmax(e.data, axis=1)
    out = Tensor(np.max(e.data, axis=1))
    shape = e.data.shape

    def back(g):
        de = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(de, arg[:, None, :], g[:, None, :], axis=1)
        return (de,)

    return _finish(out, (e,), back), arg


def scatter_rows_to_grid(a, rows, cols, height: int, width: int) -> Tensor:
    """Write per-point [N, C] features onto a zero [C, H, W] grid.

    Target pixels must be pairwise distinct (enforced by the camera layer).
    """
    a = _as_tensor(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if a.data.ndim != 2 or rows.shape != (a.data.shape[0],) or cols.shape != rows.shape:
        raise ShapeError(
            f"scatter_rows_to_grid: features {a.data.shape} vs {rows.shape} pixel indices"
        )
    grid = np.zeros((a.data.shape[1], height, width), dtype=a.data.dtype)
    grid[:, rows, cols] = a.data.T
    out = Tensor(grid)

    def back(g):
        return (g[:, rows, cols].T,)

    return _finish(out, (a,), back)


# ---------------------------------------------------------------------------
# dense layers


def linear(a, weight, bias=None) -> Tensor:
    """out[n, o] = sum_d in[n, d] * w[d, o] (+ bias[o])."""
    a, w = _as_tensor(a), _as_tensor(weight)
    if a.data.ndim != 2 or w.data.ndim != 2 or a.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: input {a.data.shape} does not match weight {w.data.shape}")
    b = _as_tensor(bias) if bias is not None else None
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} does not match weight {w.data.shape}")
    ad, wd = a.data, w.data
    y = ad @ wd
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def back(g):
        da = g @ wd.T
        dw = ad.T @ g
        db = g.sum(axis=0) if b is not None else None
        return da, dw, db

    return _finish(out, (a, w, b), back)


class BatchNormState:
    """Running mean/variance for one normalization layer (train-mode writer)."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def arrays(self):
        return self.mean, self.var

    def load(self, mean, var):
        self.mean = np.asarray(mean, dtype=np.float64).copy()
        self.var = np.asarray(var, dtype=np.float64).copy()


def batch_norm(a, gain, shift, state: BatchNormState, mode: str,
               eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel normalization of a [N, D] tensor.

    Train mode normalizes by the batch statistics (population variance) and
    folds them into ``state`` with an exponential moving average; eval mode
    is a pure function of the frozen running stats.
    """
    a, gain, shift = _as_tensor(a), _as_tensor(gain), _as_tensor(shift)
    if a.data.ndim != 2:
        raise ShapeError(f"batch_norm expects [N, D], got {a.data.shape}")
    n, d = a.data.shape
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeError(f"batch_norm: params {gain.data.shape}/{shift.data.shape} vs D={d}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be train or eval, got {mode!r}")

    if mode == "train":
        if n < 2:
            raise EmptyInputError(f"batch_norm needs N >= 2 in train mode, got N={n}")
        mu = a.data.mean(axis=0)
        var = a.data.var(axis=0)
        state.mean = (1.0 - momentum) * state.mean + momentum * mu.astype(np.float64)
        state.var = (1.0 - momentum) * state.var + momentum * var.astype(np.float64)
    else:
        mu = state.mean.astype(a.data.dtype)
        var = state.var.astype(a.data.dtype)

    gaind = gain.data
    ivar = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.data.dtype))
    xhat = (a.data - mu) * ivar
    out = Tensor(xhat * gaind + shift.data)

    if mode == "train":

        def back(g):
            # standard batch-norm gradient; mu and var depend on the input
            dxhat = g * gaind
            dgain = (g * xhat).sum(axis=0)
            dshift = g.sum(axis=0)
            da = (ivar / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return da, dgain, dshift

    else:

        def back(g):
            return g * gaind * ivar, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _finish(out, (a, gain, shift), back)


# ---------------------------------------------------------------------------
# spatial convolutions (im2col based)


def _conv_extent(size: int, k: int, stride: int, pad: int) -> int:
    num = size + 2 * pad - k
    if num < 0 or num % stride != 0:
        raise ConfigError(
            f"conv: extent {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not yield an integral output size"
        )
    return num // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """Return ([B*oh*ow, C*kh*kw] patch matrix, oh, ow) for a [B,C,H,W] array."""
    b, c, h, w = x.shape
    oh = _conv_extent(h, kh, stride, pad)
    ow = _conv_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols, b, c, h, w, kh, kw, stride, pad):
    """Adjoint of _im2col: scatter-add patch gradients back onto the image."""
    oh = _conv_extent(h, kh, stride, pad)
    ow = _conv_extent(w, kw, stride, pad)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for p in range(kh):
        for q in range(kw):
            dxp[:, :, p:p + oh * stride:stride, q:q + ow * stride:stride] += d[:, :, :, :, p, q]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(a, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw]."""
    a, w = _as_tensor(a), _as_tensor(weight)
    if a.data.ndim != 4 or w.data.ndim != 4 or a.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: input {a.data.shape} does not match weight {w.data.shape}")
    b = _as_tensor(bias) if bias is not None else None
    cout, cin, kh, kw = w.data.shape
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.data.shape} vs Cout={cout}")
    bs, _, h, wd = a.data.shape
    cols, oh, ow = _im2col(a.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, cin * kh * kw)
    y = (cols @ wmat.T).reshape(bs, oh, ow, cout).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(y))

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bs * oh * ow, cout)
        dw = (gmat.T @ cols).reshape(w.data.shape)
        da = _col2im(gmat @ wmat, bs, cin, h, wd, kh, kw, stride, padding)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return da, dw, db

    return _finish(out, (a, w, b), back)


def conv_transpose2d(a, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: the exact adjoint of the matching conv2d.

    Weight layout is [Cin, Cout, kh, kw]; the output extent is
    (H - 1) * stride - 2 * padding + kh.
    """
    a, w = _as_tensor(a), _as_tensor(weight)
    if a.data.ndim != 4 or w.data.ndim != 4 or a.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input {a.data.shape} does not match weight {w.data.shape}"
        )
    b = _as_tensor(bias) if bias is not None else None
    cin, cout, kh, kw = w.data.shape
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias {b.data.shape} vs Cout={cout}")
    bs, _, h, wd = a.data.shape
    h2 = (h - 1) * stride - 2 * padding + kh
    w2 = (wd - 1) * stride - 2 * padding + kw
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"conv_transpose2d: output extent {h2}x{w2} is empty")
    # forward = input-gradient path of a conv2d whose weight maps Cout -> Cin
    gmat = a.data.transpose(0, 2, 3, 1).reshape(bs * h * wd, cin)
    wmat = w.data.reshape(cin, cout * kh * kw)
    y = _col2im(gmat @ wmat, bs, cout, h2, w2, kh, kw, stride, padding)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)

    def back(g):
        # d/d(input) is the matching conv2d forward applied to g
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        da = (gcols @ wmat.T).reshape(bs, h, wd, cin).transpose(0, 3, 1, 2)
        dw = (gmat.T @ gcols).reshape(w.data.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(da), dw, db

    return _finish(out, (a, w, b), back)


def weighted_sum(a, coeff) -> Tensor:
    """Scalar dot with a constant coefficient array (scalarization helper)."""
    a = _as_tensor(a)
    coeff = np.asarray(coeff, dtype=a.data.dtype)
    if coeff.shape != a.data.shape:
        raise ShapeError(f"weighted_sum: coeff {coeff.shape} vs input {a.data.shape}")
    out = Tensor((a.data * coeff).sum())

    def back(g):
        return (g * coeff,)

    return _finish(out, (a,), back)


# ---------------------------------------------------------------------------
# loss


def mse_masked(pred, target, mask, reduction: str = "sum") -> Tensor:
    """Squared depth error accumulated over valid pixels only.

    ``reduction='sum'`` is the literal written form; ``'mean'`` divides by
    the valid-pixel count so the learning rate is resolution independent.
    """
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.data.shape != target.shape or pred.data.shape != mask.shape:
        raise ShapeError(
            f"mse_masked: pred {pred.data.shape}, target {target.shape}, mask {mask.shape}"
        )
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"mse_masked reduction must be sum or mean, got {reduction!r}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyInputError("mse_masked: no valid pixels to supervise")
    diff = np.where(mask, pred.data - target, 0)
    total = (diff * diff).sum()
    denom = count if reduction == "mean" else 1
    out = Tensor(total / denom)

    def back(g):
        return (g * 2.0 * diff / denom,)

    return _finish(out, (pred,), back)


# ---------------------------------------------------------------------------
# optimizer and initialization


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are consumed (reset to None)."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ContractError(f"adam_step: parameter {p.name!r} has no gradient")
        if p.m is None:
            p.m = np.zeros_like(p.tensor.data, dtype=np.float64)
            p.v = np.zeros_like(p.tensor.data, dtype=np.float64)
        p.step += 1
        g64 = g.astype(np.float64)
        p.m = beta1 * p.m + (1.0 - beta1) * g64
        p.v = beta2 * p.v + (1.0 - beta2) * g64 * g64
        mhat = p.m / (1.0 - beta1 ** p.step)
        vhat = p.v / (1.0 - beta2 ** p.step)
        update = lr * mhat / (np.sqrt(vhat) + eps)
        p.tensor.data = p.tensor.data - update.astype(p.tensor.data.dtype)
        p.tensor.grad = None


def zero_grads(params) -> None:
    for p in params:
        p.tensor.grad = None


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator):
    """Fan-in scaled uniform init (gain for ReLU), in the active dtype."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_DEFAULT_DTYPE)

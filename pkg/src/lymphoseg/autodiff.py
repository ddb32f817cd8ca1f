"""Minimal reverse-mode automatic differentiation over dense NCHW arrays.

Only the operations needed by the segmentation network, its losses and the
input optimiser are provided. Every :class:`Tensor` produced by an operation
records its parents and a closure computing the parents' gradients; creation
order doubles as a topological order for the backward sweep.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_counter = itertools.count()

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """Array value optionally attached to a differentiation tape.

    Values are stored as float32 unless a float64 array is passed in (the
    gradient checks use float64 so finite differences are meaningful).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = tuple(_parents)
        self._backward: Optional[Callable] = _backward
        self._op = _op
        self.node_id = next(_node_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, inputs)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _result_dtype(*arrays: np.ndarray):
    return np.float64 if any(a.dtype == np.float64 for a in arrays) else np.float32


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = (a.data + b.data).astype(_result_dtype(a.data, b.data), copy=False)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), _bw, "add")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = (a.data * b.data).astype(_result_dtype(a.data, b.data), copy=False)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), _bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the gradient flows only where ``x > 0``."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * mask,), "relu")


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (x,), _bw, "index")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ----------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    """Sum with float64 accumulation; result is cast back to ``x``'s dtype."""
    out = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)

    def _bw(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), _bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis), Tensor(np.asarray(1.0 / n, dtype=x.dtype)))


# ---------------------------------------------------------------- convolution


def _check_nchw(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W); got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Receptive fields of a padded NCHW array as a ``(Cin*K*K, N*Ho*Wo)`` matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, cin, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * kh * kw, n * ho * wo)


def _correlate(xp: np.ndarray, kernel: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    cout, cin, kh, kw = kernel.shape
    n = xp.shape[0]
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    out = kernel.reshape(cout, -1) @ cols
    return out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an ``(N, Cin, H, W)`` input with ``(Cout, Cin, K, K)`` kernels.

    Output spatial size is ``(H + 2*pad - K) // stride + 1``.
    """
    _check_nchw(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (Cout, Cin, K, K); got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d kernel expects {kcin} input channels, input has {cin} (input {x.shape}, kernel {kernel.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},); got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0; got stride={stride}, pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    dtype = _result_dtype(x.data, kernel.data)
    xdata = x.data.astype(dtype, copy=False)
    kdata = kernel.data.astype(dtype, copy=False)
    xp = np.pad(xdata, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xdata
    out, cols = _correlate(xp, kdata, stride)
    if bias is not None:
        out = out + bias.data.astype(dtype).reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)
    ho, wo = out.shape[2:]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        g = g.astype(dtype, copy=False)
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        grads = [None, (gmat @ cols.T).reshape(kernel.shape)]
        if x.requires_grad:
            if stride == 1:
                # input gradient of a unit-stride correlation is a full correlation
                # of the output gradient with the flipped, channel-swapped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                flipped = np.ascontiguousarray(kdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gxp = _correlate(gp, flipped, 1)[0]
            else:
                gcols = (kdata.reshape(cout, -1).T @ gmat).reshape(cin, kh, kw, n, ho, wo)
                gxp = np.zeros((n, cin, hp, wp), dtype=dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            grads[0] = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w])
        if bias is not None:
            grads.append(np.sum(gmat, axis=1, dtype=np.float64).astype(bias.dtype))
        return tuple(grads)

    return _make(out, parents, _bw, "conv2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties route the gradient to the first
    element of the window in row-major order."""
    _check_nchw(x, "max_pool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims; got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        onehot = (np.arange(4) == arg[..., None]) * g[..., None]
        full = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (full.astype(x.dtype, copy=False),)

    return _make(out, (x,), _bw, "max_pool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    _check_nchw(x, "upsample_nearest2 input")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def _bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), _bw, "upsample_nearest2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_nchw(a, "concat_channels a")
    _check_nchw(b, "concat_channels b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching batch and spatial dims; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1).astype(_result_dtype(a.data, b.data), copy=False)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


# ------------------------------------------------------------ classification


def softmax_channels(logits: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel axis, stabilised by per-pixel max subtraction."""
    if logits.shape[axis] < 2:
        raise ShapeError(f"softmax needs at least 2 channels; got shape {logits.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = p.astype(logits.dtype)

    def _bw(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return ((p * (g - dot)).astype(logits.dtype),)

    return _make(out, (logits,), _bw, "softmax")


def cross_entropy(rho: Tensor, labels, axis: int = 1) -> Tensor:
    """Mean over pixels of ``-log(rho)`` at the true class.

    ``rho`` holds probabilities with classes on ``axis``; ``labels`` holds the
    class index per pixel (rho's shape without the class axis).
    """
    labels = np.asarray(labels)
    ncls = rho.shape[axis]
    expected = rho.shape[:axis] + rho.shape[axis + 1:]
    if labels.shape != expected:
        raise ShapeError(f"labels shape {labels.shape} does not match probabilities {rho.shape} minus class axis")
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise ValueError(f"class index out of range [0, {ncls}): found {labels.min()}..{labels.max()}")
    lab = np.expand_dims(labels.astype(np.intp), axis)
    picked = np.take_along_axis(rho.data, lab, axis=axis)
    clamped = np.maximum(picked.astype(np.float64), LOG_CLAMP)
    m = labels.size
    out = np.asarray(-np.log(clamped).sum() / m, dtype=rho.dtype)

    def _bw(g):
        local = np.where(picked >= LOG_CLAMP, -1.0 / (clamped * m), 0.0) * g
        full = np.zeros(rho.shape, dtype=np.float64)
        np.put_along_axis(full, lab, local, axis=axis)
        return (full.astype(rho.dtype),)

    return _make(out, (rho,), _bw, "cross_entropy")


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every grad-tracking tensor upstream of ``loss``.

    Gradients are overwritten, not accumulated, so replaying the same tape
    gives identical results. Tensors listed in ``inputs`` that are not on the
    loss path receive all-zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss; got shape {loss.shape}")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes or not t.requires_grad:
            continue
        nodes[t.node_id] = t
        stack.extend(t._parents)

    grads = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(t.grad)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg

    for t in inputs or ():
        if t.node_id not in nodes:
            t.grad = np.zeros_like(t.data)


# ------------------------------------------------------------------ optimiser


@dataclass
class OptimState:
    """AdamW moment estimates and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimState) -> tuple[Mapping[str, Tensor], OptimState]:
    """One AdamW update, in place.

    Weight decay is decoupled: ``theta *= 1 - lr * weight_decay`` is applied
    before, and independently of, the bias-corrected Adam step.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            v = np.zeros(p.shape, dtype=np.float64)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        theta = p.data.astype(np.float64)
        if state.weight_decay:
            theta = theta * (1.0 - state.lr * state.weight_decay)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (theta - step).astype(p.dtype)
    return params, state

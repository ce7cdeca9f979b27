"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operators needed by the segmentation networks are provided:
convolution and its transpose, max pooling with recorded argmax offsets,
index unpooling, channel concatenation, nearest upsampling, activations,
batch normalization and a few elementwise/reduction helpers.

Every differentiable call appends a :class:`TapeNode` to the graph rooted
at its output.  :meth:`Tensor.backward` walks that graph in reverse
topological order.  Each node also keeps a pure ``forward`` closure so the
recorded computation can be replayed (see :func:`replay`).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "TapeNode",
    "PoolIndices",
    "RunningStats",
    "no_grad",
    "is_grad_enabled",
    "tape",
    "replay",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d_indices",
    "unpool2d",
    "concat_channels",
    "upsample_nearest2d",
    "relu",
    "sigmoid",
    "softmax2",
    "apply_activation",
    "batchnorm2d",
    "add",
    "mul",
    "tsum",
    "tmean",
]

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operator."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeNode:
    """One recorded operator application."""

    __slots__ = ("op", "inputs", "output", "ctx", "forward", "backward")

    def __init__(self, op, inputs, output, ctx, forward, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.ctx = ctx
        self.forward = forward
        self.backward = backward

    def __repr__(self) -> str:
        return f"TapeNode({self.op}, out={self.output.shape})"


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` carry a ``grad`` array of
    the same shape, zero-initialized; :meth:`backward` accumulates into it and
    the caller is responsible for :meth:`zero_grad` between steps.
    Intermediate results reference the :class:`TapeNode` that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Optional[TapeNode] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(tape(self)):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves (or to self when it is a leaf)
        for node in tape(self):
            for t in node.inputs:
                if t.is_leaf and t.requires_grad and id(t) in grads:
                    t.grad += grads.pop(id(t))
        if self.is_leaf and self.requires_grad and id(self) in grads:
            self.grad += grads.pop(id(self))


def tape(output: Tensor) -> list:
    """Nodes reachable from ``output`` in topological (forward) order."""
    order: list = []
    seen: set = set()
    if output.node is None:
        return order
    stack = [(output.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append((t.node, False))
    return order


def replay(output: Tensor) -> np.ndarray:
    """Recompute ``output`` by re-running its tape from the leaf values."""
    values: dict = {}
    for node in tape(output):
        args = [values.get(id(t), t.data) for t in node.inputs]
        values[id(node.output)] = node.forward(*args)
    return values.get(id(output), output.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], forward: Callable,
            backward: Callable, ctx: Optional[dict] = None) -> Tensor:
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, tuple(inputs), t, ctx or {}, forward, backward)
    return t


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv2d_fwd(x, k, b, stride, padding):
    n, cin = x.shape[:2]
    cout, _, kh, kw = k.shape
    if padding:
        # explicit zero border; np.pad costs more than the convolution on tiny maps
        xp = np.zeros((n, cin, x.shape[2] + 2 * padding, x.shape[3] + 2 * padding))
        xp[:, :, padding:-padding, padding:-padding] = x
    else:
        xp = x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = cols @ k.reshape(cout, -1).T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is N x Cin x H x W, ``kernel`` Cout x Cin x Kh x Kw, ``bias`` Cout
    or None.  Output extent is ``(H + 2*padding - Kh) // stride + 1``.
    """
    _check_4d(x, "conv2d input")
    _check_4d(kernel, "conv2d kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if stride < 1 or padding < 0:
        raise ValueError(f"need stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    bdata = None if bias is None else bias.data
    out, cols = _conv2d_fwd(x.data, kernel.data, bdata, stride, padding)
    ho, wo = out.shape[2:]
    kmat = kernel.data.reshape(cout, -1)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def forward(xd, kd, bd=None):
        return _conv2d_fwd(xd, kd, bd, stride, padding)[0]

    return _record("conv2d", out, inputs, forward, backward,
                   {"stride": stride, "padding": padding})


def _conv_t_fwd(x, k, b, stride):
    n, cin, h, w = x.shape
    _, cout, kh, kw = k.shape
    xm = x.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = (xm @ k.reshape(cin, -1)).reshape(n, h, w, cout, kh, kw)
    out = np.zeros((n, cout, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if b is not None:
        out += b[None, :, None, None]
    return out, xm


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` (no padding); ``kernel`` is Cin x Cout x Kh x Kw.

    Output extent is ``(in - 1) * stride + K``.
    """
    _check_4d(x, "conv_transpose2d input")
    _check_4d(kernel, "conv_transpose2d kernel")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {cout} channels")

    bdata = None if bias is None else bias.data
    out, xm = _conv_t_fwd(x.data, kernel.data, bdata, stride)
    kmat = kernel.data.reshape(cin, -1)

    def backward(g):
        dcols, _, _ = _im2col(g, kh, kw, stride)
        dx = dk = db = None
        if x.requires_grad:
            dx = np.ascontiguousarray((dcols @ kmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            dk = (xm.T @ dcols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def forward(xd, kd, bd=None):
        return _conv_t_fwd(xd, kd, bd, stride)[0]

    return _record("conv_transpose2d", out, inputs, forward, backward, {"stride": stride})


# --------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class PoolIndices:
    """Argmax offsets recorded by :func:`maxpool2d_indices`.

    ``offsets[n, c, i, j]`` is the row-major offset, within the H x W plane of
    channel ``c`` of the pooled input, of the element that won window
    ``(i, j)``.
    """

    offsets: np.ndarray
    source_shape: tuple
    window: int = 2

    @property
    def shape(self) -> tuple:
        return self.offsets.shape


def _window_view(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // k, w // k, k * k)


def _pool_fwd(x, k):
    n, c, h, w = x.shape
    win = _window_view(x, k)
    arg = win.argmax(axis=-1)  # first maximum == lowest row-major offset
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(h // k)[:, None] * k + arg // k
    cols = np.arange(w // k)[None, :] * k + arg % k
    return out, rows * w + cols


def maxpool2d_indices(x: Tensor, window: int = 2) -> tuple:
    """Non-overlapping max pooling returning ``(pooled, PoolIndices)``.

    Ties go to the lowest row-major offset inside the window.
    """
    _check_4d(x, "maxpool2d input")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: extent {h}x{w} not divisible by window {window}")
    out, offsets = _pool_fwd(x.data, window)
    idx = PoolIndices(offsets, x.shape, window)
    flat = offsets.reshape(n, c, -1)

    def backward(g):
        dx = np.zeros((n, c, h * w))
        np.put_along_axis(dx, flat, g.reshape(n, c, -1), axis=2)
        return (dx.reshape(x.shape),)

    def forward(xd):
        return _pool_fwd(xd, window)[0]

    return _record("maxpool2d", out, (x,), forward, backward, {"indices": idx}), idx


def unpool2d(x: Tensor, indices: PoolIndices, target_shape: Optional[tuple] = None) -> Tensor:
    """Scatter ``x`` to the positions recorded in ``indices``; zeros elsewhere."""
    _check_4d(x, "unpool2d input")
    target = tuple(indices.source_shape if target_shape is None else target_shape)
    if x.shape != indices.shape:
        raise ShapeError(f"unpool2d: input shape {x.shape} != indices shape {indices.shape}")
    if len(target) != 4 or target[:2] != x.shape[:2]:
        raise ShapeError(f"unpool2d: target shape {target} incompatible with input {x.shape}")
    n, c, h, w = target
    flat = indices.offsets.reshape(n, c, -1)
    if flat.min() < 0 or flat.max() >= h * w:
        raise IndexError(f"unpool2d: pool index out of bounds for target plane {h}x{w}")

    def fwd(xd):
        out = np.zeros((n, c, h * w))
        np.put_along_axis(out, flat, xd.reshape(n, c, -1), axis=2)
        return out.reshape(target)

    def backward(g):
        return (np.take_along_axis(g.reshape(n, c, -1), flat, axis=2).reshape(x.shape),)

    return _record("unpool2d", fwd(x.data), (x,), fwd, backward, {"indices": indices})


# --------------------------------------------------------------------------
# shape plumbing


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate N x C_i x H x W tensors along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d(t, "concat_channels operand")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: shape {t.shape} does not match {ref} outside channels")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def forward(*arrays):
        return np.concatenate(arrays, axis=1)

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _record("concat", forward(*(t.data for t in tensors)), tensors, forward, backward)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    _check_4d(x, "upsample input")
    n, c, h, w = x.shape

    def forward(xd):
        return np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record("upsample_nearest2d", forward(x.data), (x,), forward, backward, {"factor": factor})


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    def forward(xd):
        return np.maximum(xd, 0.0)

    mask = x.data > 0
    return _record("relu", forward(x.data), (x,), forward, lambda g: (g * mask,))


def _sigmoid(xd):
    e = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record("sigmoid", s, (x,), _sigmoid, lambda g: (g * s * (1.0 - s),))


def _softmax2(xd):
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax2(x: Tensor) -> Tensor:
    """Per-pixel softmax across exactly two channels."""
    _check_4d(x, "softmax2 input")
    if x.shape[1] != 2:
        raise ShapeError(f"softmax2 needs exactly 2 channels, got {x.shape[1]}")
    s = _softmax2(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record("softmax2", s, (x,), _softmax2, backward)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax2": softmax2}


def apply_activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --------------------------------------------------------------------------
# batch normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance, updated as ``m*old + (1-m)*batch``."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean[...] = m * self.mean + (1.0 - m) * batch_mean
        self.var[...] = m * self.var + (1.0 - m) * batch_var


def _bn_train(x, gamma, beta):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = d * inv
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, xhat, inv, mu, var


def _bn_infer(x, gamma, beta, mean, var):
    inv = 1.0 / np.sqrt(var + BN_EPS)
    scale = (gamma * inv)[None, :, None, None]
    return (x - mean[None, :, None, None]) * scale + beta[None, :, None, None]


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                training: bool) -> Tensor:
    """Batch normalization over (N, H, W) per channel, epsilon 1e-5.

    Training mode normalizes by biased batch statistics and folds them into
    ``stats``; inference mode uses ``stats`` unchanged.
    """
    _check_4d(x, "batchnorm2d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")

    if training:
        out, xhat, inv, mu, var = _bn_train(x.data, gamma.data, beta.data)
        stats.update(mu.reshape(-1), var.reshape(-1))
        m = x.size // c

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = None
            if x.requires_grad:
                gsum = dbeta[None, :, None, None]
                gx = dgamma[None, :, None, None]
                dx = (gamma.data[None, :, None, None] * inv / m) * (m * g - gsum - xhat * gx)
            return dx, dgamma, dbeta

        def forward(xd, gd, bd):
            return _bn_train(xd, gd, bd)[0]

        return _record("batchnorm2d", out, (x, gamma, beta), forward, backward, {"training": True})

    mean = stats.mean.copy()
    var = stats.var.copy()
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]

    def backward_inf(g):
        dx = g * (gamma.data * inv)[None, :, None, None] if x.requires_grad else None
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    def forward_inf(xd, gd, bd):
        return _bn_infer(xd, gd, bd, mean, var)

    out = forward_inf(x.data, gamma.data, beta.data)
    return _record("batchnorm2d", out, (x, gamma, beta), forward_inf, backward_inf, {"training": False})


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record("add", a.data + b.data, (a, b), np.add, lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a same-shape Tensor or a constant array/scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        ad, bd = a.data, b.data
        return _record("mul", ad * bd, (a, b), np.multiply, lambda g: (g * bd, g * ad))
    const = np.asarray(b, dtype=DTYPE)
    return _record("mul", a.data * const, (a,), lambda ad: ad * const, lambda g: (g * const,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def forward(xd):
        return np.asarray(xd.sum())

    return _record("sum", forward(x.data), (x,), forward,
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def forward(xd):
        return np.asarray(xd.mean())

    return _record("mean", forward(x.data), (x,), forward,
                   lambda g: (np.full(shape, float(g) / n),))

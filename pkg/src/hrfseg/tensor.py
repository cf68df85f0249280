"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward()`` walks the recorded graph in reverse
topological order and accumulates gradients into ``.grad``. Only the
operations needed by the segmentation networks are provided: elementwise
arithmetic, activations, reductions, channel concatenation/slicing, 2D
convolution, stride-2 transposed convolution and 2x2 max pooling.

Convolutions use "same" (TensorFlow-style, possibly asymmetric) or
"valid" zero padding. With stride ``s`` the output spatial size is
``ceil(size / s)`` for "same" and ``(size - k) // s + 1`` for "valid".
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional real array, optionally tracking gradients.

    ``data`` is never mutated by operations; the only sanctioned in-place
    mutations are gradient accumulation during ``backward`` and optimizer
    parameter updates between training steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        ``seed`` defaults to ones (the usual case is a 0-d loss value).
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"backward seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )
        order = []
        visited = set()
        stack = [(self, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad_path():
                    continue
                _accumulate(parent, g)

    def requires_grad_path(self):
        return self.requires_grad or self._backward is not None

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def item(self):
        return float(self.data)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _pair(a, b):
    """Wrap operands, letting bare Python scalars adopt the tensor dtype."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if grad.shape != tensor.data.shape:
        raise ValueError(
            f"gradient shape {grad.shape} does not match tensor shape {tensor.data.shape}"
        )
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def _from_op(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad_path() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op(out, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _from_op(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _from_op(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _from_op(out, (a,), backward)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).astype(a.dtype),)

    return _from_op(out, (a,), backward)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis), 1.0 / count)


# -- activations ----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * (a.data > 0),)

    return _from_op(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never sees a large positive argument
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _from_op(out, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * sig,)

    return _from_op(out, (a,), backward)


def softmax_channels(a) -> Tensor:
    """Softmax over the channel axis of an (N, J, H, W) tensor."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ValueError(f"softmax_channels expects a 4D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, (a,), backward)


def log_softmax_channels(a) -> Tensor:
    """log(softmax) over the channel axis, stable for extreme logits."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ValueError(f"log_softmax_channels expects a 4D tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _from_op(out, (a,), backward)


# -- shape ops ------------------------------------------------------------


def concat_channels(a, b) -> Tensor:
    """Stack two (N, C, H, W) tensors along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4D tensors")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ValueError(
                f"concat_channels {name} mismatch: {a.shape[axis]} vs {b.shape[axis]}"
            )
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _from_op(out, (a, b), backward)


def slice_channels(a, start: int, stop: int) -> Tensor:
    """Select channels [start, stop) of an (N, C, H, W) tensor."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ValueError("slice_channels expects a 4D tensor")
    out = a.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _from_op(out, (a,), backward)


# -- convolution ----------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2D (transposed) convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        kh, kw = self.kernel
        if kh <= 0 or kw <= 0:
            raise ValueError("kernel dims must be positive")
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if self.padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("kernel dims must be odd with 'same' padding")


def _same_pad(size: int, kernel: int, stride: int):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _conv_geometry(h: int, w: int, spec: ConvSpec):
    kh, kw = spec.kernel
    s = spec.stride
    if spec.padding == "same":
        pt, pb = _same_pad(h, kh, s)
        pl, pr = _same_pad(w, kw, s)
        oh, ow = math.ceil(h / s), math.ceil(w / s)
    else:
        pt = pb = pl = pr = 0
        if h < kh or w < kw:
            raise ValueError(
                f"spatial dims ({h}x{w}) smaller than kernel {kh}x{kw} with 'valid' padding"
            )
        oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
    return (pt, pb, pl, pr), (oh, ow)


def _tap(x: np.ndarray, i: int, j: int, stride: int, oh: int, ow: int):
    """The (i, j) kernel-tap view of a padded array: one (N,C,oh,ow) slice."""
    return x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Unfold receptive fields into a (N*oh*ow, C*kh*kw) matrix, built
    directly in GEMM layout so no second transpose pass is needed."""
    n, c = xp.shape[:2]
    cols = np.empty((n, oh, ow, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = _tap(xp, i, j, stride, oh, ow).transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Adjoint of ``_im2col``: scatter-add columns back onto the padded grid."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            _tap(out, i, j, stride, oh, ow)[...] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _pad_input(x: np.ndarray, pads):
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _check_conv_args(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor, weight_shape):
    if x.data.ndim != 4:
        raise ValueError(f"conv input must be 4D (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input channel dim is {x.shape[1]} but spec.in_channels is {spec.in_channels}"
        )
    if weights.shape != weight_shape:
        raise ValueError(f"weight shape {weights.shape} does not match expected {weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ValueError(
            f"bias shape {bias.shape} does not match out_channels ({spec.out_channels},)"
        )


def conv2d(x, spec: ConvSpec, weights, bias) -> Tensor:
    """2D convolution of an (N, C, H, W) tensor.

    ``weights`` has shape (out_channels, in_channels, kh, kw) and ``bias``
    shape (out_channels,).
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    kh, kw = spec.kernel
    _check_conv_args(x, spec, weights, bias, (spec.out_channels, spec.in_channels, kh, kw))
    n, c, h, w = x.shape
    pads, (oh, ow) = _conv_geometry(h, w, spec)
    xp = _pad_input(x.data, pads)
    cols = _im2col(xp, kh, kw, spec.stride, oh, ow)
    w_mat = weights.data.reshape(spec.out_channels, -1)
    out = np.ascontiguousarray(
        (cols @ w_mat.T).reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)
    )
    out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        d_bias = g.sum(axis=(0, 2, 3))
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        d_weights = (g_mat.T @ cols).reshape(weights.shape)
        d_padded = _col2im(g_mat @ w_mat, xp.shape, kh, kw, spec.stride, oh, ow)
        pt, pb, pl, pr = pads
        d_x = d_padded[:, :, pt : pt + h, pl : pl + w]
        return d_x, d_weights, d_bias

    return _from_op(out, (x, weights, bias), backward)


def transposed_conv2d(x, spec: ConvSpec, weights, bias) -> Tensor:
    """Fractionally strided convolution: the adjoint of ``conv2d``.

    Maps (N, C, H, W) to (N, C', stride*H, stride*W); its forward pass is
    exactly the input-gradient pass of the corresponding strided ``conv2d``
    with 'same' padding. ``weights`` has shape (in_channels, out_channels,
    kh, kw) so the same array serves both directions of an adjoint pair.
    """
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    kh, kw = spec.kernel
    _check_conv_args(x, spec, weights, bias, (spec.in_channels, spec.out_channels, kh, kw))
    n, c, h, w = x.shape
    if h <= 0 or w <= 0:
        raise ValueError(f"spatial dims must be positive, got {h}x{w}")
    s = spec.stride
    out_h, out_w = s * h, s * w
    # geometry of the conv this op is the adjoint of
    if spec.padding == "same":
        pt, pb = _same_pad(out_h, kh, s)
        pl, pr = _same_pad(out_w, kw, s)
    else:
        pt = pb = pl = pr = 0
        out_h = (h - 1) * s + kh
        out_w = (w - 1) * s + kw
    padded_shape = (n, spec.out_channels, out_h + pt + pb, out_w + pl + pr)
    # x plays the output-gradient role of the conv this op is adjoint to
    x_mat = x.data.transpose(0, 2, 3, 1).reshape(-1, spec.in_channels)
    w_mat = weights.data.reshape(spec.in_channels, -1)
    full = _col2im(x_mat @ w_mat, padded_shape, kh, kw, s, h, w)
    out = np.ascontiguousarray(full[:, :, pt : pt + out_h, pl : pl + out_w])
    out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        d_bias = g.sum(axis=(0, 2, 3))
        gp = _pad_input(g, (pt, pb, pl, pr))
        g_cols = _im2col(gp, kh, kw, s, h, w)
        d_x = np.ascontiguousarray(
            (g_cols @ w_mat.T).reshape(n, h, w, spec.in_channels).transpose(0, 3, 1, 2)
        )
        d_weights = (x_mat.T @ g_cols).reshape(weights.shape)
        return d_x, d_weights, d_bias

    return _from_op(out, (x, weights, bias), backward)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 (spatial dims must be even).

    Provided as the alternative downsampling path; the standard builders
    use strided convolutions instead.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError("max_pool2d expects a 4D tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d requires even spatial dims, got {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        d_windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(d_windows, idx[..., None], g[..., None], axis=-1)
        d_x = d_windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (d_x.reshape(n, c, h, w),)

    return _from_op(out, (x,), backward)

"""Dense NCHW tensors with a reverse-mode gradient tape.

Only the layer vocabulary needed by the two segmentation networks is
provided: strided convolution and its transpose, batch normalization,
ReLU, dropout, channel softmax, weighted cross-entropy, an L2 kernel
penalty, elementwise addition and channel concatenation.

Every op preserves the floating dtype of its inputs, so float32 is used
for training and float64 for gradient checking.
"""
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GraphError, NonFiniteError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LOG_EPS = 1e-7

check_finite = True

# per thread, so concurrent inference threads cannot leave recording disabled
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-D float array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_consumed", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every leaf that requires them.

        The recorded graph is released afterwards; a second call without a
        fresh forward pass raises :class:`GraphError`.
        """
        if self._consumed:
            raise GraphError("backward called twice on the same graph; run forward again")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward, op):
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_ndim(t, ndim, what):
    if t.ndim != ndim:
        raise ShapeError(f"{what}: expected {ndim}-D tensor, got shape {t.shape}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _pads(size, k, stride, padding):
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ShapeError(f"kernel extent {k} exceeds input extent {size}")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1:
        return xp[:, :, :stride * oh:stride, :stride * ow:stride].reshape(n, c, oh * ow)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :stride * oh:stride, :stride * ow:stride]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, shape, kh, kw, stride, oh, ow):
    n, c, hp, wp = shape
    if kh == 1 and kw == 1 and stride == 1:
        return cols.reshape(shape)
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out


def _conv_geometry(h, w, kh, kw, stride, padding):
    oh, pt, pb = _pads(h, kh, stride, padding)
    ow, pl, pr = _pads(w, kw, stride, padding)
    return oh, ow, (pt, pb, pl, pr)


def _pad(x, p):
    pt, pb, pl, pr = p
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _unpad(x, p):
    pt, pb, pl, pr = p
    h, w = x.shape[2:]
    return x[:, :, pt:h - pb, pl:w - pr]


def _conv_forward(x, k, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    oh, ow, p = _conv_geometry(h, w, kh, kw, stride, padding)
    cols = _im2col(_pad(x, p), kh, kw, stride, oh, ow)
    return np.matmul(k.reshape(f, -1), cols).reshape(n, f, oh, ow)


def _conv_backward_input(g, k, in_shape, stride, padding):
    n, c, h, w = in_shape
    f, _, kh, kw = k.shape
    oh, ow, p = _conv_geometry(h, w, kh, kw, stride, padding)
    dcols = np.matmul(k.reshape(f, -1).T, g.reshape(n, f, oh * ow))
    padded = (n, c, h + p[0] + p[1], w + p[2] + p[3])
    return _unpad(_col2im(dcols, padded, kh, kw, stride, oh, ow), p)


def _conv_backward_kernel(g, x, kshape, stride, padding):
    n, c, h, w = x.shape
    f, _, kh, kw = kshape
    oh, ow, p = _conv_geometry(h, w, kh, kw, stride, padding)
    cols = _im2col(_pad(x, p), kh, kw, stride, oh, ow)
    gm = g.reshape(n, f, oh * ow)
    dk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
    return dk.reshape(kshape)


def conv2d(input, kernel, bias=None, stride=1, padding="same"):
    """2-D cross-correlation of ``input[N,C,H,W]`` with ``kernel[F,C,kh,kw]``.

    ``same`` padding gives an output of ``ceil(H / stride)``; padding is
    split as evenly as possible, with the extra pixel at the bottom/right.
    """
    input, kernel = as_tensor(input), as_tensor(kernel)
    _check_ndim(input, 4, "conv2d input")
    _check_ndim(kernel, 4, "conv2d kernel")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if kernel.shape[1] != input.shape[1]:
        raise ShapeError(
            f"conv2d: kernel expects {kernel.shape[1]} input channels, input has {input.shape[1]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[0]},)")
    x, k = input.data, kernel.data
    out = _conv_forward(x, k, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = _conv_backward_input(g, k, x.shape, stride, padding) if input.requires_grad else None
        gk = _conv_backward_kernel(g, x, k.shape, stride, padding) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (input, kernel) if bias is None else (input, kernel, bias)
    return _result(out, parents, backward, "conv2d")


def conv2d_transpose(input, kernel, bias=None, stride=2, output_size=None):
    """Stride-2 transposed convolution: ``[N,C,H,W] -> [N,F,2H,2W]``.

    ``kernel`` has shape ``[C,F,kh,kw]``; the op is the exact adjoint of
    ``conv2d(., kernel, stride=2, padding="same")`` applied to an image of
    ``output_size`` (default ``(2H, 2W)``; ``2H - 1`` is also valid since
    both halve to ``H``).
    """
    input, kernel = as_tensor(input), as_tensor(kernel)
    _check_ndim(input, 4, "conv2d_transpose input")
    _check_ndim(kernel, 4, "conv2d_transpose kernel")
    if stride != 2:
        raise ShapeError("conv2d_transpose only supports stride 2 (output must double)")
    if kernel.shape[0] != input.shape[1]:
        raise ShapeError(
            f"conv2d_transpose: kernel expects {kernel.shape[0]} input channels, input has {input.shape[1]}")
    x, k = input.data, kernel.data
    n, c, h, w = x.shape
    f = k.shape[1]
    th, tw = output_size if output_size is not None else (2 * h, 2 * w)
    out_shape = (n, f, th, tw)
    oh, ow, _ = _conv_geometry(th, tw, k.shape[2], k.shape[3], 2, "same")
    if (oh, ow) != (h, w):
        raise ShapeError(f"conv2d_transpose: output size {(th, tw)} does not halve to {(h, w)}")
    out = _conv_backward_input(x, k, out_shape, 2, "same")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} != ({f},)")
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = _conv_forward(g, k, 2, "same") if input.requires_grad else None
        gk = _conv_backward_kernel(x, g, k.shape, 2, "same") if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (input, kernel) if bias is None else (input, kernel, bias)
    return _result(out, parents, backward, "conv2d_transpose")


# --------------------------------------------------------------------------
# normalization and activations
# --------------------------------------------------------------------------

class RunningStats:
    """Exponential moving averages of per-channel mean and variance."""

    def __init__(self, channels, momentum=BN_MOMENTUM):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum


def batch_norm(input, gamma, beta, running_stats, training=True, eps=BN_EPS):
    input, gamma, beta = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    _check_ndim(input, 4, "batch_norm input")
    c = input.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    x = input.data
    if training:
        n, _, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise ShapeError("batch_norm in training mode needs N*H*W >= 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running_stats is not None:
            mom = running_stats.momentum
            rs_dtype = running_stats.mean.dtype
            running_stats.mean = (mom * running_stats.mean + (1 - mom) * mean).astype(rs_dtype)
            running_stats.var = (mom * running_stats.var
                                 + (1 - mom) * var * (m / (m - 1))).astype(rs_dtype)
    else:
        mean = running_stats.mean.astype(x.dtype)
        var = running_stats.var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if input.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _result(out, (input, gamma, beta), backward, "batch_norm")


def relu(input):
    input = as_tensor(input)
    x = input.data
    mask = x > 0
    out = np.where(mask, x, 0).astype(x.dtype)
    return _result(out, (input,), lambda g: (g * mask,), "relu")


def dropout_mask(shape, p, key):
    """Keep-mask for dropout, drawn from a counter-based stream keyed by ``key``.

    ``key`` is a tuple of non-negative ints such as (seed, layer id, step).
    """
    rng = np.random.Generator(np.random.Philox(key=np.random.SeedSequence(list(key)).generate_state(2)))
    return rng.random(shape) >= p


def dropout(input, p, training, key=(0,)):
    """Inverted dropout; identity (the same object) outside training or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    input = as_tensor(input)
    if not training or p == 0:
        return input
    x = input.data
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    keep = dropout_mask(x.shape, p, key)
    mult = keep.astype(x.dtype) * scale
    return _result(x * mult, (input,), lambda g: (g * mult,), "dropout")


def softmax_channels(input):
    """Softmax over axis 1 of an ``[N,C,H,W]`` tensor."""
    input = as_tensor(input)
    _check_ndim(input, 4, "softmax_channels input")
    x = input.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (input,), backward, "softmax_channels")


# --------------------------------------------------------------------------
# losses and structural ops
# --------------------------------------------------------------------------

def weighted_cross_entropy(probs, target, class_weights, eps=LOG_EPS):
    """Mean over pixels of ``-w[target] * log(p[target])``.

    ``probs`` is ``[N,K,H,W]`` (softmax output) and ``target`` an integer
    array ``[N,H,W]`` with values in ``0..K-1``.
    """
    probs = as_tensor(probs)
    _check_ndim(probs, 4, "weighted_cross_entropy probs")
    target = np.asarray(target)
    n, k, h, w = probs.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} != {(n, h, w)}")
    weights = np.asarray(class_weights, dtype=probs.dtype)
    if weights.shape != (k,):
        raise ShapeError(f"need {k} class weights, got {weights.shape}")
    if target.min() < 0 or target.max() >= k:
        raise ShapeError("target labels out of range")
    t = target.astype(np.intp)[:, None]
    p_t = np.take_along_axis(probs.data, t, axis=1)[:, 0]
    clipped = np.maximum(p_t, eps)
    w_t = weights[target]
    npix = n * h * w
    loss = np.asarray(-(w_t * np.log(clipped)).sum() / npix, dtype=probs.dtype)

    def backward(g):
        gp = np.zeros_like(probs.data)
        local = np.where(p_t > eps, -w_t / (clipped * npix), 0).astype(probs.dtype)
        np.put_along_axis(gp, t, (g * local)[:, None], axis=1)
        return (gp,)

    return _result(loss, (probs,), backward, "weighted_cross_entropy")


def l2_penalty(kernels, scale=0.1):
    """``scale * sum ||W||^2`` over the given kernel tensors."""
    kernels = [as_tensor(k) for k in kernels]
    dtype = kernels[0].dtype if kernels else np.float32
    total = sum((np.sum(np.square(k.data), dtype=np.float64) for k in kernels), 0.0)
    out = np.asarray(scale * total, dtype=dtype)

    def backward(g):
        return tuple((2.0 * scale * g * k.data).astype(k.dtype) for k in kernels)

    return _result(out, tuple(kernels), backward, "l2_penalty")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_ndim(a, 4, "concat_channels a")
    _check_ndim(b, 4, "concat_channels b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")

"""Dense layer primitives for the two architectures.

Tensors are plain ``numpy.ndarray`` objects. Every spatial op accepts either a
single image ``(C, H, W)`` or a batch ``(N, C, H, W)`` and returns the same rank.
Convolutions are valid (no padding) with stride 1, pooling is 2x2 with stride 2.
"""

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError

KERNEL = 5
TAPS = KERNEL * KERNEL


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"

    def __call__(self, x):
        if self is Activation.RELU:
            return np.maximum(x, 0)
        # tanh form avoids overflow in exp for large |x|
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    def derivative(self, pre):
        """Derivative evaluated at the pre-activation ``pre``; ReLU'(0) is 0."""
        if self is Activation.RELU:
            return (pre > 0).astype(pre.dtype)
        s = self(pre)
        return s * (1 - s)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown activation {value!r}; expected 'relu' or 'sigmoid'") from None


@dataclass
class PoolTrace:
    output: np.ndarray
    # window-local index of the winner: 0=(0,0) 1=(0,1) 2=(1,0) 3=(1,1)
    argmax: np.ndarray


def _batched(x, name="input"):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must have rank 3 (C,H,W) or 4 (N,C,H,W), got shape {x.shape}", "rank")


def _patches(x):
    """(N, C, H, W) -> (N, C, Ho*Wo, 25) contiguous im2col view."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))
    return win.reshape(n, c, (h - KERNEL + 1) * (w - KERNEL + 1), TAPS)


def _check_spatial(x, name="input"):
    h, w = x.shape[-2:]
    if h < KERNEL:
        raise ShapeError(f"{name} height {h} is smaller than the {KERNEL}x{KERNEL} kernel", "H")
    if w < KERNEL:
        raise ShapeError(f"{name} width {w} is smaller than the {KERNEL}x{KERNEL} kernel", "W")


def conv2d_grouped(x, filters, groups=None):
    """Per-channel convolution: channel ``c`` is filtered by its own ``K`` kernels.

    ``filters`` has shape ``(C, K, 5, 5)``; output channel ``c*K + k`` holds
    channel ``c`` convolved with ``filters[c, k]``. No bias.
    """
    xb, single = _batched(x)
    filters = np.asarray(filters)
    n, c, h, w = xb.shape
    if filters.ndim != 4:
        raise ShapeError(f"filters must be (C, K, 5, 5), got {filters.shape}", "rank")
    if groups is not None and groups != c:
        raise ShapeError(f"groups={groups} must equal the input channel count {c}", "groups")
    if filters.shape[0] != c:
        raise ShapeError(f"filters cover {filters.shape[0]} channels but input has {c}", "C")
    if filters.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"filter spatial size must be 5x5, got {filters.shape[2:]}", "kernel")
    _check_spatial(xb)
    k = filters.shape[1]
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    cols = _patches(xb)  # (N, C, P, 25)
    kern = filters.reshape(c, k, TAPS).transpose(0, 2, 1)  # (C, 25, K)
    out = np.matmul(cols, kern)  # (N, C, P, K)
    out = out.transpose(0, 1, 3, 2).reshape(n, c * k, ho, wo)
    return out[0] if single else out


def conv2d_grouped_filter_grad(x, dout, k, accumulate=np.float64):
    """Gradient of the grouped conv with respect to its filters.

    Sums over batch and every spatial position; the products are accumulated in
    ``accumulate`` precision and cast back to the input dtype.
    """
    xb, _ = _batched(x)
    db, _ = _batched(dout, "dout")
    n, c = xb.shape[:2]
    cols = _patches(xb).astype(accumulate, copy=False)  # (N, C, P, 25)
    p = cols.shape[2]
    d = db.reshape(n, c, k, p).astype(accumulate, copy=False)
    a = d.transpose(1, 2, 0, 3).reshape(c, k, n * p)
    b = cols.transpose(1, 0, 2, 3).reshape(c, n * p, TAPS)
    grad = np.matmul(a, b).reshape(c, k, KERNEL, KERNEL)
    return grad.astype(xb.dtype, copy=False)


def conv2d_full(x, filters, bias=None):
    """Full-depth convolution: ``out[f] = bias[f] + sum_c filters[f, c] * x[c]``."""
    xb, single = _batched(x)
    filters = np.asarray(filters)
    n, c, h, w = xb.shape
    if filters.ndim != 4 or filters.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"filters must be (F, C, 5, 5), got {filters.shape}", "kernel")
    if filters.shape[1] != c:
        raise ShapeError(f"filters expect {filters.shape[1]} input channels but input has {c}", "C")
    _check_spatial(xb)
    f = filters.shape[0]
    ho, wo = h - KERNEL + 1, w - KERNEL + 1
    win = sliding_window_view(xb, (KERNEL, KERNEL), axis=(2, 3))  # (N, C, Ho, Wo, 5, 5)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * TAPS)
    out = cols @ filters.reshape(f, c * TAPS).T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (f,):
            raise ShapeError(f"bias must have shape ({f},), got {bias.shape}", "bias")
        out = out + bias
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_full_backward(x, filters, dout, need_input_grad=True):
    """Returns ``(dx, dfilters, dbias)`` for :func:`conv2d_full`."""
    xb, single = _batched(x)
    db, _ = _batched(dout, "dout")
    n, c, h, w = xb.shape
    f = filters.shape[0]
    ho, wo = db.shape[2:]
    win = sliding_window_view(xb, (KERNEL, KERNEL), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * TAPS)
    d2 = db.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dfilters = (d2.T @ cols).reshape(filters.shape)
    dbias = d2.sum(axis=0)
    dx = None
    if need_input_grad:
        pad = KERNEL - 1
        dpad = np.pad(db, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dwin = sliding_window_view(dpad, (KERNEL, KERNEL), axis=(2, 3))  # (N, F, H, W, 5, 5)
        flipped = filters[:, :, ::-1, ::-1]
        dx = np.einsum("nfhwuv,fcuv->nchw", dwin, flipped, optimize=True)
        if single:
            dx = dx[0]
    return dx, dfilters, dbias


def maxpool2x2(x):
    """Non-overlapping 2x2 max-pool; ties go to the lowest window-local index."""
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if h % 2:
        raise ShapeError(f"max-pool needs an even height, got {h}", "H")
    if w % 2:
        raise ShapeError(f"max-pool needs an even width, got {w}", "W")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if single:
        return PoolTrace(out[0], arg[0])
    return PoolTrace(out, arg)


def maxpool2x2_backward(dout, argmax):
    """Route each pooled cell's sensitivity to its winning input element."""
    db, single = _batched(dout, "dout")
    ab = argmax[None] if single else argmax
    n, c, ph, pw = db.shape
    win = np.zeros((n, c, ph, pw, 4), dtype=db.dtype)
    np.put_along_axis(win, ab[..., None], db[..., None], axis=-1)
    dx = win.reshape(n, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ph, 2 * pw)
    return dx[0] if single else dx


def dense_forward(x, weights, bias=None):
    x = np.asarray(x)
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise ShapeError(f"weights must be 2-D (n, m), got {weights.shape}", "rank")
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"input length {x.shape[-1]} does not match weight rows {weights.shape[0]}", "n")
    out = x @ weights
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"bias must have shape ({weights.shape[1]},), got {bias.shape}", "bias")
        out = out + bias
    return out


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label):
    """Softmax cross-entropy.

    For a single logit vector returns ``(loss, softmax - onehot)``. For a batch
    ``(N, classes)`` with ``N`` labels returns the mean loss and the gradient of
    that mean, i.e. ``(softmax - onehot) / N``.
    """
    logits = np.asarray(logits)
    classes = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu":
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range 0..{classes - 1}: {labels.min()}..{labels.max()}")
    lp = log_softmax(logits.reshape(-1, classes))
    if lp.shape[0] != labels.shape[0]:
        raise ShapeError(f"{lp.shape[0]} logit rows but {labels.shape[0]} labels", "N")
    rows = np.arange(labels.shape[0])
    losses = -lp[rows, labels]
    grad = np.exp(lp)
    grad[rows, labels] -= 1
    if logits.ndim == 1:
        return float(losses[0]), grad[0]
    n = labels.shape[0]
    return float(losses.mean()), grad / n

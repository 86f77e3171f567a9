"""Differentiable operators used by the backbone, heads and losses.

Every op takes and returns :class:`~medusa.tensor.Tensor` and records a
backward rule when any input requires gradients. Feature maps are NCHW.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from medusa import kernels
from medusa.errors import DegenerateVarianceError, InvalidArgumentError, InvalidLabelError, InvalidShapeError
from medusa.tensor import Tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in:
        raise InvalidShapeError(f"conv2d: input has {c_in} channels, weight expects {wc_in}")
    if k != k2 or k % 2 == 0:
        raise InvalidShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias is not None and bias.shape != (c_out,):
        raise InvalidShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} outputs")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError("conv2d: stride must be >= 1 and padding >= 0")
    oh, ow = kernels.out_size(h, k, stride, padding), kernels.out_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise InvalidShapeError(f"conv2d: input {h}x{w} too small for kernel {k}")

    w2 = weight.data.reshape(c_out, c_in * k * k)
    pointwise = k == 1 and stride == 1 and padding == 0
    cols = x.data.reshape(n, c_in, h * w) if pointwise else kernels.im2col(x.data, k, stride, padding)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, c_out, oh, ow)

    def _backward(g: np.ndarray):
        g2 = g.reshape(n, c_out, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, c_in, h, w, k, stride, padding)
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, _backward, "conv2d")


# ------------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as is conventional).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise InvalidShapeError(f"batch_norm: channel mismatch for input {x.shape}")
    if eps <= 0:
        raise InvalidArgumentError("batch_norm: eps must be positive")
    n, c, h, w = x.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if m < 2:
            raise DegenerateVarianceError("batch_norm: need more than one value per channel in training mode")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
        centered = x.data - mean.reshape(shape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def _backward(g: np.ndarray):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3)).reshape(shape)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
                gx = (inv_std.reshape(shape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(shape)
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), _backward, "batch_norm")


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# largest double below 1 and smallest normal above 0: float64 rounding would
# otherwise return exactly 1.0 for z > ~36.7 and exactly 0.0 below ~-745
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "hadamard")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,), "scale")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def add_all(terms: list[Tensor]) -> Tensor:
    if not terms:
        raise InvalidArgumentError("add_all: empty list")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ----------------------------------------------------------------- structure


def concat_channels(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise InvalidShapeError("concat_channels: empty list")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise InvalidShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g: np.ndarray):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tuple(tensors), _backward, "concat_channels")


@lru_cache(maxsize=64)
def bilinear_matrix(size: int, factor: int) -> np.ndarray:
    """(size*factor, size) interpolation matrix with half-pixel centres and edge clamping."""
    out = size * factor
    mat = np.zeros((out, size))
    for i in range(out):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    mat.setflags(write=False)
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"upsample_bilinear: factor must be an integer >= 1, got {factor}")
    if x.ndim != 4:
        raise InvalidShapeError(f"upsample_bilinear expects NCHW input, got {x.shape}")
    factor = int(factor)
    if factor == 1:
        return x
    uh = bilinear_matrix(x.shape[2], factor)
    uw = bilinear_matrix(x.shape[3], factor)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make_result(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),), "upsample_bilinear")


# -------------------------------------------------------------------- losses


def l1_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    size = diff.size
    return make_result(np.asarray(np.abs(diff).mean()), (pred,), lambda g: (np.sign(diff) * (g / size),), "l1_loss")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, ignore_index: int = 255) -> Tensor:
    """Mean per-pixel softmax cross-entropy over non-ignored pixels.

    ``logits`` is N×K×H×W, ``labels`` N×H×W integer class ids.
    """
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise InvalidShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise InvalidLabelError(f"cross_entropy: labels outside [0, {k})")
    count = int(valid.sum())
    logp = _log_softmax(logits.data)
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0

    def _backward(g: np.ndarray):
        if not count:
            return (np.zeros_like(logp),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (g / count)
        return (grad,)

    return make_result(np.asarray(loss), (logits,), _backward, "cross_entropy")


def weighted_bce(logits: Tensor, target, pos_weight: float) -> Tensor:
    """Binary cross-entropy with ``pos_weight`` on the positive term and ``1 - pos_weight`` on the negative."""
    if not 0.0 < pos_weight <= 1.0:
        raise InvalidArgumentError(f"weighted_bce: pos_weight must be in (0, 1], got {pos_weight}")
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise InvalidShapeError(f"weighted_bce: {logits.shape} vs {target.shape}")
    z = logits.data
    # log(sigmoid(z)) and log(1 - sigmoid(z)) without overflow
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    wp, wn = pos_weight, 1.0 - pos_weight
    loss = -(wp * target * log_p + wn * (1.0 - target) * log_q).mean()
    size = z.size

    def _backward(g: np.ndarray):
        s = _sigmoid(z)
        return ((wn * (1.0 - target) * s - wp * target * (1.0 - s)) * (g / size),)

    return make_result(np.asarray(loss), (logits,), _backward, "weighted_bce")

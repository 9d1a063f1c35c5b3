"""Convolution, pooling, normalization and squeeze-excitation ops.

Convolutions use im2col: strided window views of the padded input are copied
into a ``[N*H'*W', C*kh*kw]`` matrix and hit a single BLAS matmul. The
transposed convolution is implemented as the exact adjoint (col2im of
``input @ weight``), so ``<conv2d(x), y> == <x, conv_transpose2d(y)>`` holds by
construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DegenerateBatchError, ParameterError, ShapeError
from .tensor import (
    DiffTensor,
    as_tensor,
    linear,
    make_result,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    squeeze,
    unsqueeze,
)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ParameterError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """View of shape ``[N, C, ho, wo, kh, kw]`` over a padded 4-d array."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _scatter_windows(cols: np.ndarray, out: np.ndarray, sh: int, sw: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: add ``cols[N, C, ho, wo, kh, kw]`` into ``out``."""
    _, _, ho, wo, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, :, :, :, i, j]
    return out


def _im2col(xc: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """``[C, N, Hp, Wp]`` to the ``[C*kh*kw, N*ho*wo]`` patch matrix."""
    c, n = xc.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: accumulate patches into a ``[C, N, Hp, Wp]`` buffer."""
    c, n = shape[:2]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, i, j]
    return out


def _channel_first(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3))


def conv2d(x, weight, bias=None, stride=1, padding=0) -> DiffTensor:
    """2-d cross-correlation, ``x: [N, Cin, H, W]``, ``weight: [Cout, Cin, kh, kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input channels of {x.shape} do not match weight {weight.shape}")
    if kh < 1 or kw < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ParameterError(f"conv2d: bad geometry kernel=({kh},{kw}) stride=({sh},{sw}) padding=({ph},{pw})")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d: padded input {x.shape} smaller than kernel {weight.shape[2:]}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1

    xc = np.zeros((cin, n, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xc[:, :, ph : ph + h, pw : pw + w] = x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xc, kh, kw, sh, sw, ho, wo)
    del xc
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(cout, 1)
        parents.append(bias)
    out = _channel_first(out.reshape(cout, n, ho, wo))

    def backward(g):
        gm = _channel_first(g).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dxc = _col2im(wmat.T @ gm, (cin, n, h + 2 * ph, w + 2 * pw), kh, kw, sh, sw, ho, wo)
            gx = _channel_first(dxc[:, :, ph : ph + h, pw : pw + w])
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return make_result(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> DiffTensor:
    """Transposed 2-d convolution, ``weight: [Cin, Cout, kh, kw]``.

    Output size per axis is ``(H - 1) * stride - 2 * padding + kernel + output_padding``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if oph >= sh or opw >= sw or oph < 0 or opw < 0:
        raise ParameterError(f"output_padding ({oph},{opw}) must be non-negative and < stride ({sh},{sw})")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv_transpose2d: input channels of {x.shape} do not match weight {weight.shape}")
    ho = (h - 1) * sh - 2 * ph + kh + oph
    wo = (w - 1) * sw - 2 * pw + kw + opw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output size ({ho},{wo}) is empty for input {x.shape}")
    full = (cout, n, (h - 1) * sh + kh + oph, (w - 1) * sw + kw + opw)

    xm = _channel_first(x.data).reshape(cin, -1)
    wmat = weight.data.reshape(cin, -1)
    buf = _col2im(wmat.T @ xm, full, kh, kw, sh, sw, h, w)
    out = buf[:, :, ph : ph + ho, pw : pw + wo]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(cout, 1, 1, 1)
        parents.append(bias)
    out = _channel_first(out)

    def backward(g):
        gbuf = np.zeros(full, dtype=g.dtype)
        gbuf[:, :, ph : ph + ho, pw : pw + wo] = g.transpose(1, 0, 2, 3)
        gcols = _im2col(gbuf, kh, kw, sh, sw, h, w)
        gx = _channel_first((wmat @ gcols).reshape(cin, n, h, w)) if x.requires_grad else None
        gw = (xm @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, backward)


def conv1d(x, weight, bias=None, stride=1, padding=0) -> DiffTensor:
    """1-d cross-correlation, ``x: [N, Cin, L]``, ``weight: [Cout, Cin, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input channels of {x.shape} do not match weight {weight.shape}")
    out = conv2d(unsqueeze(x, 2), unsqueeze(weight, 2), bias, stride=(1, int(stride)), padding=(0, int(padding)))
    return squeeze(out, 2)


def avg_pool2d(x, kernel, stride=None) -> DiffTensor:
    x = as_tensor(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"avg_pool2d: input {x.shape} smaller than kernel ({kh},{kw})")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = _windows(x.data, kh, kw, sh, sw, ho, wo)
    out = win.mean(axis=(4, 5), dtype=np.float64).astype(x.dtype)

    def backward(g):
        cols = np.broadcast_to((g / (kh * kw))[..., None, None], (n, c, ho, wo, kh, kw))
        return (_scatter_windows(cols, np.zeros(x.shape, dtype=x.dtype), sh, sw),)

    return make_result(out, (x,), backward)


def nearest_upsample2d(x, factor) -> DiffTensor:
    x = as_tensor(x)
    fh, fw = _pair(factor)
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample2d expects [N, C, H, W], got {x.shape}")
    if fh < 1 or fw < 1:
        raise ParameterError(f"upsample factor must be >= 1, got ({fh},{fw})")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: DiffTensor
    beta: DiffTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=DiffTensor(np.ones(channels), requires_grad=True),
            beta=DiffTensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            momentum=momentum,
            eps=eps,
        )


def batch_norm(x, state: BatchNormState) -> DiffTensor:
    """Normalize each channel of ``x: [N, C, ...]`` over batch and spatial axes.

    In training mode the running statistics in ``state`` are updated in place.
    """
    x = as_tensor(x)
    gamma, beta = state.gamma, state.beta
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm: input {x.shape} does not have {gamma.shape[0]} channels on axis 1")
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    count = x.size // c

    if state.training:
        if count < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs >1 value per channel, input {x.shape}")
        x64 = x.data.astype(np.float64)
        mu = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * var * count / (count - 1)).astype(np.float32)
    else:
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = ((x.data - mu.reshape(bshape)) * invstd.reshape(bshape)).astype(x.dtype)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = state.training

    def backward(g):
        g64 = g.astype(np.float64)
        ggamma = (g64 * xhat).sum(axis=axes).astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = g64.sum(axis=axes).astype(beta.dtype) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale_ = (gamma.data.astype(np.float64) * invstd).reshape(bshape)
            if training:
                dxhat = g64
                s1 = dxhat.mean(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).mean(axis=axes).reshape(bshape)
                gx = (scale_ * (dxhat - s1 - xhat * s2)).astype(x.dtype)
            else:
                gx = (g64 * scale_).astype(x.dtype)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def se_hidden(channels: int, reduction: int = 8) -> int:
    return max(1, channels // reduction)


def squeeze_excite(x, w1, b1, w2, b2) -> DiffTensor:
    """Channel gating ``x * sigmoid(W2 relu(W1 avgpool(x)))``.

    ``w1: [hidden, C]`` and ``w2: [C, hidden]``; works for any number of
    trailing spatial axes.
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"squeeze_excite expects [N, C, ...], got {x.shape}")
    n, c = x.shape[:2]
    if w1.shape[1] != c or w2.shape[0] != c or w2.shape[1] != w1.shape[0]:
        raise ShapeError(f"squeeze_excite: weights {w1.shape}, {w2.shape} incompatible with {c} channels")
    pooled = mean(x, axis=tuple(range(2, x.ndim)))
    s = sigmoid(linear(relu(linear(pooled, w1, b1)), w2, b2))
    return mul(x, reshape(s, (n, c) + (1,) * (x.ndim - 2)))

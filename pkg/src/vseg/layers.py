"""Layer primitives with hand-derived backward passes.

Five building blocks: zero-padded 3D convolution, strided convolution
(convolve then subsample), deconvolution (nearest-neighbor voxel
repetition then convolve), per-channel parametric ReLU, and batch
normalization over spatial positions.

Convolution here means cross-correlation: the kernel is applied without
flipping.  Activations are (channels, depth, height, width).  All
forward/backward pairs work at whatever float dtype the inputs carry,
so the same code runs the 32-bit training path and the 64-bit
finite-difference checks.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class ConvParams:
    """Kernel (out_channels, in_channels, k, k, k) and per-channel bias."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def ksize(self):
        return self.weights.shape[2]


@dataclass
class PReluParams:
    """One learned negative-half slope per channel."""

    slopes: np.ndarray


@dataclass
class BatchNormState:
    """Per-channel scale/shift plus running statistics.

    The running mean and running standard deviation follow
    new = momentum * old + (1 - momentum) * current
    after every training-mode forward.  Inference normalizes with the
    running values; epsilon keeps both modes finite at zero variance.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_std: np.ndarray
    momentum: float = 0.5
    epsilon: float = 1e-5


def _check_image(x):
    if x.ndim != 4:
        raise ValueError(f"expected (channels, d, h, w) activation, got rank {x.ndim}")


def _windows(x, k):
    """Zero-pad to preserve extents, then expose k^3 neighborhoods."""
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k, k), axis=(1, 2, 3))


def conv3d_forward(x, p):
    """Same-extent zero-padded convolution.

    y[o, z] = sum_{c, d} x[c, z + d - pad] * w[o, c, d] + b[o]
    """
    _check_image(x)
    cout, cin, k = p.weights.shape[0], p.weights.shape[1], p.ksize
    if k % 2 != 1:
        raise ValueError(f"kernel extent must be odd, got {k}")
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, kernel expects {cin}")
    win = _windows(x, k)
    y = np.tensordot(p.weights, win, axes=((1, 2, 3, 4), (0, 4, 5, 6)))
    return y + p.bias[:, None, None, None]


def conv3d_backward(x, p, grad_out):
    """Gradients of conv3d_forward w.r.t. input, weights and bias.

    The input gradient is the correlation of the upstream gradient with
    the spatially flipped, channel-transposed kernel; the weight
    gradient correlates the upstream gradient against input windows.
    """
    _check_image(grad_out)
    if grad_out.shape != (p.weights.shape[0],) + x.shape[1:]:
        raise ValueError(
            f"upstream gradient shape {grad_out.shape} does not match "
            f"output shape {(p.weights.shape[0],) + x.shape[1:]}"
        )
    k = p.ksize
    wf = np.flip(p.weights, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4)
    gwin = _windows(grad_out, k)
    dx = np.tensordot(wf, gwin, axes=((1, 2, 3, 4), (0, 4, 5, 6)))
    xwin = _windows(x, k)
    dw = np.tensordot(grad_out, xwin, axes=((1, 2, 3), (1, 2, 3)))
    db = grad_out.sum(axis=(1, 2, 3))
    return dx, dw, db


def subsample(y, stride):
    """Keep voxels whose indices are congruent to 0 modulo stride."""
    return np.ascontiguousarray(y[:, ::stride, ::stride, ::stride])


def conv3d_strided_forward(x, p, stride=2):
    """Convolve at full resolution, then keep every stride-th voxel.

    Spatial extents must divide by the stride; anything else is an
    error rather than an implicit pad or crop.
    """
    _check_image(x)
    for n in x.shape[1:]:
        if n % stride != 0:
            raise ValueError(
                f"extent {n} not divisible by stride {stride} in shape {x.shape[1:]}"
            )
    return subsample(conv3d_forward(x, p), stride)


def conv3d_strided_backward(x, p, grad_out, stride=2):
    """Scatter the upstream gradient back onto the kept positions, then
    run the plain convolution backward."""
    full = np.zeros((p.weights.shape[0],) + x.shape[1:], dtype=grad_out.dtype)
    full[:, ::stride, ::stride, ::stride] = grad_out
    return conv3d_backward(x, p, full)


def repeat_voxels(x, factor=2):
    """Nearest-neighbor upsampling: repeat each voxel along every
    spatial axis."""
    return x.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)


def deconv3d_forward(x, p):
    """Double every spatial extent by voxel repetition, then convolve.

    The kernel is fixed at 3x3x3: after repetition a 3-wide window is
    what lets corner voxels depend on one source voxel and interior
    voxels blend two neighbors per axis.
    """
    _check_image(x)
    if p.ksize != 3:
        raise ValueError(f"deconvolution kernel must be 3x3x3, got {p.ksize}")
    return conv3d_forward(repeat_voxels(x), p)


def deconv3d_backward(x, p, grad_out):
    """Backward of repeat-then-convolve.

    Convolution backward gives the gradient on the repeated grid; the
    repetition adjoint sums each 2x2x2 block back onto its source voxel.
    """
    r = repeat_voxels(x)
    dr, dw, db = conv3d_backward(r, p, grad_out)
    c, nd, nh, nw = x.shape
    dx = dr.reshape(c, nd, 2, nh, 2, nw, 2).sum(axis=(2, 4, 6))
    return dx, dw, db


def prelu_forward(x, p):
    """f(x) = max(0, x) + slope_c * min(0, x), slope per channel."""
    _check_image(x)
    if p.slopes.shape != (x.shape[0],):
        raise ValueError(
            f"need one slope per channel: {p.slopes.shape} vs {x.shape[0]} channels"
        )
    a = p.slopes[:, None, None, None]
    return np.where(x >= 0, x, a * x)


def prelu_backward(x, p, grad_out):
    """d/dx is 1 on the non-negative half, slope_c on the negative half;
    d/dslope_c collects grad * x over the channel's negative voxels."""
    a = p.slopes[:, None, None, None]
    dx = np.where(x >= 0, grad_out, a * grad_out)
    da = np.where(x < 0, grad_out * x, 0.0).sum(axis=(1, 2, 3)).astype(p.slopes.dtype)
    return dx, da


def batchnorm_forward(x, s, mode="train"):
    """Normalize each channel over its spatial positions.

    Train mode uses the statistics of the current volume (one volume is
    the whole batch) and pushes them into the running averages.  Infer
    mode is a fixed per-channel affine map built from the running
    averages.
    """
    _check_image(x)
    if mode == "train":
        mu = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        std = np.sqrt(var + s.epsilon)
        xhat = (x - mu[:, None, None, None]) / std[:, None, None, None]
        y = s.gamma[:, None, None, None] * xhat + s.beta[:, None, None, None]
        s.running_mean = (s.momentum * s.running_mean + (1.0 - s.momentum) * mu).astype(
            s.running_mean.dtype
        )
        s.running_std = (s.momentum * s.running_std + (1.0 - s.momentum) * std).astype(
            s.running_std.dtype
        )
        return y
    if mode == "infer":
        denom = (s.running_std + s.epsilon)[:, None, None, None]
        xhat = (x - s.running_mean[:, None, None, None]) / denom
        return s.gamma[:, None, None, None] * xhat + s.beta[:, None, None, None]
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def batchnorm_backward(x, s, grad_out, mode="train"):
    """Gradients w.r.t. input, gamma and beta.

    Train mode recomputes the current statistics from x, so it must see
    the same input the forward pass saw.  With n spatial positions,
    xhat = (x - mu) / std:

        dx = gamma / (n * std) * (n * g - sum(g) - xhat * sum(g * xhat))

    Infer mode is affine, so dx is just gamma / (running_std + eps) * g.
    """
    if mode == "train":
        n = x.shape[1] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
        std = np.sqrt(var + s.epsilon)[:, None, None, None]
        xhat = (x - mu[:, None, None, None]) / std
        dgamma = (grad_out * xhat).sum(axis=(1, 2, 3)).astype(s.gamma.dtype)
        dbeta = grad_out.sum(axis=(1, 2, 3)).astype(s.beta.dtype)
        g = grad_out * s.gamma[:, None, None, None]
        gsum = g.sum(axis=(1, 2, 3), keepdims=True)
        gxsum = (g * xhat).sum(axis=(1, 2, 3), keepdims=True)
        dx = (n * g - gsum - xhat * gxsum) / (n * std)
        return dx, dgamma, dbeta
    if mode == "infer":
        denom = (s.running_std + s.epsilon)[:, None, None, None]
        xhat = (x - s.running_mean[:, None, None, None]) / denom
        dgamma = (grad_out * xhat).sum(axis=(1, 2, 3)).astype(s.gamma.dtype)
        dbeta = grad_out.sum(axis=(1, 2, 3)).astype(s.beta.dtype)
        dx = grad_out * (s.gamma[:, None, None, None] / denom)
        return dx, dgamma, dbeta
    raise ValueError(f"unknown batchnorm mode {mode!r}")

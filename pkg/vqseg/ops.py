"""
Differentiable primitives used by the network.
Each op computes its forward with numpy and registers a closure that maps the
output gradient to input gradients.
"""

from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, record_macs


def _window_slices(i: int, stride: int, count: int) -> slice:
    return slice(i, i + stride * (count - 1) + 1, stride)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """
    2-D cross-correlation over NCHW input.

    Args:
        x: Input of shape (N, C, H, W)
        kernel: Weights of shape (O, C // groups, kH, kW)
        stride: Step between windows
        padding: Zero padding added on every side
        groups: Channel groups; groups == C gives a depthwise convolution
        bias: Optional per-output-channel bias of shape (O,)

    Returns:
        Tensor of shape (N, O, floor((H + 2p - kH) / s) + 1, ...)
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    O, Cg, kH, kW = kernel.shape
    if groups < 1 or C % groups or O % groups or Cg != C // groups:
        raise ConfigurationError(
            f"conv2d: input {x.shape} incompatible with kernel {kernel.shape} for groups={groups}"
        )
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")
    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")

    G, Og = groups, O // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((N, C, kH, kW, Ho, Wo), dtype=x.dtype)
    for i in range(kH):
        for j in range(kW):
            cols[:, :, i, j] = xp[:, :, _window_slices(i, stride, Ho), _window_slices(j, stride, Wo)]
    cols_g = cols.reshape(N, G, Cg, kH, kW, Ho, Wo)
    w_g = kernel.data.reshape(G, Og, Cg, kH, kW)

    if G == 1:
        out = np.tensordot(cols, kernel.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        out = np.einsum("ngcijhw,gocij->ngohw", cols_g, w_g, optimize=True).reshape(N, O, Ho, Wo)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    record_macs(N * O * Ho * Wo * Cg * kH * kW)

    def _backward(g):
        g_g = g.reshape(N, G, Og, Ho, Wo)
        if kernel.requires_grad:
            dw = np.einsum("ngohw,ngcijhw->gocij", g_g, cols_g, optimize=True)
            kernel.accumulate(dw.reshape(O, Cg, kH, kW))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.einsum("ngohw,gocij->ngcijhw", g_g, w_g, optimize=True).reshape(N, C, kH, kW, Ho, Wo)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kH):
                for j in range(kW):
                    dxp[:, :, _window_slices(i, stride, Ho), _window_slices(j, stride, Wo)] += dcols[:, :, i, j]
            x.accumulate(dxp[:, :, padding:padding + H, padding:padding + W])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, _backward)


def conv2d_transpose(
    x: Tensor,
    kernel: Tensor,
    stride: int = 2,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """
    Transposed convolution (the adjoint of conv2d with zero padding).

    Args:
        x: Input of shape (N, Cin, H, W)
        kernel: Weights of shape (Cin, Cout, kH, kW)
        stride: Upsampling stride
        bias: Optional bias of shape (Cout,)

    Returns:
        Tensor of shape (N, Cout, (H - 1) * stride + kH, (W - 1) * stride + kW)
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(
            f"conv2d_transpose expects rank-4 input and kernel, got {x.shape} and {kernel.shape}"
        )
    if x.size == 0:
        raise ConfigurationError(f"conv2d_transpose: zero-size input {x.shape}")
    if stride < 1:
        raise ConfigurationError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    N, C, H, W = x.shape
    Ci, Co, kH, kW = kernel.shape
    if C != Ci:
        raise ConfigurationError(f"conv2d_transpose: input {x.shape} incompatible with kernel {kernel.shape}")
    Ho = (H - 1) * stride + kH
    Wo = (W - 1) * stride + kW

    # (N, H, W, Co, kH, kW)
    taps = np.tensordot(x.data, kernel.data, axes=([1], [0]))
    out = np.zeros((N, Co, Ho, Wo), dtype=x.dtype)
    for i in range(kH):
        for j in range(kW):
            out[:, :, _window_slices(i, stride, H), _window_slices(j, stride, W)] += taps[..., i, j].transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, Co, 1, 1)
    record_macs(N * H * W * Ci * Co * kH * kW)

    def _backward(g):
        gcols = np.empty((N, Co, kH, kW, H, W), dtype=g.dtype)
        for i in range(kH):
            for j in range(kW):
                gcols[:, :, i, j] = g[:, :, _window_slices(i, stride, H), _window_slices(j, stride, W)]
        if x.requires_grad:
            x.accumulate(np.einsum("noijhw,coij->nchw", gcols, kernel.data, optimize=True))
        if kernel.requires_grad:
            kernel.accumulate(np.einsum("nchw,noijhw->coij", x.data, gcols, optimize=True))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        x.accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return Tensor.from_op(y, (x,), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the trailing axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ConfigurationError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def _backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            x.accumulate(
                inv_std
                * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            )

    return Tensor.from_op(out, (x, gamma, beta), _backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Per-channel normalisation of NCHW input.

    Training mode normalises with batch statistics and folds them into the
    running buffers (in place); eval mode uses the running buffers only.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigurationError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    axes = (0, 2, 3)
    shape = (1, C, 1, 1)
    if training:
        count = x.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(shape)
    xhat = (x.data - mu.reshape(shape)) * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def _backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                x.accumulate(
                    inv_std
                    * (
                        dxhat
                        - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                    )
                )
            else:
                x.accumulate(dxhat * inv_std)

    return Tensor.from_op(out, (x, gamma, beta), _backward)


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * s
    return Tensor.from_op(out, (x,), lambda g: x.accumulate(g * s * (1.0 + x.data * (1.0 - s))))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channels by default)."""
    if not tensors:
        raise ConfigurationError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise ConfigurationError(f"concat: shapes {ref} and {t.shape} differ outside axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def _backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, pieces):
            t.accumulate(piece)

    return Tensor.from_op(out, tuple(tensors), _backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g):
        x.accumulate(g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    return Tensor.from_op(out, (x,), _backward)

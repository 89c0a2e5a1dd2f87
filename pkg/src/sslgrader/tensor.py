"""Rank-4 tensor kernels: forward and backward passes for every layer primitive.

A "Tensor4" is a C-contiguous numpy float array of shape (n, c, h, w),
channels-first. All kernels are pure functions, follow the dtype of their
inputs (float32 in production, float64 for gradient checking) and use the
cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvSpec",
    "KernelBank",
    "DenseParams",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_transpose_forward",
    "conv2d_transpose_backward",
    "relu",
    "relu_backward",
    "softmax",
    "softmax_backward",
    "global_max_pool",
    "global_max_pool_backward",
    "dense_forward",
    "dense_backward",
    "concat_channels",
    "concat_channels_backward",
    "residual_add",
    "residual_add_backward",
]


@dataclass(frozen=True)
class ConvSpec:
    """Stride / padding geometry for conv and transposed-conv kernels."""

    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if not 0 <= self.output_padding < self.stride:
            raise ValueError(
                f"output_padding must satisfy 0 <= op < stride, got "
                f"op={self.output_padding}, stride={self.stride}"
            )


@dataclass
class KernelBank:
    """Convolution weights (out_channels, in_channels, kh, kw) plus per-output-channel bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise ValueError(f"kernel weights must be rank 4, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "KernelBank":
        return KernelBank(self.weights.copy(), self.bias.copy())


@dataclass
class DenseParams:
    """Fully-connected weights (in_features, out_features) plus bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 2:
            raise ValueError(f"dense weights must be rank 2, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[1]} output features"
            )

    def copy(self) -> "DenseParams":
        return DenseParams(self.weights.copy(), self.bias.copy())


def _require_tensor4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


def _conv_out_hw(h: int, w: int, kh: int, kw: int, s: ConvSpec) -> tuple[int, int]:
    out_h = (h + 2 * s.padding - kh) // s.stride + 1
    out_w = (w + 2 * s.padding - kw) // s.stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"non-positive conv output dims {out_h}x{out_w} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {s.stride}, padding {s.padding}"
        )
    return out_h, out_w


def _im2col(x: np.ndarray, kh: int, kw: int, s: ConvSpec) -> tuple[np.ndarray, int, int]:
    # Returns (n, c*kh*kw, out_h*out_w): one slice-copy per kernel offset,
    # cheap for 3x3 kernels and feeds GEMM directly.
    n, c, h, w = x.shape
    out_h, out_w = _conv_out_hw(h, w, kh, kw, s)
    p = s.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    st = s.stride
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di : di + st * out_h : st, dj : dj + st * out_w : st]
    return cols.reshape(n, c * kh * kw, out_h * out_w), out_h, out_w


def _col2im(
    cols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int, s: ConvSpec
) -> np.ndarray:
    # Adjoint of _im2col: scatter-add each kernel offset back into the image.
    n, c, h, w = x_shape
    p = s.padding
    st = s.stride
    out_h = (h + 2 * p - kh) // st + 1
    out_w = (w + 2 * p - kw) // st + 1
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            xp[:, :, di : di + st * out_h : st, dj : dj + st * out_w : st] += cols[:, :, di, dj]
    return xp[:, :, p : p + h, p : p + w] if p else xp


def _check_channels(x: np.ndarray, k: KernelBank) -> None:
    if x.shape[1] != k.in_channels:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {k.in_channels}"
        )


def conv2d_forward(x: np.ndarray, k: KernelBank, s: ConvSpec) -> np.ndarray:
    """Strided 2-D cross-correlation: (n,c,h,w) -> (n,out_c,out_h,out_w)."""
    _require_tensor4(x)
    _check_channels(x, k)
    n = x.shape[0]
    oc, _, kh, kw = k.weights.shape
    cols, out_h, out_w = _im2col(x, kh, kw, s)
    w2 = k.weights.reshape(oc, -1)
    out = np.matmul(w2, cols)  # (n, oc, out_h*out_w)
    out += k.bias[:, None].astype(x.dtype, copy=False)
    return out.reshape(n, oc, out_h, out_w)


def conv2d_backward(
    x: np.ndarray, k: KernelBank, s: ConvSpec, grad_out: np.ndarray
) -> tuple[np.ndarray, KernelBank]:
    """Gradients of conv2d_forward w.r.t. input and parameters.

    Returns (grad_x, KernelBank(grad_weights, grad_bias)).
    """
    _require_tensor4(x)
    _check_channels(x, k)
    n = x.shape[0]
    oc, _, kh, kw = k.weights.shape
    cols, out_h, out_w = _im2col(x, kh, kw, s)
    if grad_out.shape != (n, oc, out_h, out_w):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"{(n, oc, out_h, out_w)}"
        )
    go = grad_out.reshape(n, oc, out_h * out_w)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.weights.shape)
    w2 = k.weights.reshape(oc, -1)
    grad_cols = np.matmul(w2.T, go)  # (n, c*kh*kw, L)
    grad_x = _col2im(grad_cols, x.shape, kh, kw, s)
    return grad_x, KernelBank(grad_w, grad_b)


def _transpose_out_hw(h: int, w: int, kh: int, kw: int, s: ConvSpec) -> tuple[int, int]:
    out_h = (h - 1) * s.stride - 2 * s.padding + kh + s.output_padding
    out_w = (w - 1) * s.stride - 2 * s.padding + kw + s.output_padding
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"non-positive transposed-conv output dims {out_h}x{out_w} for "
            f"input {h}x{w}, kernel {kh}x{kw}, stride {s.stride}, padding {s.padding}"
        )
    return out_h, out_w


def conv2d_transpose_forward(x: np.ndarray, k: KernelBank, s: ConvSpec) -> np.ndarray:
    """Transposed (fractionally-strided) convolution, the adjoint of conv2d.

    out spatial size = (in - 1)*stride - 2*padding + k + output_padding.
    """
    _require_tensor4(x)
    _check_channels(x, k)
    n, ic, h, w = x.shape
    oc, _, kh, kw = k.weights.shape
    out_h, out_w = _transpose_out_hw(h, w, kh, kw, s)
    st, p, op = s.stride, s.padding, s.output_padding
    full_h = (h - 1) * st + kh + op
    full_w = (w - 1) * st + kw + op
    # cols[n, oc*kh*kw, h*w] = sum_c k[oc,c,di,dj] * x[n,c,i,j]
    w3 = k.weights.transpose(0, 2, 3, 1).reshape(oc * kh * kw, ic)
    cols = np.matmul(w3, x.reshape(n, ic, h * w)).reshape(n, oc, kh, kw, h, w)
    buf = np.zeros((n, oc, full_h, full_w), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            buf[:, :, di : di + st * h : st, dj : dj + st * w : st] += cols[:, :, di, dj]
    out = buf[:, :, p : p + out_h, p : p + out_w]
    out = out + k.bias[None, :, None, None].astype(x.dtype, copy=False)
    return out


def conv2d_transpose_backward(
    x: np.ndarray, k: KernelBank, s: ConvSpec, grad_out: np.ndarray
) -> tuple[np.ndarray, KernelBank]:
    """Gradients of conv2d_transpose_forward w.r.t. input and parameters."""
    _require_tensor4(x)
    _check_channels(x, k)
    n, ic, h, w = x.shape
    oc, _, kh, kw = k.weights.shape
    out_h, out_w = _transpose_out_hw(h, w, kh, kw, s)
    if grad_out.shape != (n, oc, out_h, out_w):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match transposed-conv "
            f"output {(n, oc, out_h, out_w)}"
        )
    st, p, op = s.stride, s.padding, s.output_padding
    full_h = (h - 1) * st + kh + op
    full_w = (w - 1) * st + kw + op
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # Re-embed grad_out into the un-trimmed scatter buffer, then gather the
    # same strided slices the forward pass scattered into.
    gbuf = np.zeros((n, oc, full_h, full_w), dtype=grad_out.dtype)
    gbuf[:, :, p : p + out_h, p : p + out_w] = grad_out
    gcols = np.empty((n, oc, kh, kw, h, w), dtype=grad_out.dtype)
    for di in range(kh):
        for dj in range(kw):
            gcols[:, :, di, dj] = gbuf[:, :, di : di + st * h : st, dj : dj + st * w : st]
    gcols2 = gcols.reshape(n, oc * kh * kw, h * w)
    w3 = k.weights.transpose(0, 2, 3, 1).reshape(oc * kh * kw, ic)
    grad_x = np.matmul(w3.T, gcols2).reshape(x.shape)
    x2 = x.reshape(n, ic, h * w)
    grad_w3 = np.matmul(gcols2, x2.transpose(0, 2, 1)).sum(axis=0)  # (oc*kh*kw, ic)
    grad_w = grad_w3.reshape(oc, kh, kw, ic).transpose(0, 3, 1, 2).copy()
    return grad_x, KernelBank(grad_w, grad_b)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x); shape-agnostic."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass grad where the forward input was > 0, zero elsewhere."""
    return np.where(x > 0, grad_out, 0)


def softmax(v: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts a vector or an (n, d) matrix."""
    v = np.asarray(v)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of softmax given its output probabilities."""
    dot = (grad_out * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_out - dot)


def global_max_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial maximum: (n, c, h, w) -> (n, c)."""
    _require_tensor4(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"empty spatial extent in shape {x.shape}")
    return x.reshape(x.shape[0], x.shape[1], -1).max(axis=2)


def global_max_pool_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each (sample, channel) gradient to the first row-major argmax."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)  # first maximal element on ties
    grad = np.zeros_like(flat)
    np.put_along_axis(grad, idx[:, :, None], grad_out[:, :, None], axis=2)
    return grad.reshape(x.shape)


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    """x @ w + b with bias broadcast over rows."""
    if x.ndim != 2 or x.shape[1] != p.weights.shape[0]:
        raise ValueError(
            f"dense input shape {x.shape} incompatible with weights {p.weights.shape}"
        )
    return x @ p.weights + p.bias


def dense_backward(
    x: np.ndarray, p: DenseParams, grad_out: np.ndarray
) -> tuple[np.ndarray, DenseParams]:
    if grad_out.shape != (x.shape[0], p.weights.shape[1]):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match dense output "
            f"{(x.shape[0], p.weights.shape[1])}"
        )
    grad_x = grad_out @ p.weights.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, DenseParams(grad_w, grad_b)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis; a's channels come first."""
    _require_tensor4(a, "first input")
    _require_tensor4(b, "second input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"batch/spatial mismatch in concat: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(
    a_channels: int, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Split the upstream gradient back into the two concatenated inputs."""
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch in residual add: {a.shape} vs {b.shape}")
    return a + b


def residual_add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Both branches receive the upstream gradient unchanged."""
    return grad_out, grad_out

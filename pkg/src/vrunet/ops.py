"""Layer primitives on NHWC tensors with hand-derived backward passes.

Every tensor is a ``numpy.ndarray`` of shape ``(batch, height, width,
channels)``. Ops preserve the floating dtype of their inputs, so the same code
runs in float32 (training / inference) and float64 (gradient checks).

Convolutions are cross-correlations (no kernel flip). Kernel layouts:

* standard   ``(kh, kw, c_in, c_out)``
* depthwise  ``(kh, kw, c)``
* pointwise  ``(1, 1, c_in, c_out)``
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PadMode = Literal["valid", "same"]
KernelKind = Literal["standard", "depthwise", "pointwise"]


class ShapeError(ValueError):
    """Raised when tensor or kernel shapes are incompatible."""


@dataclass
class Kernel:
    kind: KernelKind
    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = self.weights
        if self.kind == "standard":
            if w.ndim != 4:
                raise ShapeError(f"standard kernel needs 4-d weights, got {w.shape}")
        elif self.kind == "depthwise":
            if w.ndim != 3:
                raise ShapeError(f"depthwise kernel needs 3-d weights, got {w.shape}")
        elif self.kind == "pointwise":
            if w.ndim != 4 or w.shape[:2] != (1, 1):
                raise ShapeError(f"pointwise kernel needs (1, 1, c_in, c_out) weights, got {w.shape}")
        else:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        if self.kind == "depthwise":
            return self.weights.shape[2]
        return self.weights.shape[3]

    def arrays(self) -> list[np.ndarray]:
        return [self.weights] if self.bias is None else [self.weights, self.bias]

    def like(self, weights: np.ndarray, bias: Optional[np.ndarray]) -> "Kernel":
        return Kernel(self.kind, weights, bias)


def param_count(k: Kernel) -> int:
    """Number of trainable scalars in ``k`` (weights plus bias, if any)."""
    n = int(k.weights.size)
    if k.bias is not None:
        n += int(k.bias.size)
    return n


def separable_param_count(k_h: int, k_w: int, c_in: int, c_out: int, bias: bool = False) -> int:
    n = k_h * k_w * c_in + c_in * c_out
    if bias:
        n += c_in + c_out
    return n


def standard_param_count(k_h: int, k_w: int, c_in: int, c_out: int, bias: bool = False) -> int:
    return k_h * k_w * c_in * c_out + (c_out if bias else 0)


# ---------------------------------------------------------------------------
# padding helpers
# ---------------------------------------------------------------------------

def _check4(x: np.ndarray, name: str = "x"):
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 4-d NHWC tensor, got shape {x.shape}")


def out_size(n: int, k: int, stride: int, pad: PadMode) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad == "same":
        return -(-n // stride)
    if pad == "valid":
        return (n - k) // stride + 1 if n >= k else 0
    raise ValueError(f"unknown pad mode {pad!r}")


def pad_amounts(n: int, k: int, stride: int, pad: PadMode) -> tuple[int, int]:
    """(before, after) padding along one axis; extra cell goes after."""
    if pad == "valid":
        return 0, 0
    o = out_size(n, k, stride, pad)
    total = max((o - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _pad(x: np.ndarray, kh: int, kw: int, stride: int, pad: PadMode, fill=0.0):
    n, h, w, _ = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} with stride {stride} does not fit input {h}x{w} ({pad})")
    ph, pw = pad_amounts(h, kh, stride, pad), pad_amounts(w, kw, stride, pad)
    if ph == (0, 0) and pw == (0, 0):
        return x, (ho, wo), (ph, pw)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=fill)
    return xp, (ho, wo), (ph, pw)


def _unpad(gp: np.ndarray, pads, shape) -> np.ndarray:
    (pt, _), (pl, _) = pads
    return gp[:, pt:pt + shape[1], pl:pl + shape[2], :]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (n, ho, wo, c, kh, kw)."""
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _tap(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :]


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, k: Kernel, stride: int = 1, pad: PadMode = "same") -> np.ndarray:
    _check4(x)
    if k.kind not in ("standard", "pointwise"):
        raise ShapeError(f"conv2d_forward needs a standard kernel, got {k.kind}")
    if k.in_channels != x.shape[3]:
        raise ShapeError(f"kernel expects {k.in_channels} input channels, tensor has {x.shape[3]}")
    kh, kw = k.spatial
    xp, (ho, wo), _ = _pad(x, kh, kw, stride, pad)
    cols = _windows(xp, kh, kw, stride, ho, wo)
    # (n, ho, wo, c, kh, kw) . (kh, kw, c, o)
    y = np.tensordot(cols, k.weights.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    if k.bias is not None:
        y = y + k.bias
    return y


def conv2d_backward(x: np.ndarray, k: Kernel, grad_out: np.ndarray, stride: int = 1,
                    pad: PadMode = "same") -> tuple[np.ndarray, Kernel]:
    kh, kw = k.spatial
    xp, (ho, wo), pads = _pad(x, kh, kw, stride, pad)
    _expect(grad_out, (x.shape[0], ho, wo, k.out_channels))
    cols = _windows(xp, kh, kw, stride, ho, wo)
    gw = np.tensordot(cols, grad_out, axes=([0, 1, 2], [0, 1, 2]))  # (c, kh, kw, o)
    gw = gw.transpose(1, 2, 0, 3)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            _tap(gxp, i, j, stride, ho, wo)[...] += grad_out @ k.weights[i, j].T
    gb = grad_out.sum(axis=(0, 1, 2)) if k.bias is not None else None
    return _unpad(gxp, pads, x.shape), k.like(gw, gb)


def depthwise_forward(x: np.ndarray, k: Kernel, stride: int = 1, pad: PadMode = "same") -> np.ndarray:
    _check4(x)
    if k.kind != "depthwise":
        raise ShapeError(f"depthwise_forward needs a depthwise kernel, got {k.kind}")
    if k.in_channels != x.shape[3]:
        raise ShapeError(f"kernel expects {k.in_channels} channels, tensor has {x.shape[3]}")
    kh, kw = k.spatial
    xp, (ho, wo), _ = _pad(x, kh, kw, stride, pad)
    y = np.zeros((x.shape[0], ho, wo, x.shape[3]), dtype=np.result_type(x, k.weights))
    for i in range(kh):
        for j in range(kw):
            y += _tap(xp, i, j, stride, ho, wo) * k.weights[i, j]
    if k.bias is not None:
        y += k.bias
    return y


def depthwise_backward(x: np.ndarray, k: Kernel, grad_out: np.ndarray, stride: int = 1,
                       pad: PadMode = "same") -> tuple[np.ndarray, Kernel]:
    kh, kw = k.spatial
    xp, (ho, wo), pads = _pad(x, kh, kw, stride, pad)
    _expect(grad_out, (x.shape[0], ho, wo, x.shape[3]))
    gw = np.empty_like(k.weights)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gw[i, j] = (_tap(xp, i, j, stride, ho, wo) * grad_out).sum(axis=(0, 1, 2))
            _tap(gxp, i, j, stride, ho, wo)[...] += grad_out * k.weights[i, j]
    gb = grad_out.sum(axis=(0, 1, 2)) if k.bias is not None else None
    return _unpad(gxp, pads, x.shape), k.like(gw, gb)


def pointwise_forward(x: np.ndarray, k: Kernel) -> np.ndarray:
    _check4(x)
    if k.kind != "pointwise":
        raise ShapeError(f"pointwise_forward needs a pointwise kernel, got {k.kind}")
    if k.in_channels != x.shape[3]:
        raise ShapeError(f"kernel expects {k.in_channels} input channels, tensor has {x.shape[3]}")
    y = x @ k.weights[0, 0]
    if k.bias is not None:
        y = y + k.bias
    return y


def pointwise_backward(x: np.ndarray, k: Kernel, grad_out: np.ndarray) -> tuple[np.ndarray, Kernel]:
    _expect(grad_out, x.shape[:3] + (k.out_channels,))
    gx = grad_out @ k.weights[0, 0].T
    gw = np.tensordot(x, grad_out, axes=([0, 1, 2], [0, 1, 2]))[None, None]
    gb = grad_out.sum(axis=(0, 1, 2)) if k.bias is not None else None
    return gx, k.like(gw, gb)


def separable_forward(x: np.ndarray, dk: Kernel, pk: Kernel, stride: int = 1,
                      pad: PadMode = "same") -> np.ndarray:
    return pointwise_forward(depthwise_forward(x, dk, stride, pad), pk)


def separable_backward(x: np.ndarray, dk: Kernel, pk: Kernel, grad_out: np.ndarray, stride: int = 1,
                       pad: PadMode = "same") -> tuple[np.ndarray, Kernel, Kernel]:
    mid = depthwise_forward(x, dk, stride, pad)
    gmid, gpk = pointwise_backward(mid, pk, grad_out)
    gx, gdk = depthwise_backward(x, dk, gmid, stride, pad)
    return gx, gdk, gpk


def maxpool_forward(x: np.ndarray, window: int, stride: int,
                    pad: PadMode = "same") -> tuple[np.ndarray, np.ndarray]:
    """Max pooling. Returns the pooled tensor and the flat in-window argmax.

    Padding cells are filled with -inf so they never win. Ties go to the
    first cell in row-major window order (``np.argmax`` semantics).
    """
    _check4(x)
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if pad == "valid" and (window > x.shape[1] or window > x.shape[2]):
        raise ShapeError(f"pool window {window} larger than input {x.shape[1]}x{x.shape[2]}")
    xp, (ho, wo), _ = _pad(x, window, window, stride, pad, fill=-np.inf)
    cols = _windows(xp, window, window, stride, ho, wo)
    flat = cols.reshape(cols.shape[:4] + (window * window,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(x: np.ndarray, argmax: np.ndarray, grad_out: np.ndarray, window: int, stride: int,
                     pad: PadMode = "same") -> np.ndarray:
    _expect(grad_out, argmax.shape)
    xp, (ho, wo), pads = _pad(x, window, window, stride, pad, fill=-np.inf)
    gxp = np.zeros(xp.shape, dtype=grad_out.dtype)
    di, dj = np.divmod(argmax, window)
    n, _, _, c = x.shape
    bn, bi, bj, bc = np.indices((n, ho, wo, c), sparse=True)
    np.add.at(gxp, (bn, bi * stride + di, bj * stride + dj, bc), grad_out)
    return _unpad(gxp, pads, x.shape)


def transposed_conv_forward(x: np.ndarray, k: Kernel, stride: int = 1) -> np.ndarray:
    """Scatter each input pixel's kernel-weighted contribution.

    Output spatial size is ``(in - 1) * stride + K``. With the kernel's
    channel axes swapped this is the exact adjoint of a valid ``conv2d``.
    """
    _check4(x)
    if k.kind != "standard":
        raise ShapeError(f"transposed_conv_forward needs a standard kernel, got {k.kind}")
    if k.in_channels != x.shape[3]:
        raise ShapeError(f"kernel expects {k.in_channels} input channels, tensor has {x.shape[3]}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    kh, kw = k.spatial
    n, h, w, _ = x.shape
    y = np.zeros((n, (h - 1) * stride + kh, (w - 1) * stride + kw, k.out_channels),
                 dtype=np.result_type(x, k.weights))
    for i in range(kh):
        for j in range(kw):
            _tap(y, i, j, stride, h, w)[...] += x @ k.weights[i, j]
    if k.bias is not None:
        y += k.bias
    return y


def transposed_conv_backward(x: np.ndarray, k: Kernel, grad_out: np.ndarray,
                             stride: int = 1) -> tuple[np.ndarray, Kernel]:
    kh, kw = k.spatial
    n, h, w, _ = x.shape
    _expect(grad_out, (n, (h - 1) * stride + kh, (w - 1) * stride + kw, k.out_channels))
    gx = np.zeros_like(x, dtype=np.result_type(x, grad_out))
    gw = np.empty_like(k.weights)
    for i in range(kh):
        for j in range(kw):
            g = _tap(grad_out, i, j, stride, h, w)
            gx += g @ k.weights[i, j].T
            gw[i, j] = np.tensordot(x, g, axes=([0, 1, 2], [0, 1, 2]))
    gb = grad_out.sum(axis=(0, 1, 2)) if k.bias is not None else None
    return gx, k.like(gw, gb)


def upsample2x_nearest(x: np.ndarray) -> np.ndarray:
    _check4(x)
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    n, h, w, c = grad_out.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample gradient must have even spatial dims, got {h}x{w}")
    return grad_out.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x: np.ndarray, kind: Literal["relu", "sigmoid"]) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, grad_out: np.ndarray, kind: Literal["relu", "sigmoid"]) -> np.ndarray:
    _expect(grad_out, x.shape)
    if kind == "relu":
        return grad_out * (x > 0)  # gradient at exactly 0 is 0
    if kind == "sigmoid":
        s = sigmoid(x)
        return grad_out * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


def dense_forward(x: np.ndarray, k: Kernel) -> np.ndarray:
    """Fully connected layer on a flattened tensor, output shape (n, 1, 1, c_out).

    Stored as a pointwise kernel over the flattened ``h * w * c`` features.
    """
    return pointwise_forward(x.reshape(x.shape[0], 1, 1, -1), k)


def dense_backward(x: np.ndarray, k: Kernel, grad_out: np.ndarray) -> tuple[np.ndarray, Kernel]:
    gx, gk = pointwise_backward(x.reshape(x.shape[0], 1, 1, -1), k, grad_out)
    return gx.reshape(x.shape), gk


def _expect(g: np.ndarray, shape):
    if tuple(g.shape) != tuple(shape):
        raise ShapeError(f"gradient shape {tuple(g.shape)} does not match forward output {tuple(shape)}")


def layer_backward(op: str, x: np.ndarray, grad_out: np.ndarray, cache: Optional[dict] = None):
    """Dispatch to the backward pass of ``op``.

    ``cache`` carries what the forward call took besides ``x``: kernels
    (``k``, or ``dk``/``pk`` for separable), ``stride``, ``pad``, the pooling
    ``window`` and ``argmax`` map, or the activation ``kind``. Returns
    ``(grad_x, grad_kernel_or_None)``; separable returns a kernel pair.
    """
    c = dict(cache or {})
    stride, pad = c.get("stride", 1), c.get("pad", "same")
    if op == "conv2d":
        return conv2d_backward(x, c["k"], grad_out, stride, pad)
    if op == "depthwise":
        return depthwise_backward(x, c["k"], grad_out, stride, pad)
    if op == "pointwise":
        return pointwise_backward(x, c["k"], grad_out)
    if op == "separable":
        gx, gdk, gpk = separable_backward(x, c["dk"], c["pk"], grad_out, stride, pad)
        return gx, (gdk, gpk)
    if op == "maxpool":
        return maxpool_backward(x, c["argmax"], grad_out, c["window"], stride, pad), None
    if op == "transposed_conv":
        return transposed_conv_backward(x, c["k"], grad_out, stride)
    if op == "upsample":
        _expect(grad_out, (x.shape[0], 2 * x.shape[1], 2 * x.shape[2], x.shape[3]))
        return upsample2x_backward(grad_out), None
    if op == "activation":
        return activation_backward(x, grad_out, c["kind"]), None
    if op == "dense":
        return dense_backward(x, c["k"], grad_out)
    raise ValueError(f"unknown op {op!r}")

"""Dense NCHW kernels on numpy arrays.

Tensors are plain ``np.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width). Kernels never mutate their inputs and keep
the input dtype (float32 in normal use; float64 is accepted so gradient
checks can run without rounding noise).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a kernel."""


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N,C,H,W) tensor, got shape {arr.shape}")
    return arr


def _check4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N,C,H,W), got shape {x.shape}")


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Multiply ``a`` by ``b`` where ``b`` matches ``a`` or is a spatial mask.

    Spatial masks are (1,1,H,W), shared by the batch, or (N,1,H,W), one per
    image; both broadcast over channels.
    """
    _check4(a, "a")
    _check4(b, "b")
    spatial = b.shape[1] == 1 and b.shape[2:] == a.shape[2:] and b.shape[0] in (1, a.shape[0])
    if b.shape != a.shape and not spatial:
        raise ShapeError(
            f"cannot multiply {a.shape} by {b.shape}: b must equal a's shape "
            f"or be (1 or N,1,{a.shape[2]},{a.shape[3]})"
        )
    return a * b.astype(a.dtype, copy=False)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Columns of shape (C*K*K, N*Ho*Wo): one row per (channel, ki, kj) tap."""
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def conv2d_forward(
    x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0,
    return_cols: bool = False,
):
    """Cross-correlate ``x`` with ``weights`` (Cout, Cin, K, K) and add ``bias``.

    With ``return_cols`` the im2col matrix is returned too, so a later
    :func:`conv2d_backward` can skip rebuilding it.
    """
    _check4(x)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"weights must be (Cout,Cin,K,K), got {weights.shape}")
    cout, cin, k, _ = weights.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels but weights expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"kernel {k} with pad {pad} does not fit input {h}x{w}")
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = weights.reshape(cout, -1) @ cols
    out += bias[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    return (out, cols) if return_cols else out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray, stride: int = 1, pad: int = 0,
    cols: np.ndarray | None = None, need_input_grad: bool = True,
):
    """Return ``(grad_x, grad_weights, grad_bias)`` for :func:`conv2d_forward`.

    ``grad_x`` is None when ``need_input_grad`` is false.
    """
    _check4(x)
    _check4(grad_out, "grad_out")
    cout, cin, k, _ = weights.shape
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if c != cin or grad_out.shape != (n, cout, ho, wo):
        raise ShapeError(
            f"grad_out {grad_out.shape} inconsistent with x {x.shape} and weights {weights.shape}"
        )
    if cols is None:
        cols, _, _ = _im2col(x, k, stride, pad)
    g = grad_out.transpose(1, 0, 2, 3).reshape(cout, -1)
    grad_w = (g @ cols.T).reshape(weights.shape)
    grad_b = g.sum(axis=1)
    if not need_input_grad:
        return None, grad_w, grad_b
    gcols = (weights.reshape(cout, -1).T @ g).reshape(cin, k, k, n, ho, wo)
    gpad = np.zeros((cin, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
    grad_x = gpad[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3)), grad_w, grad_b


def maxpool2d(x: np.ndarray, k: int = 2, stride: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Max pool over k×k windows.

    Returns the pooled tensor and, per output cell, the flat in-window index
    (row-major) of the winning element. Ties go to the first index in
    row-major scan order.
    """
    _check4(x)
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1

    def tap(t):
        i, j = divmod(t, k)
        return x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    out = tap(0).copy()
    for t in range(1, k * k):
        np.maximum(out, tap(t), out=out)
    idx = np.full(out.shape, k * k - 1, dtype=np.int8 if k * k < 128 else np.int32)
    for t in range(k * k - 2, -1, -1):
        np.putmask(idx, tap(t) == out, t)
    return out, idx


def maxpool2d_backward(
    grad_out: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...], k: int = 2,
    stride: int | None = None,
) -> np.ndarray:
    stride = k if stride is None else stride
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match argmax {argmax.shape}")
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    zero = grad_out.dtype.type(0)
    for t in range(k * k):
        i, j = divmod(t, k)
        routed = np.where(argmax == t, grad_out, zero)
        grad_x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += routed
    return grad_x


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _check4(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"empty spatial extent {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = input_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"grad_out must be ({n},{c},1,1), got {grad_out.shape}")
    return np.broadcast_to(grad_out / (h * w), input_shape).astype(grad_out.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def upsample_nearest(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the trailing two axes.

    ``out[..., i, j] = m[..., floor(i*h/out_h), floor(j*w/out_w)]``. Leading
    axes (e.g. a batch of maps) are carried through.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = m.shape[-2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"cannot upsample {h}x{w} to smaller {out_h}x{out_w}")
    return resample_nearest(m, out_h, out_w)


def resample_nearest(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Like :func:`upsample_nearest` but also allows shrinking."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = m.shape[-2:]
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return m[..., rows[:, None], cols[None, :]]

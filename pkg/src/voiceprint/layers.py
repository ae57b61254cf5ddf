"""Dense-tensor layer primitives with exact forward/backward passes.

Arrays are NCHW (batch, channel, height, width) throughout. Convolutions
are 3x3, stride 1, padding 1, implemented as im2col + GEMM; backward
passes are closed-form, not autodiff. Everything preserves the input
dtype, so tests can run the same code in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import VoiceprintError


class ShapeError(VoiceprintError):
    """Operand shapes do not conform."""


class DegenerateEmbeddingError(VoiceprintError):
    """Row norm too small to normalize."""


L2_NORM_EPS = 1e-12

# When enabled, every layer output is checked for NaN/Inf (slow; meant for
# debugging diverging runs).
check_finite = False


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if check_finite and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values out of {name}")
    return arr


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """Unfold padded 3x3 windows into rows: [N*H*W, C*9]."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   cols: np.ndarray | None = None) -> np.ndarray:
    """3x3 cross-correlation, stride 1, padding 1, plus bias.

    x: [N,C,H,W], weight: [F,C,3,3], bias: [F] -> [N,F,H,W]. Pass a
    precomputed im2col3x3(x) as `cols` to share it with the backward pass.
    """
    n, c, h, w = _check_conv_shapes(x, weight, bias)
    f = weight.shape[0]
    if cols is None:
        cols = im2col3x3(x)
    out = cols @ weight.reshape(f, c * 9).T
    out += bias
    return _finite("conv2d", out.reshape(n, h, w, f).transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    cols: np.ndarray | None = None, need_input_grad: bool = True):
    """Exact gradients of conv2d_forward: (grad_x, grad_weight, grad_bias).

    grad_x is None when need_input_grad is False (first layer of a net).
    """
    n, c, h, w = _check_conv_shapes(x, weight, None)
    f = weight.shape[0]
    if grad_out.shape != (n, f, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, f, h, w)}")
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    g_rows = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, f)
    if cols is None:
        cols = im2col3x3(x)
    grad_weight = (g_rows.T @ cols).reshape(weight.shape)
    grad_x = None
    if need_input_grad:
        # full correlation: swap in/out channels and flip the kernel
        w_t = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        g_cols = im2col3x3(grad_out)
        grad_x = (g_cols @ w_t.reshape(c, f * 9).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return grad_x, grad_weight, grad_bias


def _check_conv_shapes(x, weight, bias):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"weight shape {weight.shape} incompatible with {c} input channels")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return n, c, h, w


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2. Returns (out, argmax) for backward."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first occurrence wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return _finite("maxpool2", out), arg


def maxpool2_backward(x_shape, arg: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    flat = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(flat, arg[..., None], grad_out[..., None], axis=-1)
    win = flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h, w)


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    """Spatial mean per channel: [N,C,H,W] -> [N,C]. Any H, W >= 1."""
    return _finite("gap", x.mean(axis=(2, 3)))


def global_avg_pool_backward(x_shape, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), x_shape).astype(grad_out.dtype, copy=True)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input dim {x.shape[1]} != weight rows {weight.shape[0]}")
    return _finite("dense", x @ weight + bias)


def dense_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dropout_forward(x: np.ndarray, p: float, train: bool,
                    rng: np.random.Generator | None = None):
    """Inverted dropout: kept units scale by 1/(1-p). Identity in eval mode.

    Returns (out, mask); mask is None when nothing was dropped.
    """
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, grad_out: np.ndarray) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def l2_normalize_forward(x: np.ndarray):
    """Scale each row to unit Euclidean norm. Returns (out, norms)."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms <= L2_NORM_EPS):
        raise DegenerateEmbeddingError("embedding row with ~zero norm")
    return x / norms, norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray,
                          grad_out: np.ndarray) -> np.ndarray:
    # rowwise (I - y y^T) / ||x|| applied to grad_out
    proj = (grad_out * y).sum(axis=1, keepdims=True)
    return (grad_out - proj * y) / norms

"""Layer primitives: forward and backward passes, plus the Adam update.

Every op is a pure function: inputs are never mutated, outputs are fresh
arrays, caches hold what the matching backward needs. The public ops take the
package-wide batch x channels x height x width layout; internally they run
channels-last kernels (im2col + GEMM convolutions) because the gather/scatter
steps then stream instead of striding across channel planes. The model drives
the channels-last kernels directly to avoid re-transposing at every boundary.
Tests verify the public ops against brute-force sliding-window oracles and
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def _nhwc(x: np.ndarray) -> np.ndarray:
    return x.transpose(0, 2, 3, 1)


def _nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# 3x3 convolution, stride 1, zero padding 1 (spatial size preserved)

@dataclass
class Conv2dCache:
    cols: np.ndarray          # [B*H*W, 9*C], column order (kh, kw, c)
    w: np.ndarray             # [O, C, 3, 3]
    in_shape: tuple[int, ...]  # NHWC
    out_shape: tuple[int, ...]  # NHWC


def _w3_mat(w: np.ndarray) -> np.ndarray:
    # [O,C,3,3] -> [O, 9C] matching the (kh, kw, c) column order of the cols
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv3x3_nhwc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x [B,H,W,C], w [O,C,3,3], b [O] -> (out [B,H,W,O], cache)."""
    bs, h, wd, c = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    sb, sh, sw, sc = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(bs, h, wd, 3, 3, c),
        strides=(sb, sh, sw, sh, sw, sc),
        writeable=False,
    )
    cols = win.reshape(bs * h * wd, 9 * c)
    out = (cols @ _w3_mat(w).T + b).reshape(bs, h, wd, o)
    return out, Conv2dCache(cols=cols, w=w, in_shape=x.shape, out_shape=out.shape)


def conv3x3_nhwc_backward(cache: Conv2dCache, grad_out: np.ndarray):
    bs, h, wd, c = cache.in_shape
    o = cache.w.shape[0]
    gmat = grad_out.reshape(bs * h * wd, o)
    grad_b = gmat.sum(axis=0)
    gw_mat = gmat.T @ cache.cols  # [O, 9C]
    grad_w = gw_mat.reshape(o, 3, 3, c).transpose(0, 3, 1, 2).copy()

    gcols = (gmat @ _w3_mat(cache.w)).reshape(bs, h, wd, 3, 3, c)
    gxp = np.zeros((bs, h + 2, wd + 2, c), dtype=grad_out.dtype)
    for i in range(3):
        for j in range(3):
            gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i, j, :]
    return gxp[:, 1:1 + h, 1:1 + wd, :], grad_w, grad_b


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Cross-correlation. x [B,C,H,W], w [O,C,3,3], b [O] -> (out [B,O,H,W], cache)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input/weights, got {x.shape}, {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel is fixed 3x3, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
    out, cache = conv3x3_nhwc_forward(_nhwc(x), w, b)
    return _nchw(out), cache


def conv2d_backward(cache: Conv2dCache, grad_out: np.ndarray):
    """-> (grad_input, grad_weights, grad_bias)."""
    bs, h, wd, _ = cache.out_shape
    if grad_out.shape != (bs, cache.w.shape[0], h, wd):
        raise ShapeError(f"grad_out {grad_out.shape} != forward output "
                         f"{(bs, cache.w.shape[0], h, wd)}")
    gx, gw, gb = conv3x3_nhwc_backward(cache, np.ascontiguousarray(_nhwc(grad_out)))
    return _nchw(gx), gw, gb


# ---------------------------------------------------------------------------
# 1x1 convolution (channel mixing for the final mask head)

@dataclass
class Conv1x1Cache:
    x: np.ndarray  # NHWC
    w: np.ndarray  # [O, C, 1, 1]


def conv1x1_nhwc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    bs, h, wd, c = x.shape
    o = w.shape[0]
    out = (x.reshape(-1, c) @ w.reshape(o, c).T + b).reshape(bs, h, wd, o)
    return out, Conv1x1Cache(x=x, w=w)


def conv1x1_nhwc_backward(cache: Conv1x1Cache, grad_out: np.ndarray):
    x, w = cache.x, cache.w
    bs, h, wd, c = x.shape
    o = w.shape[0]
    gmat = grad_out.reshape(-1, o)
    grad_w = (gmat.T @ x.reshape(-1, c)).reshape(w.shape)
    grad_b = gmat.sum(axis=0)
    grad_x = (gmat @ w.reshape(o, c)).reshape(x.shape)
    return grad_x, grad_w, grad_b


def conv1x1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x [B,C,H,W], w [O,C,1,1], b [O] -> (out [B,O,H,W], cache)."""
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 kernel is fixed 1x1, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weights {w.shape}")
    out, cache = conv1x1_nhwc_forward(np.ascontiguousarray(_nhwc(x)), w, b)
    return _nchw(out), cache


def conv1x1_backward(cache: Conv1x1Cache, grad_out: np.ndarray):
    bs, h, wd, _ = cache.x.shape
    if grad_out.shape != (bs, cache.w.shape[0], h, wd):
        raise ShapeError(f"grad_out {grad_out.shape} != forward output "
                         f"{(bs, cache.w.shape[0], h, wd)}")
    gx, gw, gb = conv1x1_nhwc_backward(cache, np.ascontiguousarray(_nhwc(grad_out)))
    return _nchw(gx), gw, gb


# ---------------------------------------------------------------------------
# 2x2 stride-2 transposed convolution (exactly doubles spatial dims)

@dataclass
class ConvT2dCache:
    x: np.ndarray  # NHWC
    w: np.ndarray  # [C, O, 2, 2]


def convt2x2_nhwc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Each input pixel scatters one weighted, non-overlapping 2x2 block."""
    bs, h, wd, c = x.shape
    o = w.shape[1]
    blocks = (x.reshape(-1, c) @ w.transpose(0, 2, 3, 1).reshape(c, -1)).reshape(
        bs, h, wd, 2, 2, o)
    out = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(bs, 2 * h, 2 * wd, o) + b
    return out, ConvT2dCache(x=x, w=w)


def convt2x2_nhwc_backward(cache: ConvT2dCache, grad_out: np.ndarray):
    x, w = cache.x, cache.w
    bs, h, wd, c = x.shape
    o = w.shape[1]
    g6 = grad_out.reshape(bs, h, 2, wd, 2, o).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * o)
    xmat = x.reshape(-1, c)
    grad_w = (xmat.T @ g6).reshape(c, 2, 2, o).transpose(0, 3, 1, 2).copy()
    grad_b = grad_out.sum(axis=(0, 1, 2))
    grad_x = (g6 @ w.transpose(0, 2, 3, 1).reshape(c, -1).T).reshape(x.shape)
    return grad_x, grad_w, grad_b


def convtranspose2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x [B,C,H,W], w [C,O,2,2], b [O] -> (out [B,O,2H,2W], cache)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(f"convtranspose2d expects [C,O,2,2] weights, got {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)")
    out, cache = convt2x2_nhwc_forward(np.ascontiguousarray(_nhwc(x)), w, b)
    return _nchw(out), cache


def convtranspose2d_backward(cache: ConvT2dCache, grad_out: np.ndarray):
    bs, h, wd, _ = cache.x.shape
    if grad_out.shape != (bs, cache.w.shape[1], 2 * h, 2 * wd):
        raise ShapeError(f"grad_out {grad_out.shape} != forward output "
                         f"{(bs, cache.w.shape[1], 2 * h, 2 * wd)}")
    gx, gw, gb = convt2x2_nhwc_backward(cache, np.ascontiguousarray(_nhwc(grad_out)))
    return _nchw(gx), gw, gb


# ---------------------------------------------------------------------------
# 2x2 stride-2 max pooling

@dataclass
class PoolCache:
    argmax: np.ndarray  # uint8 in [0,4): row-major index inside each 2x2 window
    in_shape: tuple[int, ...]  # NHWC


def maxpool_nhwc_forward(x: np.ndarray):
    bs, h, wd, c = x.shape
    win = x.reshape(bs, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(
        bs, h // 2, wd // 2, 4, c)
    arg = win.argmax(axis=3).astype(np.uint8)
    out = win.max(axis=3)
    return out, PoolCache(argmax=arg, in_shape=x.shape)


def maxpool_nhwc_backward(cache: PoolCache, grad_out: np.ndarray):
    bs, h, wd, c = cache.in_shape
    buf = np.zeros((bs, h // 2, wd // 2, 4, c), dtype=grad_out.dtype)
    np.put_along_axis(buf, cache.argmax[:, :, :, None, :].astype(np.intp),
                      grad_out[:, :, :, None, :], axis=3)
    return buf.reshape(bs, h // 2, wd // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(
        bs, h, wd, c)


def maxpool2d_forward(x: np.ndarray):
    """x [B,C,H,W] with even H,W -> (out [B,C,H/2,W/2], cache).

    Ties resolve to the first element in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects rank-4 input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    out, cache = maxpool_nhwc_forward(np.ascontiguousarray(_nhwc(x)))
    return _nchw(out), cache


def maxpool2d_backward(cache: PoolCache, grad_out: np.ndarray):
    """Routes each gradient to its window's argmax; all other positions zero."""
    bs, h, wd, c = cache.in_shape
    if grad_out.shape != (bs, c, h // 2, wd // 2):
        raise ShapeError(f"grad_out {grad_out.shape} != pooled shape {(bs, c, h // 2, wd // 2)}")
    return _nchw(maxpool_nhwc_backward(cache, np.ascontiguousarray(_nhwc(grad_out))))


# ---------------------------------------------------------------------------
# ReLU (layout-free)

def relu(x: np.ndarray):
    return np.maximum(x, 0), x


def relu_backward(cache: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != cache.shape:
        raise ShapeError(f"grad_out {grad_out.shape} != input {cache.shape}")
    return grad_out * (cache > 0)


# ---------------------------------------------------------------------------
# Fully connected

@dataclass
class LinearCache:
    x: np.ndarray
    w: np.ndarray


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x [B,n_in], w [n_in,n_out], b [n_out] -> (x @ w + b, cache)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dims mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b, LinearCache(x=x, w=w)


def linear_backward(cache: LinearCache, grad_out: np.ndarray):
    x, w = cache.x, cache.w
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"grad_out {grad_out.shape} != {(x.shape[0], w.shape[1])}")
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# Channel concatenation (skip merges)

def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[B,Ca,H,W] + [B,Cb,H,W] -> [B,Ca+Cb,H,W]; a occupies the first Ca channels."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat expects rank-4 inputs, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad_out: np.ndarray, ca: int):
    """Inverse of concat_channels on the gradient: -> (grad_a, grad_b)."""
    if not 0 < ca < grad_out.shape[1]:
        raise ShapeError(f"split point {ca} outside channels of {grad_out.shape}")
    return grad_out[:, :ca].copy(), grad_out[:, ca:].copy()


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """One bias-corrected Adam update -> (new_params, new_state)."""
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for '{name}'")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_p[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(m=new_m, v=new_v, t=t, lr=state.lr, beta1=state.beta1,
                            beta2=state.beta2, eps=state.eps)

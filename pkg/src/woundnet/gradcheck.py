"""Finite-difference verification of every analytic gradient.

All checks run in float64 with central differences (h = 1e-5) against the
scalar objective sum(output * R) for a fixed random projection R, or the loss
itself for the loss ops. Relative error is |a - n| / max(1e-8, |a| + |n|).
Points within 1e-4 of a ReLU kink or a pooling tie are excluded, since the
true derivative jumps there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, losses, model
from .tensor import Rng

H = 1e-5
LAYER_TOL = 1e-4
LOSS_TOL = 1e-6
MODEL_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
    diff = np.abs(a - n) / denom
    return float(diff.max()) if diff.size else 0.0


def numerical_grad(f, x: np.ndarray, h: float = H, mask: np.ndarray | None = None,
                   indices=None) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise.

    ``mask`` marks elements to skip (their slot stays 0); ``indices`` limits
    the check to a flat-index subset (used for whole-network sampling).
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.ravel()
    xk = x.astype(np.float64).copy()
    xf = xk.ravel()
    skip = mask.ravel() if mask is not None else None
    todo = range(x.size) if indices is None else indices
    for i in todo:
        if skip is not None and skip[i]:
            continue
        orig = xf[i]
        xf[i] = orig + h
        f_plus = f(xk)
        xf[i] = orig - h
        f_minus = f(xk)
        xf[i] = orig
        flat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def _proj(rng: Rng, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, shape)


def check_conv2d(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    w = rng.uniform(-1, 1, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, (4,))
    out, cache = layers.conv2d_forward(x, w, b)
    r = _proj(rng, out.shape)
    gx, gw, gb = layers.conv2d_backward(cache, r)
    err = max(
        rel_err(gx, numerical_grad(lambda v: float((layers.conv2d_forward(v, w, b)[0] * r).sum()), x)),
        rel_err(gw, numerical_grad(lambda v: float((layers.conv2d_forward(x, v, b)[0] * r).sum()), w)),
        rel_err(gb, numerical_grad(lambda v: float((layers.conv2d_forward(x, w, v)[0] * r).sum()), b)),
    )
    return CheckResult("conv2d", err, LAYER_TOL)


def check_conv1x1(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-1, 1, (2, 5, 4, 4))
    w = rng.uniform(-1, 1, (3, 5, 1, 1))
    b = rng.uniform(-1, 1, (3,))
    out, cache = layers.conv1x1_forward(x, w, b)
    r = _proj(rng, out.shape)
    gx, gw, gb = layers.conv1x1_backward(cache, r)
    err = max(
        rel_err(gx, numerical_grad(lambda v: float((layers.conv1x1_forward(v, w, b)[0] * r).sum()), x)),
        rel_err(gw, numerical_grad(lambda v: float((layers.conv1x1_forward(x, v, b)[0] * r).sum()), w)),
        rel_err(gb, numerical_grad(lambda v: float((layers.conv1x1_forward(x, w, v)[0] * r).sum()), b)),
    )
    return CheckResult("conv1x1", err, LAYER_TOL)


def check_convtranspose2d(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-1, 1, (2, 3, 4, 4))
    w = rng.uniform(-1, 1, (3, 4, 2, 2))
    b = rng.uniform(-1, 1, (4,))
    out, cache = layers.convtranspose2d_forward(x, w, b)
    r = _proj(rng, out.shape)
    gx, gw, gb = layers.convtranspose2d_backward(cache, r)
    err = max(
        rel_err(gx, numerical_grad(
            lambda v: float((layers.convtranspose2d_forward(v, w, b)[0] * r).sum()), x)),
        rel_err(gw, numerical_grad(
            lambda v: float((layers.convtranspose2d_forward(x, v, b)[0] * r).sum()), w)),
        rel_err(gb, numerical_grad(
            lambda v: float((layers.convtranspose2d_forward(x, w, v)[0] * r).sum()), b)),
    )
    return CheckResult("convtranspose2d", err, LAYER_TOL)


def check_maxpool(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    out, cache = layers.maxpool2d_forward(x)
    r = _proj(rng, out.shape)
    gx = layers.maxpool2d_backward(cache, r)
    # exclude whole windows whose top two values nearly tie
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4)
    top2 = np.sort(win, axis=4)[..., -2:]
    tied = (top2[..., 1] - top2[..., 0]) < 1e-4
    tied4 = np.repeat(tied[..., None], 4, axis=4)
    mask = tied4.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
    num = numerical_grad(lambda v: float((layers.maxpool2d_forward(v)[0] * r).sum()), x, mask=mask)
    return CheckResult("maxpool", rel_err(np.where(mask, 0.0, gx), num), LAYER_TOL)


def check_relu(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-1, 1, (2, 3, 6, 6))
    out, cache = layers.relu(x)
    r = _proj(rng, out.shape)
    gx = layers.relu_backward(cache, r)
    mask = np.abs(x) < 1e-4
    num = numerical_grad(lambda v: float((layers.relu(v)[0] * r).sum()), x, mask=mask)
    return CheckResult("relu", rel_err(np.where(mask, 0.0, gx), num), LAYER_TOL)


def check_linear(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-1, 1, (3, 5))
    w = rng.uniform(-1, 1, (5, 4))
    b = rng.uniform(-1, 1, (4,))
    out, cache = layers.linear_forward(x, w, b)
    r = _proj(rng, out.shape)
    gx, gw, gb = layers.linear_backward(cache, r)
    err = max(
        rel_err(gx, numerical_grad(lambda v: float((layers.linear_forward(v, w, b)[0] * r).sum()), x)),
        rel_err(gw, numerical_grad(lambda v: float((layers.linear_forward(x, v, b)[0] * r).sum()), w)),
        rel_err(gb, numerical_grad(lambda v: float((layers.linear_forward(x, w, v)[0] * r).sum()), b)),
    )
    return CheckResult("linear", err, LAYER_TOL)


def check_concat(seed: int) -> CheckResult:
    rng = Rng(seed)
    a = rng.uniform(-1, 1, (2, 3, 4, 4))
    b = rng.uniform(-1, 1, (2, 2, 4, 4))
    out = layers.concat_channels(a, b)
    r = _proj(rng, out.shape)
    ga, gb = layers.split_channels(r, a.shape[1])
    err = max(
        rel_err(ga, numerical_grad(lambda v: float((layers.concat_channels(v, b) * r).sum()), a)),
        rel_err(gb, numerical_grad(lambda v: float((layers.concat_channels(a, v) * r).sum()), b)),
    )
    return CheckResult("concat", err, LAYER_TOL)


def check_cross_entropy(seed: int) -> CheckResult:
    rng = Rng(seed)
    logits = rng.uniform(-2, 2, (4, 4))
    labels = rng.integers(0, 4, 4)
    _, grad = losses.cross_entropy(logits, labels)
    num = numerical_grad(lambda v: losses.cross_entropy(v, labels)[0], logits)
    return CheckResult("cross_entropy", rel_err(grad, num), LOSS_TOL)


def check_bce_with_logits(seed: int) -> CheckResult:
    rng = Rng(seed)
    x = rng.uniform(-3, 3, (2, 1, 5, 5))
    y = (rng.uniform(0, 1, x.shape) < 0.4).astype(np.float64)
    _, grad = losses.bce_with_logits(x, y)
    num = numerical_grad(lambda v: losses.bce_with_logits(v, y)[0], x)
    return CheckResult("bce_with_logits", rel_err(grad, num), LOSS_TOL)


def check_tiny_model(seed: int, samples_per_tensor: int = 6) -> CheckResult:
    """Whole-network check on the shrunken variant, sampling a few elements
    of every parameter tensor against the joint-loss objective."""
    arch = model.TINY_ARCH
    rng = Rng(seed)
    params = model.build_model(seed, arch, dtype=np.float64)
    x = rng.uniform(0, 1, (2, arch.in_channels, arch.input_size, arch.input_size))
    labels = rng.integers(0, arch.num_classes, 2)
    target = (rng.uniform(0, 1, (2, 1, arch.input_size, arch.input_size)) < 0.3).astype(np.float64)

    def objective(p: dict[str, np.ndarray]) -> float:
        out, _ = model.forward(p, x, arch)
        cls, _ = losses.cross_entropy(out.class_logits, labels)
        seg, _ = losses.bce_with_logits(out.mask_logits, target)
        return losses.total_loss(cls, seg)

    out, cache = model.forward(params, x, arch)
    _, grad_cls = losses.cross_entropy(out.class_logits, labels)
    _, grad_seg = losses.bce_with_logits(out.mask_logits, target)
    grads = model.backward(params, cache, grad_cls, grad_seg)

    worst = 0.0
    for name, p in params.items():
        k = min(samples_per_tensor, p.size)
        idxs = sorted(set(int(i) for i in rng.integers(0, p.size, k)))

        def f(v: np.ndarray, name=name) -> float:
            trial = dict(params)
            trial[name] = v
            return objective(trial)

        num = numerical_grad(f, p, indices=idxs)
        flat_a = grads[name].ravel()
        flat_n = num.ravel()
        for i in idxs:
            worst = max(worst, rel_err(flat_a[i], flat_n[i]))
    return CheckResult("model_tiny", worst, MODEL_TOL)


LAYER_CHECKS = (
    check_conv2d,
    check_conv1x1,
    check_convtranspose2d,
    check_maxpool,
    check_relu,
    check_linear,
    check_concat,
    check_cross_entropy,
    check_bce_with_logits,
)


def layer_suite(seed: int) -> list[CheckResult]:
    return [check(seed) for check in LAYER_CHECKS]


def full_suite(seed: int) -> list[CheckResult]:
    return layer_suite(seed) + [check_tiny_model(seed)]

"""Photometric self-supervision loss and image-quality metrics.

The loss is ``MSE + lambda * perceptual``.  The perceptual term defaults to a
multi-scale image-gradient distance (no learned network); any callable
``fn(pred, target) -> (value, grad_pred)`` can be registered in its place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError

DEFAULT_LAMBDA = 0.5
CHARBONNIER_EPS = 1e-3
N_SCALES = 3
PSNR_CAP = 99.0

_PERCEPTUAL: dict[str, Callable] = {}


@dataclass
class LossValue:
    total: float
    mse_term: float
    percep_term: float
    grad_image: np.ndarray


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"image shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def _pool2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _unpool2(g, shape):
    out = np.zeros(shape)
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    out[:up.shape[0], :up.shape[1]] = up
    return out


def _charb(x):
    r = np.sqrt(x * x + CHARBONNIER_EPS**2)
    return r - CHARBONNIER_EPS, x / r


def perceptual_proxy(pred, target):
    """Multi-scale gradient-difference distance and its adjoint w.r.t. ``pred``.

    For each of three dyadic scales of the average-pooled difference image,
    adds the mean Charbonnier magnitude of its horizontal and vertical finite
    differences.  Constant offsets cost nothing.
    """
    pred, target = _check_pair(pred, target)
    if pred.shape[0] < 8 or pred.shape[1] < 8:
        raise ShapeError(f"perceptual proxy needs at least 8x8 images, got {pred.shape[:2]}")
    levels = [pred - target]
    for _ in range(N_SCALES - 1):
        levels.append(_pool2(levels[-1]))
    value = 0.0
    grads = []
    for d in levels:
        gx = d[:, 1:] - d[:, :-1]
        gy = d[1:] - d[:-1]
        vx, dvx = _charb(gx)
        vy, dvy = _charb(gy)
        value += vx.mean() + vy.mean()
        dvx /= gx.size
        dvy /= gy.size
        g = np.zeros(d.shape)
        g[:, 1:] += dvx
        g[:, :-1] -= dvx
        g[1:] += dvy
        g[:-1] -= dvy
        grads.append(g)
    grad = grads[-1]
    for s in range(N_SCALES - 2, -1, -1):
        grad = grads[s] + _unpool2(grad, levels[s].shape)
    return float(value), grad


def register_perceptual(name: str, fn: Callable) -> None:
    """Make an external differentiable image distance available by name."""
    _PERCEPTUAL[name] = fn


def get_perceptual(name: str) -> Callable:
    if name == "proxy":
        return perceptual_proxy
    try:
        return _PERCEPTUAL[name]
    except KeyError:
        raise KeyError(f"no perceptual term registered as {name!r}") from None


def photometric_loss(pred, target, lam: float = DEFAULT_LAMBDA, perceptual="proxy") -> LossValue:
    pred, target = _check_pair(pred, target)
    diff = pred - target
    mse = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    percep = 0.0
    if lam != 0.0:
        fn = get_perceptual(perceptual) if isinstance(perceptual, str) else perceptual
        percep, pgrad = fn(pred, target)
        grad = grad + lam * pgrad
    return LossValue(mse + lam * percep, mse, percep, grad)


def mse(pred, target) -> float:
    pred, target = _check_pair(pred, target)
    return float(np.mean((pred - target) ** 2))


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    m = mse(pred, target)
    if m < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(m)))

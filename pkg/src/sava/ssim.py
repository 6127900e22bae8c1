"""Windowed SSIM for videos with uniform pooling and a closed-form gradient.

Windows are square with uniform weights, slide over each frame and channel,
and only full windows inside the frame are used.  Variances and covariances
use the unbiased ``N_P - 1`` divisor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, custom_op


@dataclass(frozen=True)
class SsimConfig:
    window: int = 8
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    stride: int = 1

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


DEFAULT = SsimConfig()


def local_ssim(x, y, cfg: SsimConfig = DEFAULT) -> float:
    """SSIM of two same-shaped patches (two-constant form)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"local_ssim: patch shapes differ {x.shape} vs {y.shape}")
    n = x.size
    if n < 2:
        raise ShapeError("local_ssim: need at least 2 pixels per patch")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx = (dx * dx).sum() / (n - 1)
    vy = (dy * dy).sum() / (n - 1)
    cxy = (dx * dy).sum() / (n - 1)
    num = (2 * mx * my + cfg.c1) * (2 * cxy + cfg.c2)
    den = (mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2)
    return float(num / den)


def _as_video(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4:
        raise ShapeError(f"expected a (T, H, W, C) video, got shape {a.shape}")
    return a


def _box_sum(v: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Sum over every ``k x k`` window of axes (1, 2), via an integral image."""
    if v.shape[1] < k or v.shape[2] < k:
        raise ShapeError(f"frame {v.shape[1:3]} smaller than SSIM window {k}")
    T, H, W, C = v.shape
    ii = np.zeros((T, H + 1, W + 1, C))
    np.cumsum(v, axis=1, out=ii[:, 1:, 1:])
    np.cumsum(ii[:, 1:, 1:], axis=2, out=ii[:, 1:, 1:])
    box = ii[:, k:, k:] - ii[:, :-k, k:] - ii[:, k:, :-k] + ii[:, :-k, :-k]
    return box[:, ::stride, ::stride]


def _box_adjoint(c: np.ndarray, k: int, stride: int, H: int, W: int) -> np.ndarray:
    """Transpose of ``_box_sum``: each pixel collects the values of windows covering it."""
    T, nh, nw, C = c.shape
    out = np.zeros((T, H, W, C))
    if stride == 1:
        padded = np.zeros((T, nh + 2 * (k - 1), nw + 2 * (k - 1), C))
        padded[:, k - 1:k - 1 + nh, k - 1:k - 1 + nw] = c
        return _box_sum(padded, k, 1)
    for i in range(k):
        rows = slice(i, i + (nh - 1) * stride + 1, stride)
        for j in range(k):
            out[:, rows, slice(j, j + (nw - 1) * stride + 1, stride)] += c
    return out


def _stats(X: np.ndarray, Y: np.ndarray, cfg: SsimConfig):
    k, s = cfg.window, cfg.stride
    n = k * k
    sx, sy = _box_sum(X, k, s), _box_sum(Y, k, s)
    mx, my = sx / n, sy / n
    vx = (_box_sum(X * X, k, s) - sx * mx) / (n - 1)
    vy = (_box_sum(Y * Y, k, s) - sy * my) / (n - 1)
    cxy = (_box_sum(X * Y, k, s) - sx * my) / (n - 1)
    return mx, my, vx, vy, cxy


def _pair(X, Xh) -> tuple[np.ndarray, np.ndarray]:
    X, Xh = _as_video(X), _as_video(Xh)
    if X.shape != Xh.shape:
        raise ShapeError(f"video shapes differ {X.shape} vs {Xh.shape}")
    return X, Xh


def ssim_map(X, Xh, cfg: SsimConfig = DEFAULT) -> np.ndarray:
    """Local SSIM at every window placement, shaped ``(T, nh, nw, C)``."""
    X, Xh = _pair(X, Xh)
    mx, my, vx, vy, cxy = _stats(X, Xh, cfg)
    m1 = 2 * mx * my + cfg.c1
    m2 = 2 * cxy + cfg.c2
    p1 = mx * mx + my * my + cfg.c1
    p2 = vx + vy + cfg.c2
    return (m1 * m2) / (p1 * p2)


def video_ssim(X, Xh, cfg: SsimConfig = DEFAULT) -> float:
    """Uniformly pooled SSIM over all windows, frames and channels."""
    return float(ssim_map(X, Xh, cfg).mean())


def ssim_loss(X, Xh, cfg: SsimConfig = DEFAULT) -> float:
    return 1.0 - video_ssim(X, Xh, cfg)


def ssim_gradient(X, Xh, cfg: SsimConfig = DEFAULT) -> np.ndarray:
    """Gradient of ``video_ssim(X, Xh)`` with respect to ``Xh``.

    Within one window (``m1 = 2 mu_x mu_y + C1``, ``m2 = 2 s_xy + C2``,
    ``p1 = mu_x^2 + mu_y^2 + C1``, ``p2 = s_x^2 + s_y^2 + C2``, ``a = 1/N_P``,
    ``b = 1/(N_P - 1)``) the derivative at pixel ``y_i`` is::

        2 / (p1^2 p2^2) * [ b m1 p1 (p2 x_i - m2 y_i)
                            + mu_x p1 p2 (a m2 - b m1)
                            + mu_y m1 m2 (b p1 - a p2) ]

    Per-window terms are scattered back onto their pixels and divided by
    the window count.
    """
    X, Xh = _pair(X, Xh)
    k, s = cfg.window, cfg.stride
    n = k * k
    a, b = 1.0 / n, 1.0 / (n - 1)
    mx, my, vx, vy, cxy = _stats(X, Xh, cfg)
    m1 = 2 * mx * my + cfg.c1
    m2 = 2 * cxy + cfg.c2
    p1 = mx * mx + my * my + cfg.c1
    p2 = vx + vy + cfg.c2
    scale = 2.0 / (p1 * p1 * p2 * p2)
    # grad_i = cx * x_i + cy * y_i + c0, per window
    cx = scale * b * m1 * p1 * p2
    cy = -scale * b * m1 * p1 * m2
    c0 = scale * (mx * p1 * p2 * (a * m2 - b * m1) + my * m1 * m2 * (b * p1 - a * p2))

    _, H, W, _ = X.shape
    acc_x = _box_adjoint(cx, k, s, H, W)
    acc_y = _box_adjoint(cy, k, s, H, W)
    acc_0 = _box_adjoint(c0, k, s, H, W)
    count = cx.size
    return (acc_x * X + acc_y * Xh + acc_0) / count


def ssim_tensor(X, Xh, cfg: SsimConfig = DEFAULT) -> Tensor:
    """``video_ssim`` as a graph node; gradients flow to both arguments."""
    X, Xh = as_tensor(X), as_tensor(Xh)
    value = video_ssim(X.data, Xh.data, cfg)
    shape = X.shape

    def fn(g):
        gx = ssim_gradient(Xh.data, X.data, cfg).reshape(shape) * g if X.requires_grad else None
        gy = ssim_gradient(X.data, Xh.data, cfg).reshape(shape) * g if Xh.requires_grad else None
        return gx, gy

    return custom_op((X, Xh), np.asarray(value), fn, "video_ssim")

"""Differentiable backward warping of video frames by a per-pixel flow.

An output pixel at ``(r, c)`` of a masked frame samples the source frame at
``(r + dr, c + dc)`` with bilinear interpolation; sample coordinates are
clamped to the frame.  Flow layout is ``(T, 2, H, W)`` with channel 0 the
row displacement and channel 1 the column displacement.  Unmasked frames are
copied unchanged.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, custom_op


def _check(X: np.ndarray, U: np.ndarray, M: np.ndarray) -> None:
    if X.ndim != 4:
        raise ShapeError(f"warp: video must be (T, H, W, C), got {X.shape}")
    T, H, W, _ = X.shape
    if U.shape != (T, 2, H, W):
        raise ShapeError(f"warp: flow shape {U.shape} does not match video {X.shape}")
    if M.shape != (T,):
        raise ShapeError(f"warp: mask length {M.shape} does not match T={T}")


def _axis_coords(base: np.ndarray, disp: np.ndarray, extent: int):
    """Clamped sample coordinate split into lower index, fraction, and clamp-interior flag."""
    p = base + disp
    inside = (p >= 0) & (p <= extent - 1)
    if extent == 1:
        zero = np.zeros(p.shape, dtype=np.intp)
        return zero, zero, np.zeros(p.shape), np.zeros(p.shape, dtype=bool)
    pc = np.clip(p, 0, extent - 1)
    i0 = np.clip(np.floor(pc).astype(np.intp), 0, extent - 2)
    return i0, i0 + 1, pc - i0, inside


def _sampling(X: np.ndarray, U: np.ndarray, frames: np.ndarray):
    _, H, W, _ = X.shape
    rows = np.arange(H, dtype=np.float64)[None, :, None]
    cols = np.arange(W, dtype=np.float64)[None, None, :]
    r0, r1, a, in_r = _axis_coords(rows, U[frames, 0], H)
    c0, c1, b, in_c = _axis_coords(cols, U[frames, 1], W)
    return r0, r1, a, in_r, c0, c1, b, in_c


def warp(X, U, M) -> np.ndarray:
    """Warp masked frames of ``X`` by flow ``U``."""
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    M = np.asarray(M).astype(bool)
    _check(X, U, M)
    out = X.copy()
    frames = np.flatnonzero(M)
    if frames.size == 0:
        return out
    r0, r1, a, _, c0, c1, b, _ = _sampling(X, U, frames)
    t = frames[:, None, None]
    a, b = a[..., None], b[..., None]
    out[frames] = ((1 - a) * (1 - b) * X[t, r0, c0] + (1 - a) * b * X[t, r0, c1]
                   + a * (1 - b) * X[t, r1, c0] + a * b * X[t, r1, c1])
    return out


def warp_grad(X, U, M, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * warp(X, U, M))`` with respect to ``X`` and ``U``."""
    X = np.asarray(X, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    M = np.asarray(M).astype(bool)
    g = np.asarray(upstream, dtype=np.float64)
    _check(X, U, M)
    if g.shape != X.shape:
        raise ShapeError(f"warp_grad: upstream {g.shape} does not match video {X.shape}")
    T, H, W, C = X.shape
    gX = np.where(M[:, None, None, None], 0.0, g)
    gU = np.zeros_like(U)
    frames = np.flatnonzero(M)
    if frames.size == 0:
        return gX, gU
    r0, r1, a, in_r, c0, c1, b, in_c = _sampling(X, U, frames)
    t = frames[:, None, None]
    x00, x01 = X[t, r0, c0], X[t, r0, c1]
    x10, x11 = X[t, r1, c0], X[t, r1, c1]
    gm = g[frames]
    a3, b3 = a[..., None], b[..., None]
    d_a = (1 - b3) * (x10 - x00) + b3 * (x11 - x01)
    d_b = (1 - a3) * (x01 - x00) + a3 * (x11 - x10)
    gU[frames, 0] = (gm * d_a).sum(axis=-1) * in_r
    gU[frames, 1] = (gm * d_b).sum(axis=-1) * in_c

    tt = np.broadcast_to(t, r0.shape)
    size = T * H * W
    flat_gX = np.zeros((size, C))
    for ri, ci, wgt in ((r0, c0, (1 - a) * (1 - b)), (r0, c1, (1 - a) * b),
                        (r1, c0, a * (1 - b)), (r1, c1, a * b)):
        idx = ((tt * H + ri) * W + ci).ravel()
        for ch in range(C):
            flat_gX[:, ch] += np.bincount(idx, weights=(gm[..., ch] * wgt).ravel(), minlength=size)
    gX += flat_gX.reshape(T, H, W, C)
    return gX, gU


def warp_tensor(X, U, M) -> Tensor:
    """``warp`` as a graph node over tensor-valued video and flow."""
    X, U = as_tensor(X), as_tensor(U)
    M = np.asarray(M)
    value = warp(X.data, U.data, M)

    def fn(g):
        gX, gU = warp_grad(X.data, U.data, M, g)
        return gX, gU

    return custom_op((X, U), value, fn, "warp")

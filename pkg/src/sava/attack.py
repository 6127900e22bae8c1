"""Combined additive + spatial perturbation on masked frames, optimized with Adam.

The adversarial video is ``clip(N * M + warp(X, U, M), 0, 1)`` and the
minimized objective is ``lam * (1 - SSIM(X_adv, X)) - CE(J(X_adv), y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import AttackConfig, Budget, normalize_mode
from .metrics import l21_distance
from .models import DEFAULT_LAMBDA, ClassifierSpec, cross_entropy, forward
from .optim import AdamState, adam_step
from .ssim import SsimConfig, ssim_tensor, video_ssim
from .warp import warp, warp_tensor

PROJECTION_STEPS = 40


@dataclass
class Perturbation:
    noise: np.ndarray  # (T, H, W, C)
    flow: np.ndarray  # (T, 2, H, W)

    @classmethod
    def zeros(cls, video_shape) -> "Perturbation":
        T, H, W, C = video_shape
        return cls(np.zeros((T, H, W, C)), np.zeros((T, 2, H, W)))


@dataclass
class AttackResult:
    success: bool
    iterations: int
    perturbation: Perturbation
    adversarial: np.ndarray
    ssim_distance: float
    l21_distance: float
    pred_label: int
    true_label: int
    mask: np.ndarray
    objective: float
    objective_start: float


def as_mask(M, T: int) -> np.ndarray:
    M = np.asarray(M)
    if M.shape != (T,):
        raise ShapeError(f"mask length {M.shape} does not match T={T}")
    if not np.all((M == 0) | (M == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return M.astype(np.float64)


def mask_from_frames(frames, T: int) -> np.ndarray:
    M = np.zeros(T)
    for t in frames:
        if not 0 <= t < T:
            raise ValueError(f"frame {t} outside [0, {T})")
        M[t] = 1.0
    return M


def ablation_mode(mode: str) -> tuple[bool, bool]:
    """Which of (noise, flow) are optimized in the given mode."""
    mode = normalize_mode(mode)
    return mode != "spatial_only", mode != "noise_only"


def _check_video(X: np.ndarray, p: Perturbation | None = None) -> None:
    if X.ndim != 4:
        raise ShapeError(f"video must be (T, H, W, C), got {X.shape}")
    if p is not None:
        T, H, W, _ = X.shape
        if p.noise.shape != X.shape:
            raise ShapeError(f"noise shape {p.noise.shape} does not match video {X.shape}")
        if p.flow.shape != (T, 2, H, W):
            raise ShapeError(f"flow shape {p.flow.shape} does not match video {X.shape}")


def compose_adversarial(X, p: Perturbation, M) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _check_video(X, p)
    M = as_mask(M, X.shape[0])
    return np.clip(p.noise * M[:, None, None, None] + warp(X, p.flow, M), 0.0, 1.0)


def compose_tensor(X: np.ndarray, N: Tensor, U: Tensor, M: np.ndarray) -> Tensor:
    gate = np.broadcast_to(M[:, None, None, None], X.shape)
    return ad.clamp(N * gate + warp_tensor(X, U, M), 0.0, 1.0)


def _objective_tensor(Xh: Tensor, X: np.ndarray, y: int, spec: ClassifierSpec,
                      lam: float, cfg_ssim: SsimConfig) -> tuple[Tensor, Tensor]:
    probs = forward(spec, Xh)
    obj = lam * (1.0 - ssim_tensor(Xh, X, cfg_ssim)) - cross_entropy(probs, y)
    return obj, probs


def objective(Xh, X, y: int, spec: ClassifierSpec, lam: float,
              cfg_ssim: SsimConfig = SsimConfig()) -> float:
    obj, _ = _objective_tensor(ad.as_tensor(Xh), np.asarray(X, dtype=np.float64), y, spec, lam, cfg_ssim)
    return obj.item()


def resolve_lambda(cfg: AttackConfig, spec: ClassifierSpec) -> float:
    return DEFAULT_LAMBDA.get(spec.arch, 1.0) if cfg.lam is None else cfg.lam


def within_budget(Xh: np.ndarray, X: np.ndarray, budget: Budget | None,
                  cfg_ssim: SsimConfig) -> bool:
    if budget is None:
        return True
    if budget.kind == "ssim":
        return video_ssim(Xh, X, cfg_ssim) >= budget.value
    return l21_distance(Xh - X) <= budget.value


def _masked_within(X: np.ndarray, p: Perturbation, frames: np.ndarray, budget: Budget,
                   cfg_ssim: SsimConfig) -> bool:
    """Budget test that only recomposes masked frames.

    Unmasked frames are copied exactly, so they contribute SSIM 1 and zero
    norm; both pooled measures are uniform means over frames.
    """
    T = X.shape[0]
    sub = Perturbation(p.noise[frames], p.flow[frames])
    Xs = X[frames]
    adv = compose_adversarial(Xs, sub, np.ones(len(frames)))
    n = len(frames)
    if budget.kind == "ssim":
        return (video_ssim(adv, Xs, cfg_ssim) * n + (T - n)) / T >= budget.value
    return l21_distance(adv - Xs) * n / T <= budget.value


def project_to_budget(X: np.ndarray, p: Perturbation, M: np.ndarray, budget: Budget | None,
                      cfg_ssim: SsimConfig) -> tuple[Perturbation, float]:
    """Scale ``(N, U)`` toward zero by bisection until the budget holds.

    Returns the scaled perturbation and the factor used (1.0 when already feasible).
    """
    if budget is None:
        return p, 1.0
    frames = np.flatnonzero(as_mask(M, X.shape[0]))
    if _masked_within(X, p, frames, budget, cfg_ssim):
        return p, 1.0
    lo, hi = 0.0, 1.0
    for _ in range(PROJECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if _masked_within(X, Perturbation(p.noise * mid, p.flow * mid), frames, budget, cfg_ssim):
            lo = mid
        else:
            hi = mid
    return Perturbation(p.noise * lo, p.flow * lo), lo


def optimize_perturbation(X, y: int, M, spec: ClassifierSpec, cfg: AttackConfig,
                          early_stop: bool = True, max_iters: int | None = None) -> AttackResult:
    """Adam on noise and flow for a fixed frame mask.

    Iteration ``i`` evaluates the iterate after ``i`` updates.  With
    ``early_stop`` the loop returns at the first misclassified iterate.
    Under a budget each update is followed by a projection, so every
    iterate (and the returned video) satisfies it.
    """
    X = np.asarray(X, dtype=np.float64)
    _check_video(X)
    M = as_mask(M, X.shape[0])
    if not M.any():
        raise ValueError("mask selects no frames")
    y = int(y)
    iters = cfg.max_iters if max_iters is None else max_iters
    lam = resolve_lambda(cfg, spec)
    use_noise, use_flow = ablation_mode(cfg.mode)
    p = Perturbation.zeros(X.shape)
    state = AdamState.like([p.noise, p.flow])

    start = None
    for it in range(iters + 1):
        N = Tensor(p.noise, requires_grad=use_noise)
        U = Tensor(p.flow, requires_grad=use_flow)
        Xh = compose_tensor(X, N, U, M)
        obj, probs = _objective_tensor(Xh, X, y, spec, lam, cfg.ssim)
        pred = int(np.argmax(probs.data))
        if start is None:
            start = obj.item()
        if (early_stop and pred != y) or it == iters:
            break
        gN, gU = ad.grad(obj, [N, U])
        if not use_noise:
            gN = np.zeros_like(gN)
        if not use_flow:
            gU = np.zeros_like(gU)
        (noise, flow), state = adam_step([p.noise, p.flow], [gN, gU], state, cfg.lr)
        p, _ = project_to_budget(X, Perturbation(noise, flow), M, cfg.budget, cfg.ssim)

    adv = Xh.data
    return AttackResult(
        success=pred != y,
        iterations=it,
        perturbation=p,
        adversarial=adv,
        ssim_distance=1.0 - video_ssim(adv, X, cfg.ssim),
        l21_distance=l21_distance(adv - X),
        pred_label=pred,
        true_label=y,
        mask=M,
        objective=obj.item(),
        objective_start=start,
    )

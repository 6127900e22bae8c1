"""Key-frame selection by Bayesian optimization, with exhaustive search as the oracle.

Candidate frames are encoded as ``t / (T - 1)`` on ``[0, 1]``; a 1-D Gaussian
process with a squared-exponential kernel is fit to standardized mask scores,
and the next frame is the unevaluated candidate with the largest expected
improvement.  Scores measure attack progress (higher is better).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from .attack import mask_from_frames, optimize_perturbation
from .config import AttackConfig, BoConfig
from .models import ClassifierSpec

TIE_TOL = 1e-9


def expected_improvement(mu, sigma, best):
    """EI for maximization; vectorized over ``mu`` and ``sigma``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("expected_improvement: sigma must be >= 0")
    gain = mu - best
    safe = np.where(sigma > 0, sigma, 1.0)
    z = gain / safe
    ei = np.where(sigma > 0, gain * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass
class GpState:
    samples: list[tuple[float, float]] = field(default_factory=list)
    kernel_lengthscale: float = 0.1
    signal_var: float = 1.0
    noise: float = 1e-6
    best_score: float = -np.inf
    best_mask: np.ndarray | None = None

    def add(self, x: float, score: float, mask: np.ndarray | None = None) -> None:
        self.samples.append((float(x), float(score)))
        if score > self.best_score:
            self.best_score = float(score)
            self.best_mask = mask

    def kernel(self, a, b) -> np.ndarray:
        d = np.subtract.outer(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        return self.signal_var * np.exp(-0.5 * (d / self.kernel_lengthscale) ** 2)


def gp_posterior(state: GpState, query):
    """Posterior mean and standard deviation at ``query`` (zero prior mean)."""
    if not state.samples:
        raise ValueError("gp_posterior: no samples")
    xs = np.array([s[0] for s in state.samples])
    ys = np.array([s[1] for s in state.samples])
    K = state.kernel(xs, xs) + state.noise * np.eye(len(xs))
    try:
        factor = cho_factor(K, lower=True)
    except LinAlgError as exc:
        raise ValueError(f"gp_posterior: kernel matrix is singular for inputs {xs.tolist()}") from exc
    q = np.atleast_1d(np.asarray(query, dtype=np.float64))
    ks = state.kernel(xs, q)  # (n, m)
    mean = ks.T @ cho_solve(factor, ys)
    var = state.signal_var - np.sum(ks * cho_solve(factor, ks), axis=0)
    std = np.sqrt(np.maximum(var, 0.0))
    if np.ndim(query) == 0:
        return float(mean[0]), float(std[0])
    return mean, std


def score_mask(X, y: int, M, spec: ClassifierSpec, cfg: AttackConfig) -> float:
    """Attack progress after a short Adam run on mask ``M``: minus the final objective."""
    res = optimize_perturbation(X, y, M, spec, cfg, early_stop=False, max_iters=cfg.bo.inner_iters)
    return -res.objective


def _argmax_low(scores) -> int:
    """Index of the maximum, preferring the lowest index among near-ties."""
    arr = np.asarray(scores, dtype=np.float64)
    return int(np.flatnonzero(arr >= arr.max() - TIE_TOL)[0])


@dataclass
class SelectionTrace:
    evaluations: list[int] = field(default_factory=list)  # frames scored, in order
    scores: dict[int, float] = field(default_factory=dict)


def _bo_one(X, y, spec, cfg: AttackConfig, fixed: list[int], rng: np.random.Generator,
            trace: SelectionTrace) -> int:
    T = X.shape[0]
    bo = cfg.bo
    candidates = [t for t in range(T) if t not in fixed]
    if len(candidates) == 1:
        return candidates[0]
    enc = {t: (t / (T - 1) if T > 1 else 0.0) for t in candidates}
    budget = min(bo.evals_for(T), len(candidates))
    scores: dict[int, float] = {}

    def evaluate(t: int) -> None:
        scores[t] = score_mask(X, y, mask_from_frames(fixed + [t], T), spec, cfg)
        trace.evaluations.append(t)
        trace.scores[t] = scores[t]

    n_init = min(bo.init_samples, budget)
    for t in sorted(rng.choice(candidates, size=n_init, replace=False).tolist()):
        evaluate(int(t))
    while len(scores) < budget:
        raw = np.array(list(scores.values()))
        spread = raw.std()
        std = (raw - raw.mean()) / (spread if spread > 0 else 1.0)
        state = GpState(kernel_lengthscale=bo.lengthscale, signal_var=bo.signal_var, noise=bo.noise)
        for t, s in zip(scores, std):
            state.add(enc[t], s)
        pending = [t for t in candidates if t not in scores]
        mu, sigma = gp_posterior(state, np.array([enc[t] for t in pending]))
        ei = expected_improvement(mu, sigma, state.best_score)
        evaluate(pending[_argmax_low(ei)])
    ordered = sorted(scores)
    return ordered[_argmax_low([scores[t] for t in ordered])]


def select_frames_bo(X, y: int, spec: ClassifierSpec, k: int, cfg: AttackConfig,
                     trace: SelectionTrace | None = None) -> np.ndarray:
    """Greedy BO: choose ``k`` frames one at a time, each conditioned on those already fixed."""
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    if not 1 <= k <= T:
        raise ValueError(f"k must lie in [1, {T}], got {k}")
    trace = SelectionTrace() if trace is None else trace
    rng = np.random.default_rng(cfg.bo.seed)
    fixed: list[int] = []
    for _ in range(k):
        fixed.append(_bo_one(X, y, spec, cfg, fixed, rng, trace))
    return mask_from_frames(fixed, T)


def select_frames_brute(X, y: int, spec: ClassifierSpec,
                        cfg: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    """Score every single-frame mask; return the best mask and all scores."""
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    scores = np.array([score_mask(X, y, mask_from_frames([t], T), spec, cfg) for t in range(T)])
    return mask_from_frames([_argmax_low(scores)], T), scores

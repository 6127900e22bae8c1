"""Attack and frame-selection settings."""

from __future__ import annotations

from dataclasses import dataclass, field

from .ssim import SsimConfig

MODES = ("noise_only", "spatial_only", "combined")
_MODE_ALIASES = {"noise": "noise_only", "spatial": "spatial_only"}


@dataclass(frozen=True)
class Budget:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("l21", "ssim"):
            raise ValueError(f"budget kind must be 'l21' or 'ssim', got {self.kind!r}")
        if self.kind == "ssim" and not 0 < self.value <= 1:
            raise ValueError(f"ssim budget must lie in (0, 1], got {self.value}")
        if self.kind == "l21" and self.value <= 0:
            raise ValueError(f"l21 budget must be positive, got {self.value}")

    @classmethod
    def parse(cls, text: str) -> "Budget":
        kind, sep, value = text.partition(":")
        if not sep:
            raise ValueError(f"budget must look like 'l21:0.1' or 'ssim:0.96', got {text!r}")
        return cls(kind.strip(), float(value))

    def __str__(self) -> str:
        return f"{self.kind}:{self.value:g}"


@dataclass(frozen=True)
class BoConfig:
    init_samples: int = 3
    max_evals: int | None = None  # None -> min(T, 15)
    inner_iters: int = 5
    seed: int = 0
    lengthscale: float = 0.1
    signal_var: float = 1.0
    noise: float = 1e-6

    def __post_init__(self):
        if self.init_samples < 2:
            raise ValueError("init_samples must be >= 2")
        if self.max_evals is not None and self.max_evals < self.init_samples:
            raise ValueError("max_evals must be >= init_samples")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")

    def evals_for(self, T: int) -> int:
        return min(T, 15) if self.max_evals is None else self.max_evals


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


@dataclass(frozen=True)
class AttackConfig:
    lam: float | None = None  # None -> per-architecture default
    lr: float = 0.01
    max_iters: int = 100
    budget: Budget | None = None
    bo: BoConfig = field(default_factory=BoConfig)
    seed: int = 0
    mode: str = "combined"
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        object.__setattr__(self, "mode", normalize_mode(self.mode))

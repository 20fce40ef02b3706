"""Variance schedules, time-aware scaling and the closed-form forward process.

``beta_bar[t]`` is the cumulative noise *variance* at diffusion index ``t``,
so the forward marginal is ``z_t = sqrt(1 - beta_bar[t]) * z0 + sqrt(beta_bar[t]) * eps``.
During training the noise std is additionally multiplied by ``lambda(t) = k1 + k2 * t``;
everything on the sampling side uses the unscaled marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np
import torch

CLAMP_DELTA = 1e-4

TimeIndex = Union[int, torch.Tensor]


def sqrt_beta_bar(T: int, s: float) -> np.ndarray:
    """Raw sqrt schedule ``min(sqrt(t/T + s), 1 - delta)`` for ``t = 0..T`` (no validation)."""
    t = np.arange(T + 1, dtype=np.float64)
    return np.minimum(np.sqrt(t / T + s), 1.0 - CLAMP_DELTA)


def linear_beta_bar(T: int, s: float) -> np.ndarray:
    """Cumulative variance growing linearly from ``s`` to ``1 - delta``."""
    t = np.arange(T + 1, dtype=np.float64)
    return s + (1.0 - CLAMP_DELTA - s) * t / T


_KINDS = {"sqrt": sqrt_beta_bar, "linear": linear_beta_bar}


@dataclass(frozen=True)
class NoiseSchedule:
    kind: Literal["sqrt", "linear"]
    T: int
    s: float = 1e-4
    beta_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"offset s must lie in (0, 1), got {self.s}")
        beta_bar = _KINDS[self.kind](int(self.T), float(self.s))
        if np.any(np.diff(beta_bar) <= 0):
            raise ValueError(
                f"{self.kind} schedule with T={self.T}, s={self.s} is not strictly increasing "
                f"after clamping to 1-{CLAMP_DELTA}"
            )
        beta_bar.setflags(write=False)
        object.__setattr__(self, "beta_bar", beta_bar)

    @property
    def betas(self) -> np.ndarray:
        """Per-step variances; ``betas[0] = beta_bar[0]`` is the step out of clean data."""
        bb = self.beta_bar
        out = np.empty_like(bb)
        out[0] = bb[0]
        out[1:] = 1.0 - (1.0 - bb[1:]) / (1.0 - bb[:-1])
        return out

    def descriptor(self) -> dict:
        return {"kind": self.kind, "T": int(self.T), "s": float(self.s)}

    def gather(self, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
        """``beta_bar[t]`` as a tensor broadcastable against ``like`` (batch on dim 0)."""
        return _gather(self.beta_bar, t, like)


def make_schedule(kind: str = "sqrt", T: int = 2000, s: float = 1e-4) -> NoiseSchedule:
    return NoiseSchedule(kind, T, s)


@dataclass(frozen=True)
class ScalingPolicy:
    """Time-aware noise scale ``lambda(t) = k1 + k2 * t`` applied at training time."""

    k1: float = 3.0
    k2: float = 7.5e-4

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError(f"k1 must be positive, got {self.k1}")
        if self.k2 < 0:
            raise ValueError(f"k2 must be non-negative, got {self.k2}")

    def __call__(self, t):
        return self.k1 + self.k2 * t

    def lambdas(self, T: int) -> np.ndarray:
        return self.k1 + self.k2 * np.arange(T + 1, dtype=np.float64)

    def mean_lambda(self, T: int) -> float:
        return float(self.lambdas(T).mean())

    def descriptor(self) -> dict:
        return {"k1": float(self.k1), "k2": float(self.k2)}


UNSCALED = ScalingPolicy(1.0, 0.0)


def lambda_at(policy: ScalingPolicy, t: int) -> float:
    return policy.k1 + policy.k2 * t


def fixed_policy(policy: ScalingPolicy, T: int) -> ScalingPolicy:
    """Constant-scale policy equal to the time average of ``policy`` over ``[0, T]``."""
    return ScalingPolicy(policy.mean_lambda(T), 0.0)


def _gather(values: np.ndarray, t: TimeIndex, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        out = torch.tensor(values, dtype=like.dtype, device=like.device)[t.long()]
        return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))
    return torch.tensor(values[int(t)], dtype=like.dtype, device=like.device)


def forward_sample(
    z0: torch.Tensor,
    t: TimeIndex,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
    policy: ScalingPolicy | None = None,
    mode: Literal["train", "unscaled"] = "train",
) -> torch.Tensor:
    """Draw ``z_t ~ q(z_t | z0)`` using the supplied standard-normal ``noise``.

    ``t`` is an int or a per-example index tensor of shape ``(B,)``.
    In ``train`` mode the noise std is multiplied by ``policy(t)``.
    """
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs noise {tuple(noise.shape)}")
    if mode not in ("train", "unscaled"):
        raise ValueError(f"unknown mode {mode!r}")
    bb = schedule.gather(t, z0)
    std = bb.sqrt()
    if mode == "train" and policy is not None:
        lam = policy(t.to(z0.dtype) if isinstance(t, torch.Tensor) else float(t))
        if isinstance(lam, torch.Tensor):
            lam = lam.reshape(lam.shape + (1,) * (z0.dim() - lam.dim()))
        std = std * lam
    return (1.0 - bb).sqrt() * z0 + std * noise


@dataclass
class AlignmentReport:
    ok: bool
    violations: list[int]
    min_lambda: float

    def __bool__(self):
        return self.ok


def check_alignment(schedule: NoiseSchedule, policy: ScalingPolicy) -> AlignmentReport:
    """Training noise must be strictly wider than sampling noise: ``lambda(t) > 1`` for all t."""
    lam = policy.lambdas(schedule.T)
    bad = np.nonzero(~(lam > 1.0))[0]
    return AlignmentReport(ok=bad.size == 0, violations=[int(i) for i in bad], min_lambda=float(lam.min()))

"""Shifted-cosine logSNR schedule and the variance-preserving forward process.

Time runs from t=0 (clean data) to t=1 (pure noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import torch

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "shifted-cosine"
    shift: float = 0.0
    t_min: float = 1e-4
    t_max: float = 1.0 - 1e-4

    def __post_init__(self):
        if self.kind != "shifted-cosine":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise ValueError("need 0 < t_min < t_max < 1")

    def logsnr(self, t: Scalar) -> Scalar:
        return logsnr(self, t)

    def with_shift(self, shift: float) -> "NoiseSchedule":
        return NoiseSchedule(self.kind, float(shift), self.t_min, self.t_max)


class AlphaSigma(NamedTuple):
    alpha: Scalar
    sigma: Scalar


def shift_for_resolution(d: int, base_resolution: int = 64, log_base: float = math.e) -> float:
    """Additive logSNR shift ``2 log(base/d)`` for images of side ``d``.

    ``log_base`` defaults to natural log; pass 10 to get the base-10 reading.
    """
    if isinstance(d, bool) or not isinstance(d, int) or d <= 0:
        raise ValueError(f"resolution must be a positive integer, got {d!r}")
    return 2.0 * math.log(base_resolution / d) / math.log(log_base)


def logsnr(schedule: NoiseSchedule, t: Scalar) -> Scalar:
    if isinstance(t, torch.Tensor):
        tc = t.clamp(schedule.t_min, schedule.t_max)
        return -2.0 * torch.log(torch.tan(math.pi * tc / 2)) + schedule.shift
    tc = min(max(float(t), schedule.t_min), schedule.t_max)
    return -2.0 * math.log(math.tan(math.pi * tc / 2)) + schedule.shift


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def alpha_sigma(lam: Scalar) -> AlphaSigma:
    if isinstance(lam, torch.Tensor):
        return AlphaSigma(torch.sigmoid(lam).sqrt(), torch.sigmoid(-lam).sqrt())
    return AlphaSigma(math.sqrt(_sigmoid(lam)), math.sqrt(_sigmoid(-lam)))


def _broadcast(coef: Scalar, like: torch.Tensor) -> Scalar:
    if isinstance(coef, torch.Tensor) and coef.ndim:
        return coef.to(like.dtype).reshape(coef.shape + (1,) * (like.ndim - coef.ndim))
    return coef


def forward_diffuse(x: torch.Tensor, t: Scalar, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``z_t = alpha(t) x + sigma(t) eps``; a 1-D ``t`` is one time per batch row."""
    if x.shape != eps.shape:
        raise ValueError(f"x shape {tuple(x.shape)} != eps shape {tuple(eps.shape)}")
    if isinstance(t, torch.Tensor):
        t = t.to(torch.float64)
    a, s = alpha_sigma(logsnr(schedule, t))
    return _broadcast(a, x) * x + _broadcast(s, x) * eps

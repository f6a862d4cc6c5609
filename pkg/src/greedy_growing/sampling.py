"""Ancestral DDPM sampling with classifier-free guidance, and PNG output."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from .architecture import predict_eps
from .conditioning import EmbeddingSequence, TextEncoder, encode_batch, take
from .config import ModelConfig
from .params import ParameterTree
from .schedule import NoiseSchedule, alpha_sigma, logsnr, shift_for_resolution

SHALLOW_GUIDANCE = 1.75
GROWN_GUIDANCE = 4.0

# (z, t, cond or None) -> eps estimate; stands in for a ParameterTree in tests
EpsModel = Callable[[torch.Tensor, torch.Tensor, Optional[Sequence[EmbeddingSequence]]], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 256
    guidance_weight: float = 1.0
    seed: int = 0
    # None: derive the shift from the model's resolution
    schedule: Optional[NoiseSchedule] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if not self.guidance_weight >= 0:
            raise ValueError("guidance weight must be non-negative")

    def to_dict(self) -> dict:
        s = self.schedule
        return {
            "steps": self.steps,
            "guidance_weight": self.guidance_weight,
            "seed": self.seed,
            "schedule": None if s is None else {"kind": s.kind, "shift": s.shift, "t_min": s.t_min, "t_max": s.t_max},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        d = dict(d)
        if d.get("schedule") is not None:
            d["schedule"] = NoiseSchedule(**d["schedule"])
        return cls(**d)


def sampler_preset(config: ModelConfig, **overrides) -> SamplerConfig:
    """Guidance 1.75 for shallow evaluations, 4.0 for grown ones."""
    w = SHALLOW_GUIDANCE if config.is_shallow else GROWN_GUIDANCE
    return SamplerConfig(**{"guidance_weight": w, **overrides})


def cfg_combine(uncond: torch.Tensor, cond: torch.Tensor, w: float) -> torch.Tensor:
    """``uncond + w (cond - uncond)``, written so that w=0 and w=1 are exact."""
    if uncond.shape != cond.shape:
        raise ValueError(f"shape mismatch: {tuple(uncond.shape)} vs {tuple(cond.shape)}")
    if w == 0:
        return uncond.clone()
    if w == 1:
        return cond.clone()
    return (1 - w) * uncond + w * cond


def guided_eps(model, z: torch.Tensor, t: torch.Tensor, cond, w: float) -> torch.Tensor:
    """Guided epsilon; a tree evaluates both branches in one doubled batch."""
    if cond is None or w == 0:
        return model(z, t, None)
    if w == 1:
        return model(z, t, cond)
    if isinstance(model, _TreeModel):
        b = z.shape[0]
        idx = torch.cat([torch.arange(b), torch.arange(b)])
        drop = torch.cat([torch.zeros(b, dtype=torch.bool), torch.ones(b, dtype=torch.bool)])
        both = model.doubled(torch.cat([z, z]), torch.cat([t, t]), take(cond, idx), drop)
        c, u = both[:b], both[b:]
    else:
        c, u = model(z, t, cond), model(z, t, None)
    return cfg_combine(u, c, w)


class _TreeModel:
    def __init__(self, params: ParameterTree, schedule: NoiseSchedule):
        self.params = params
        self.cfg = params.config
        self.schedule = schedule

    def __call__(self, z, t, cond):
        return predict_eps(self.params, z, t, cond, None, self.schedule, self.cfg)

    def doubled(self, z, t, cond, drop):
        return predict_eps(self.params, z, t, cond, drop, self.schedule, self.cfg)


def _as_model(params, schedule: NoiseSchedule):
    if isinstance(params, ParameterTree):
        return _TreeModel(params, schedule)
    return params


def ddpm_step(
    params,
    z_t: torch.Tensor,
    t_now: float,
    t_next: float,
    cond,
    w: float,
    rng: torch.Generator,
    schedule: NoiseSchedule,
    final: Optional[bool] = None,
) -> torch.Tensor:
    """One ancestral update from ``t_now`` to ``t_next``.

    The final step (``t_next <= schedule.t_min`` unless ``final`` says
    otherwise) returns the x0 estimate with no added noise.
    """
    model = _as_model(params, schedule)
    b = z_t.shape[0]
    eps = guided_eps(model, z_t, torch.full((b,), float(t_now), dtype=torch.float64), cond, w)
    lam_t = logsnr(schedule, float(t_now))
    a_t, s_t = alpha_sigma(lam_t)
    if final is None:
        final = t_next <= schedule.t_min
    if final:
        return (z_t - s_t * eps) / a_t
    lam_s = logsnr(schedule, float(t_next))
    a_s, s_s = alpha_sigma(lam_s)
    a_ts = a_t / a_s
    # sigma_t^2 - a_ts^2 sigma_s^2 without cancellation
    var_ts = -(s_t**2) * math.expm1(lam_t - lam_s)
    mean = (z_t - (var_ts / s_t) * eps) / a_ts
    std = math.sqrt(var_ts * s_s**2 / s_t**2)
    noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    return mean + std * noise


def time_grid(steps: int, schedule: NoiseSchedule) -> list[float]:
    return np.linspace(schedule.t_max, schedule.t_min, steps + 1).tolist()


def resolve_schedule(sampler: SamplerConfig, config: Optional[ModelConfig]) -> NoiseSchedule:
    if sampler.schedule is not None:
        return sampler.schedule
    if config is None:
        return NoiseSchedule()
    return NoiseSchedule().with_shift(shift_for_resolution(config.resolution))


def sample_from(
    params,
    cond,
    sampler: SamplerConfig,
    shape: tuple[int, ...],
    schedule: Optional[NoiseSchedule] = None,
) -> torch.Tensor:
    """Run the full chain for one batch of pre-encoded conditions; output clipped to [-1, 1]."""
    if schedule is None:
        schedule = resolve_schedule(sampler, params.config if isinstance(params, ParameterTree) else None)
    model = _as_model(params, schedule)
    rng = torch.Generator().manual_seed(sampler.seed)
    z = torch.randn(shape, generator=rng)
    grid = time_grid(sampler.steps, schedule)
    with torch.no_grad():
        for i in range(sampler.steps):
            z = ddpm_step(model, z, grid[i], grid[i + 1], cond, sampler.guidance_weight, rng, schedule,
                          final=(i == sampler.steps - 1))
    return z.clamp(-1.0, 1.0)


def sample(
    params: ParameterTree,
    prompts: Union[str, Sequence[str]],
    sampler: SamplerConfig,
    encoders: Sequence[TextEncoder],
    batch_size: int = 64,
) -> torch.Tensor:
    """(N, C, H, W) images for ``prompts``; chunk ``k`` uses seed ``sampler.seed + k``."""
    if isinstance(prompts, str):
        prompts = [prompts]
    cfg = params.config
    schedule = resolve_schedule(sampler, cfg)
    out = []
    for k, lo in enumerate(range(0, len(prompts), batch_size)):
        chunk = list(prompts[lo : lo + batch_size])
        cond = encode_batch(encoders, chunk)
        shape = (len(chunk), cfg.image_channels, cfg.resolution, cfg.resolution)
        sub = SamplerConfig(sampler.steps, sampler.guidance_weight, sampler.seed + k, schedule)
        out.append(sample_from(params, cond, sub, shape, schedule))
    return torch.cat(out)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """[-1, 1] -> [0, 255] with round-half-even, as (N, H, W, C) uint8."""
    x = (images.detach().to(torch.float64).clamp(-1, 1).cpu().numpy() + 1.0) * 127.5
    return np.rint(x).clip(0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


def write_pngs(images: torch.Tensor, out_dir, prefix: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, arr in enumerate(to_uint8(images)):
        path = out_dir / f"{prefix}_{i:05d}.png"
        Image.fromarray(arr).save(path, format="PNG")
        paths.append(path)
    return paths

"""Data pipeline, epsilon-MSE objective and the freeze-mask-aware training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .architecture import forward
from .conditioning import EmbeddingSequence, TextEncoder, encode_batch, take
from .config import ModelConfig
from .errors import ConfigError, NonFiniteLossError
from .growing import MODES, FreezeMask, make_freeze_mask
from .params import ParameterTree
from .schedule import NoiseSchedule, alpha_sigma, forward_diffuse, logsnr, shift_for_resolution

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetRecord:
    image_path: str
    caption: str
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"{self.image_path}: width and height must be >= 1")


def write_records(records: Sequence[DatasetRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_records(path) -> list[DatasetRecord]:
    """JSONL manifest; relative image paths resolve against the manifest's directory."""
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        img = Path(d["image_path"])
        if not img.is_absolute():
            img = path.parent / img
        out.append(DatasetRecord(str(img), d["caption"], int(d["width"]), int(d["height"])))
    return out


def resized_size(width: int, height: int, target: int) -> tuple[int, int]:
    """Short side becomes ``target``; the long side scales and rounds half up."""
    short = min(width, height)

    def scale(side: int) -> int:
        return target if side == short else int(math.floor(side * target / short + 0.5))

    return scale(width), scale(height)


def prepare_sample(record: DatasetRecord, target: int, rng_seed: int) -> Optional[torch.Tensor]:
    """(3, target, target) float32 in [-1, 1], or None if the image cannot be read."""
    try:
        with Image.open(record.image_path) as im:
            im = im.convert("RGB")
            w, h = resized_size(im.width, im.height, target)
            im = im.resize((w, h), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        log.warning("skipping unreadable image %s: %s", record.image_path, exc)
        return None
    rng = np.random.default_rng(rng_seed)
    dx = int(rng.integers(0, w - target + 1))
    dy = int(rng.integers(0, h - target + 1))
    crop = arr[dy : dy + target, dx : dx + target]
    return torch.from_numpy(np.ascontiguousarray(crop.transpose(2, 0, 1)) / 127.5 - 1.0)


def filter_by_resolution(records: Sequence[DatasetRecord], min_side: int) -> list[DatasetRecord]:
    kept = [r for r in records if min(r.width, r.height) >= min_side]
    frac = len(kept) / len(records) if records else 1.0
    log.info("resolution filter >= %d: retained %d/%d records (%.1f%%)", min_side, len(kept), len(records), 100 * frac)
    return kept


@dataclass
class TrainingData:
    """Decoded images and per-encoder caption embeddings, cached in memory."""

    images: torch.Tensor
    conditions: list[EmbeddingSequence]
    captions: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, index: torch.Tensor) -> tuple[torch.Tensor, list[EmbeddingSequence]]:
        return self.images[index], take(self.conditions, index)


def load_training_data(
    records: Sequence[DatasetRecord],
    target: int,
    encoders: Sequence[TextEncoder],
    seed: int = 0,
    workers: int = 1,
) -> TrainingData:
    """Each record gets one crop seeded by ``seed + position``, so results do not depend on ``workers``."""
    jobs = [(r, target, seed + i) for i, r in enumerate(records)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            images = list(pool.map(lambda a: prepare_sample(*a), jobs))
    else:
        images = [prepare_sample(*a) for a in jobs]
    kept = [(img, r.caption) for img, r in zip(images, records) if img is not None]
    if not kept:
        raise ValueError("no readable images in the dataset")
    captions = [c for _, c in kept]
    return TrainingData(torch.stack([img for img, _ in kept]), encode_batch(encoders, captions), captions)


def schedule_for(config: ModelConfig, base: Optional[NoiseSchedule] = None) -> NoiseSchedule:
    base = base or NoiseSchedule()
    return base.with_shift(shift_for_resolution(config.resolution))


def diffusion_loss(
    params,
    batch: dict,
    t_samples: torch.Tensor,
    eps_samples: torch.Tensor,
    schedule: NoiseSchedule,
    config: Optional[ModelConfig] = None,
    drop: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared error of the network output against its target (eps, or v).

    ``batch`` holds ``images`` (B, C, H, W) and ``conditions`` (per-encoder
    sequences, or None for the null condition).
    """
    cfg = config if config is not None else params.config
    x = batch["images"]
    z = forward_diffuse(x, t_samples, eps_samples, schedule)
    out = forward(params, z, t_samples, batch.get("conditions"), drop, cfg)
    target = eps_samples
    if cfg.prediction == "v":
        a, s = alpha_sigma(logsnr(schedule, t_samples.to(torch.float64)))
        a = a.to(x.dtype)[:, None, None, None]
        s = s.to(x.dtype)[:, None, None, None]
        target = a * eps_samples - s * x
    return ((out - target) ** 2).mean()


@dataclass
class TrainConfig:
    batch_size: int = 256
    total_steps: int = 1000
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    p_drop: float = 0.1
    mode: str = "scratch"
    defrost_step: Optional[int] = None
    target_resolution: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    ema_decay: Optional[float] = None

    def problems(self) -> list[str]:
        out = []
        if self.batch_size < 1:
            out.append("train.batch_size must be >= 1")
        if self.total_steps < 1:
            out.append("train.total_steps must be >= 1")
        if not self.learning_rate > 0:
            out.append("train.learning_rate must be > 0")
        if not 0.0 <= self.p_drop <= 1.0:
            out.append("train.p_drop must lie in [0, 1]")
        if self.mode not in MODES:
            out.append(f"train.mode must be one of {', '.join(MODES)}")
        if self.mode == "freeze_unfreeze" and self.defrost_step is None:
            out.append("train.defrost_step is required for freeze_unfreeze")
        if self.checkpoint_every < 0:
            out.append("train.checkpoint_every must be >= 0")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            out.append("train.ema_decay must lie in (0, 1)")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainResult:
    params: ParameterTree
    losses: list[float]
    checkpoints: list[Path] = field(default_factory=list)
    ema: Optional[ParameterTree] = None


# (tensors, generator, step) -> scalar loss
Objective = Callable[[dict, torch.Generator, int], torch.Tensor]


def diffusion_objective(
    cfg: ModelConfig, data: TrainingData, tc: TrainConfig, schedule: NoiseSchedule
) -> Objective:
    def objective(tensors: dict, gen: torch.Generator, step: int) -> torch.Tensor:
        b = tc.batch_size
        idx = torch.randint(len(data), (b,), generator=gen)
        images, cond = data.batch(idx)
        t = schedule.t_min + (schedule.t_max - schedule.t_min) * torch.rand(b, generator=gen, dtype=torch.float64)
        eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
        drop = torch.rand(b, generator=gen, dtype=torch.float64) < tc.p_drop
        return diffusion_loss(tensors, {"images": images, "conditions": cond}, t, eps, schedule, cfg, drop)

    return objective


def _grad_norm(tensors: Sequence[torch.Tensor]) -> float:
    grads = [p.grad for p in tensors if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))


def train(
    params: ParameterTree,
    mask_source: Optional[Callable[[int], FreezeMask]],
    data: Optional[TrainingData],
    config: TrainConfig,
    out_dir=None,
    schedule: Optional[NoiseSchedule] = None,
    objective: Optional[Objective] = None,
) -> TrainResult:
    """Run ``config.total_steps`` AdamW steps on every tensor outside the current freeze mask.

    Frozen tensors never enter the optimizer, so they come out bitwise
    identical. ``mask_source(step)`` defaults to the mask for
    ``config.mode``; when it shrinks (defrost), the newly released tensors are
    added as a fresh parameter group. The loss log and checkpoints go to
    ``out_dir`` when given.
    """
    config.validate()
    cfg = params.config
    if mask_source is None:
        mask_source = lambda step: make_freeze_mask(config.mode, step, config.defrost_step)  # noqa: E731
    schedule = schedule or schedule_for(cfg)
    if objective is None:
        if data is None:
            raise ValueError("train needs data or an explicit objective")
        objective = diffusion_objective(cfg, data, config, schedule)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start = int(params.metadata.get("step", 0))
    tensors = {n: v.detach().clone() for n, v in params.entries.items()}
    frozen = mask_source(start).resolve(tensors)
    active = [n for n in tensors if n not in frozen]
    for n in active:
        tensors[n].requires_grad_(True)
    opt = torch.optim.AdamW(
        [tensors[n] for n in active],
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        foreach=True,
    )
    ema = {n: v.detach().clone() for n, v in tensors.items()} if config.ema_decay else None

    gen = torch.Generator().manual_seed(config.seed)
    losses: list[float] = []
    checkpoints: list[Path] = []
    rows = []

    def snapshot(step: int, entries: dict) -> ParameterTree:
        meta = dict(params.metadata, step=step, train_mode=config.mode, schedule_shift=schedule.shift)
        return ParameterTree({n: v.detach().clone() for n, v in entries.items()}, meta, frozenset(frozen))

    for step in range(start, start + config.total_steps):
        now_frozen = mask_source(step).resolve(tensors)
        released = [n for n in tensors if n in frozen and n not in now_frozen]
        if released:
            for n in released:
                tensors[n].requires_grad_(True)
            opt.add_param_group({"params": [tensors[n] for n in released]})
            active.extend(released)
            frozen = now_frozen
            log.info("step %d: released %d frozen tensors", step, len(released))

        opt.zero_grad(set_to_none=True)
        loss = objective(tensors, gen, step)
        value = float(loss.detach())
        if not math.isfinite(value):
            dump = None
            if out_dir is not None:
                dump = snapshot(step, tensors).save(out_dir / f"nonfinite_step{step}.ggpt")
            raise NonFiniteLossError(step, value, dump)
        loss.backward()
        gnorm = _grad_norm([tensors[n] for n in active])
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for n, v in tensors.items():
                    ema[n].mul_(config.ema_decay).add_(v.detach(), alpha=1 - config.ema_decay)

        losses.append(value)
        rows.append((step + 1, value, gnorm, opt.param_groups[0]["lr"]))
        done = step + 1
        if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            checkpoints.append(snapshot(done, tensors).save(out_dir / f"step{done:07d}.ggpt"))

    final = snapshot(start + config.total_steps, tensors)
    ema_tree = snapshot(start + config.total_steps, ema) if ema is not None else None
    if out_dir is not None:
        write_loss_log(rows, out_dir / "loss_log.csv")
        checkpoints.append(final.save(out_dir / "final.ggpt"))
        if ema_tree is not None:
            checkpoints.append(ema_tree.save(out_dir / "final_ema.ggpt"))
    return TrainResult(final, losses, checkpoints, ema_tree)


def write_loss_log(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "grad_norm", "learning_rate"])
        for step, loss, gnorm, lr in rows:
            w.writerow([step, repr(loss), repr(gnorm), repr(lr)])
    return path


def read_loss_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"step": int(r["step"]), "loss": float(r["loss"]), "grad_norm": float(r["grad_norm"]),
             "learning_rate": float(r["learning_rate"])}
            for r in csv.DictReader(fh)
        ]

"""End-to-end toy experiments: frozen-vs-scratch growing ablation and the guidance sweep."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .architecture import build_shallow, build_uvit
from .conditioning import build_encoders, encode_batch
from .config import preset
from .growing import GrowPlan, transplant
from .metrics import (
    MetricReport,
    RandomProjectionExtractor,
    ToyAligner,
    frechet_distance,
    guidance_sweep,
    pooled_text_features,
)
from .params import ParameterTree
from .sampling import GROWN_GUIDANCE, SamplerConfig, sample
from .toydata import DEFAULT_MIXTURE, make_toy_data
from .training import TrainConfig, filter_by_resolution, load_training_data, read_records, train

log = logging.getLogger(__name__)

SWEEP_WEIGHTS = (1.0, 1.75, 2.0, 4.0, 8.0, 16.0)


@dataclass
class AblationConfig:
    seed: int = 0
    n_train: int = 2000
    n_heldout: int = 256
    core_steps: int = 2000
    grown_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    sampler_steps: int = 32
    guidance_weight: float = GROWN_GUIDANCE
    core_resolution: int = 32
    grown_resolution: int = 64


@dataclass
class AblationResult:
    frechet_frozen: float
    frechet_scratch: float
    seconds: dict = field(default_factory=dict)
    retained_fraction: float = 1.0
    workdir: str = ""

    @property
    def frozen_not_worse(self) -> bool:
        return self.frechet_frozen <= self.frechet_scratch


def heldout_reference(manifest, resolution: int, encoders, extractor, seed: int):
    """Real held-out images as extractor features, plus their captions and caption features."""
    data = load_training_data(read_records(manifest), resolution, encoders, seed=seed)
    return extractor(data.images), data.captions, pooled_text_features(data.conditions), data


def run_ablation(cfg: AblationConfig, workdir) -> AblationResult:
    """Phase 1 on mixed-resolution data, then frozen vs scratch Phase 2; Fréchet distance of each."""
    workdir = Path(workdir)
    timings = {}
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)

    train_manifest = make_toy_data(cfg.n_train, workdir / "train", seed=cfg.seed, mixture=DEFAULT_MIXTURE)
    held_manifest = make_toy_data(
        cfg.n_heldout, workdir / "heldout", seed=cfg.seed + 100_000, resolution=cfg.grown_resolution
    )
    shallow_cfg = preset("toy")
    grown_cfg = preset("toy", grown=True)
    encoders = build_encoders(shallow_cfg.text_encoders, workdir / "train" / "vocab.txt", seed=cfg.seed)
    records = read_records(train_manifest)
    timings["data"] = time.perf_counter() - t0

    def train_cfg(mode: str, steps: int, res: int) -> TrainConfig:
        return TrainConfig(
            batch_size=cfg.batch_size,
            total_steps=steps,
            learning_rate=cfg.learning_rate,
            mode=mode,
            target_resolution=res,
            seed=cfg.seed,
        )

    t = time.perf_counter()
    core_data = load_training_data(records, cfg.core_resolution, encoders, seed=cfg.seed)
    donor = train(
        build_shallow(shallow_cfg, cfg.seed), None, core_data, train_cfg("scratch", cfg.core_steps, cfg.core_resolution),
        workdir / "core",
    ).params
    timings["phase1"] = time.perf_counter() - t

    kept = filter_by_resolution(records, cfg.grown_resolution)
    grown_data = load_training_data(kept, cfg.grown_resolution, encoders, seed=cfg.seed)
    plan = GrowPlan(workdir / "core" / "final.ggpt", grown_cfg, "frozen", None, cfg.seed + 1)

    t = time.perf_counter()
    frozen = train(transplant(plan, donor), None, grown_data, train_cfg("frozen", cfg.grown_steps, cfg.grown_resolution),
                   workdir / "frozen").params
    timings["phase2_frozen"] = time.perf_counter() - t
    t = time.perf_counter()
    scratch = train(build_uvit(grown_cfg, cfg.seed + 1), None, grown_data,
                    train_cfg("scratch", cfg.grown_steps, cfg.grown_resolution), workdir / "scratch").params
    timings["phase2_scratch"] = time.perf_counter() - t

    t = time.perf_counter()
    extractor = RandomProjectionExtractor(seed=cfg.seed)
    ref, captions, _, _ = heldout_reference(held_manifest, cfg.grown_resolution, encoders, extractor, cfg.seed)
    sampler = SamplerConfig(cfg.sampler_steps, cfg.guidance_weight, cfg.seed)
    fd = {}
    for name, tree in (("frozen", frozen), ("scratch", scratch)):
        fd[name] = frechet_distance(extractor(sample(tree, captions, sampler, encoders, batch_size=128)), ref)
    timings["eval"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0

    result = AblationResult(fd["frozen"], fd["scratch"], timings, len(kept) / len(records), str(workdir))
    (workdir / "ablation.json").write_text(
        json.dumps({"config": asdict(cfg), **asdict(result), "frozen_not_worse": result.frozen_not_worse}, indent=2)
    )
    return result


@dataclass
class SweepConfig:
    weights: Sequence[float] = SWEEP_WEIGHTS
    n_prompts: int = 64
    sampler_steps: int = 32
    seed: int = 0


def run_sweep(
    params: ParameterTree,
    encoders,
    reference_manifest,
    fit_manifest,
    cfg: SweepConfig,
    out_dir=None,
) -> MetricReport:
    """Guidance sweep of ``params`` against held-out real images; alignment via a ridge fit on ``fit_manifest``."""
    res = params.config.resolution
    extractor = RandomProjectionExtractor(seed=cfg.seed)
    ref, captions, text_feats, _ = heldout_reference(reference_manifest, res, encoders, extractor, cfg.seed)
    fit = load_training_data(read_records(fit_manifest), res, encoders, seed=cfg.seed)
    aligner = ToyAligner().fit(extractor(fit.images), pooled_text_features(fit.conditions))
    prompts = captions[: cfg.n_prompts]

    def generate(batch_prompts, w):
        return sample(params, batch_prompts, SamplerConfig(cfg.sampler_steps, w, cfg.seed), encoders, batch_size=128)

    report = guidance_sweep(generate, prompts, list(cfg.weights), extractor, ref, text_feats[: len(prompts)], aligner)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.save(out_dir / "sweep.csv")
        report.plot(out_dir / "sweep.png")
    return report

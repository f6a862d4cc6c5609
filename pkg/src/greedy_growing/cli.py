"""Command-line entry point and the per-run JSON config."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .architecture import build_shallow, count_params
from .conditioning import build_encoders
from .config import PRESET_NAMES, ModelConfig, preset
from .errors import ConfigError
from .growing import GrowPlan, default_defrost_step, transplant
from .metrics import MetricReport
from .params import load_tree
from .sampling import SamplerConfig, sample, sampler_preset, write_pngs
from .schedule import NoiseSchedule, shift_for_resolution
from .toydata import DEFAULT_MIXTURE, make_toy_data
from .training import TrainConfig, filter_by_resolution, load_training_data, read_records, train

OUTPUT_ENV = "GREEDY_GROWING_OUTPUT"
log = logging.getLogger("greedy_growing")


@dataclass
class RunConfig:
    """Everything one training run needs, including every seed."""

    model: ModelConfig
    train: TrainConfig
    schedule: NoiseSchedule
    sampler: SamplerConfig
    data: str = ""
    output_dir: str = ""
    vocab: str = ""
    encoder_seed: int = 0
    workers: int = 1
    log_base: float = math.e
    extractor_seed: int = 0
    sweep_weights: list = field(default_factory=lambda: [1.0, 1.75, 2.0, 4.0, 8.0, 16.0])

    def problems(self) -> list[str]:
        out = self.model.problems() + self.train.problems()
        res = self.model.resolution
        if self.train.target_resolution != res:
            out.append(f"train.target_resolution {self.train.target_resolution} != model resolution {res}")
        if self.log_base <= 0 or self.log_base == 1:
            out.append("log_base must be positive and != 1")
        elif res > 0:
            want = shift_for_resolution(res, log_base=self.log_base)
            if abs(self.schedule.shift - want) > 1e-12:
                out.append(f"schedule.shift {self.schedule.shift} != derived shift {want} for resolution {res}")
        if self.sampler.schedule is not None and self.sampler.schedule != self.schedule:
            out.append("sampler.schedule must be unset or equal to schedule")
        for e in self.model.text_encoders:
            if not e.name.startswith(("lookup", "trigram")):
                out.append(f"text encoder {e.name!r} has no shipped implementation (use lookup*/trigram*)")
        if self.workers < 1:
            out.append("workers must be >= 1")
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "schedule": asdict(self.schedule),
            "sampler": self.sampler.to_dict(),
            "data": self.data,
            "output_dir": self.output_dir,
            "vocab": self.vocab,
            "encoder_seed": self.encoder_seed,
            "workers": self.workers,
            "log_base": self.log_base,
            "extractor_seed": self.extractor_seed,
            "sweep_weights": list(self.sweep_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["train"] = TrainConfig.from_dict(d["train"])
        d["schedule"] = NoiseSchedule(**d["schedule"])
        d["sampler"] = SamplerConfig.from_dict(d["sampler"])
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_run_config(name: str = "toy", phase: str = "core", output_dir: str = "", data: str = "") -> RunConfig:
    """Run config for one phase of a preset; the toy preset uses desk-sized training settings."""
    if phase not in ("core", "grown"):
        raise ConfigError(f"phase must be 'core' or 'grown', got {phase!r}")
    model = preset(name, grown=(phase == "grown"))
    if name == "toy":
        train_cfg = TrainConfig(batch_size=32, total_steps=2000, learning_rate=1e-3,
                                mode="scratch" if phase == "core" else "frozen")
    else:
        train_cfg = TrainConfig(batch_size=256, total_steps=2_000_000, mode="scratch" if phase == "core" else "frozen")
    train_cfg = replace(train_cfg, target_resolution=model.resolution)
    vocab = str(Path(data).parent / "vocab.txt") if data else ""
    return RunConfig(
        model=model,
        train=train_cfg,
        schedule=NoiseSchedule(shift=shift_for_resolution(model.resolution)),
        sampler=sampler_preset(model, steps=32 if name == "toy" else 256),
        data=data,
        output_dir=output_dir,
        vocab=vocab,
    )


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _output_root(args) -> Path:
    root = args.output_dir or os.environ.get(OUTPUT_ENV) or "runs"
    return Path(root)


def _load_run(args, need: bool = True) -> Optional[RunConfig]:
    if not args.config:
        if need:
            raise ConfigError("--config is required for this command")
        return None
    run = RunConfig.load(args.config)
    if args.seed is not None:
        run.train = replace(run.train, seed=args.seed)
        run.sampler = replace(run.sampler, seed=args.seed)
    if args.output_dir:
        run.output_dir = args.output_dir
    if args.workers is not None:
        run.workers = args.workers
    return run.validate()


def _encoders_for(tree, run: Optional[RunConfig] = None):
    info = tree.metadata.get("text_encoders") or {}
    vocab = info.get("vocab") or (run.vocab if run else "")
    seed = info.get("seed", run.encoder_seed if run else 0)
    return build_encoders(tree.config.text_encoders, vocab or None, seed)


def _run_dir(run: RunConfig, args, sub: str) -> Path:
    base = Path(run.output_dir) if run.output_dir else _output_root(args)
    return base / sub


# ---------------------------------------------------------------- commands


def cmd_make_toy_data(args) -> dict:
    out = Path(args.out) if args.out else _output_root(args) / "data"
    mixture = DEFAULT_MIXTURE if args.mixed else None
    manifest = make_toy_data(args.n, out, seed=args.seed or 0, resolution=args.resolution, mixture=mixture)
    return {"manifest": str(manifest), "records": args.n, "vocab": str(out / "vocab.txt")}


def _train_phase(run: RunConfig, args, tree, sub: str) -> dict:
    records = read_records(run.data)
    if not run.model.is_shallow:
        records = filter_by_resolution(records, run.model.resolution)
    encoders = build_encoders(run.model.text_encoders, run.vocab or None, run.encoder_seed)
    data = load_training_data(records, run.model.resolution, encoders, run.train.seed, run.workers)
    tree.metadata["text_encoders"] = {"vocab": str(Path(run.vocab).resolve()) if run.vocab else "", "seed": run.encoder_seed}
    tree.metadata["run"] = run.to_dict()
    out = _run_dir(run, args, sub)
    result = train(tree, None, data, run.train, out, run.schedule)
    return {"checkpoint": str(out / "final.ggpt"), "loss_log": str(out / "loss_log.csv"),
            "final_loss": result.losses[-1], "records": len(data)}


def cmd_train_core(args) -> dict:
    run = _load_run(args)
    if not run.model.is_shallow:
        raise ConfigError("train-core needs a shallow model config")
    return _train_phase(run, args, build_shallow(run.model, run.train.seed), "core")


def cmd_grow(args) -> dict:
    run = _load_run(args)
    if run.model.is_shallow:
        raise ConfigError("grow needs a grown model config")
    defrost = run.train.defrost_step
    if run.train.mode == "freeze_unfreeze" and defrost is None:
        defrost = default_defrost_step(run.train.total_steps)
    plan = GrowPlan(Path(args.donor), run.model, run.train.mode, defrost, run.train.seed)
    tree = transplant(plan)
    donor_meta = load_tree(args.donor).metadata
    tree.metadata["text_encoders"] = donor_meta.get("text_encoders", {})
    out = Path(args.out) if args.out else _run_dir(run, args, "grown") / "transplanted.ggpt"
    tree.save(out)
    return {"checkpoint": str(out), "frozen_tensors": len(tree.frozen), "schedule_shift": tree.metadata["schedule_shift"]}


def cmd_train_grown(args) -> dict:
    run = _load_run(args)
    tree = load_tree(args.checkpoint)
    if tree.metadata.get("core_fingerprint") != run.model.core_fingerprint() or tree.config != run.model:
        raise ConfigError("checkpoint config does not match the run config")
    if run.train.mode == "freeze_unfreeze" and run.train.defrost_step is None:
        run.train = replace(run.train, defrost_step=tree.metadata.get("defrost_step")
                            or default_defrost_step(run.train.total_steps))
    return _train_phase(run, args, tree, "grown")


def _prompts(args) -> list[str]:
    if args.prompts_file:
        return [p for p in Path(args.prompts_file).read_text(encoding="utf-8").splitlines() if p.strip()]
    if not args.prompt:
        raise ConfigError("give --prompt (repeatable) or --prompts-file")
    return list(args.prompt)


def _sampler(args, run: Optional[RunConfig], tree) -> SamplerConfig:
    s = run.sampler if run else sampler_preset(tree.config, steps=32)
    if args.guidance is not None:
        s = replace(s, guidance_weight=args.guidance)
    if args.steps is not None:
        s = replace(s, steps=args.steps)
    if args.seed is not None:
        s = replace(s, seed=args.seed)
    return s


def cmd_sample(args) -> dict:
    run = _load_run(args, need=False)
    tree = load_tree(args.checkpoint)
    prompts = _prompts(args)
    images = sample(tree, prompts, _sampler(args, run, tree), _encoders_for(tree, run))
    out = Path(args.out) if args.out else _output_root(args) / "samples"
    paths = write_pngs(images, out)
    (out / "prompts.txt").write_text("".join(p + "\n" for p in prompts), encoding="utf-8")
    return {"images": [str(p) for p in paths]}


def _evaluate(args, weights: Optional[Sequence[float]]) -> MetricReport:
    from .experiments import SweepConfig, run_sweep

    run = _load_run(args, need=False)
    tree = load_tree(args.checkpoint)
    encoders = _encoders_for(tree, run)
    sampler = _sampler(args, run, tree)
    if weights is None:
        weights = [sampler.guidance_weight]
    cfg = SweepConfig(list(weights), args.num_samples, sampler.steps, sampler.seed)
    fit = args.fit_manifest or args.manifest
    out = Path(args.out) if args.out else _output_root(args) / ("sweep" if len(weights) > 1 else "eval")
    return run_sweep(tree, encoders, args.manifest, fit, cfg, out)


def cmd_eval(args) -> dict:
    report = _evaluate(args, None)
    return {"rows": [vars(r) for r in report.rows], "warnings": report.warnings}


def cmd_sweep(args) -> dict:
    weights = [float(w) for w in args.weights.split(",")] if args.weights else None
    if weights is None:
        run = _load_run(args, need=False)
        weights = run.sweep_weights if run else [1.0, 1.75, 2.0, 4.0, 8.0, 16.0]
    report = _evaluate(args, weights)
    return {
        "rows": [vars(r) for r in report.rows],
        "recommended_range": list(report.recommended_range),
        "warnings": report.warnings,
    }


def cmd_count_params(args) -> dict:
    if args.preset:
        cfg = preset(args.preset, grown=args.grown)
    else:
        run = _load_run(args, need=False)
        if run is None:
            raise ConfigError("give --preset or --config")
        cfg = run.model
    t0 = time.perf_counter()
    n = count_params(cfg, args.mode)
    return {"count": n, "millions": round(n / 1e6, 1), "mode": args.mode, "seconds": time.perf_counter() - t0}


def cmd_init_config(args) -> dict:
    out = Path(args.out)
    run = default_run_config(args.preset, args.phase, str(_output_root(args)), args.data or "")
    if args.seed is not None:
        run.train = replace(run.train, seed=args.seed)
        run.sampler = replace(run.sampler, seed=args.seed)
    run.save(out)
    return {"config": str(out), "problems": run.problems()}


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=default, help="run config JSON")
        g.add_argument("--seed", type=int, default=default)
        g.add_argument("--output-dir", default=default, help=f"default: ${OUTPUT_ENV} or ./runs")
        g.add_argument("--workers", type=int, default=default, help="data-loading threads")
        g.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return g

    # global flags work before or after the verb; SUPPRESS keeps the verb's copy from clobbering them
    common = global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="greedy-growing", parents=[global_flags(None)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy-data", parents=[common])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--mixed", action="store_true", help="draw sizes from the mixed-resolution mixture")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_make_toy_data)

    s = sub.add_parser("init-config", parents=[common])
    s.add_argument("--preset", choices=PRESET_NAMES, default="toy")
    s.add_argument("--phase", choices=("core", "grown"), default="core")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_init_config)

    s = sub.add_parser("train-core", parents=[common])
    s.set_defaults(fn=cmd_train_core)

    s = sub.add_parser("grow", parents=[common])
    s.add_argument("--donor", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_grow)

    s = sub.add_parser("train-grown", parents=[common])
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(fn=cmd_train_grown)

    for name, fn in (("sample", cmd_sample), ("eval", cmd_eval), ("sweep", cmd_sweep)):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--guidance", type=float)
        s.add_argument("--steps", type=int)
        s.add_argument("--out")
        if name == "sample":
            s.add_argument("--prompt", action="append")
            s.add_argument("--prompts-file")
        else:
            s.add_argument("--manifest", required=True, help="held-out reference images and prompts")
            s.add_argument("--fit-manifest", help="pairs for the alignment fit (default: --manifest)")
            s.add_argument("--num-samples", type=int, default=64)
        if name == "sweep":
            s.add_argument("--weights", help="comma-separated guidance weights")
        s.set_defaults(fn=fn)

    s = sub.add_parser("count-params", parents=[common])
    s.add_argument("--preset", choices=PRESET_NAMES)
    s.add_argument("--grown", action="store_true")
    s.add_argument("--mode", choices=("total", "trainable", "frozen"), default="total")
    s.set_defaults(fn=cmd_count_params)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        _emit(args.fn(args))
        return 0
    except ConfigError as exc:
        print(json.dumps({"error": "config", "problems": exc.problems}), file=sys.stderr)
        return 2
    except Exception as exc:  # every failure leaves a machine-readable trace
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

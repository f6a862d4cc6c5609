"""Phase-2 surgery: transplant the pretrained core into a grown UViT, and freeze masks."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .architecture import build_uvit
from .config import ModelConfig
from .errors import ConfigError, CorruptCheckpointError, IncompatibleDonorError
from .params import CORE_COMPONENT_GROUPS, ParameterTree, group_of, load_tree
from .schedule import shift_for_resolution

MODES = ("scratch", "finetune", "frozen", "freeze_unfreeze")
FROZEN_PATTERNS = ("text_enc.*", "core.*")


@dataclass(frozen=True)
class FreezeMask:
    """Patterns of parameter paths that receive no updates at a given step."""

    frozen_names: frozenset[str]
    mode: str
    defrost_step: Optional[int] = None

    def is_frozen(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, pat) for pat in self.frozen_names)

    def resolve(self, names) -> set[str]:
        return {n for n in names if self.is_frozen(n)}


def make_freeze_mask(mode: str, step: int = 0, defrost_step: Optional[int] = None) -> FreezeMask:
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}; choose from {', '.join(MODES)}")
    if mode == "freeze_unfreeze" and defrost_step is None:
        raise ConfigError("freeze_unfreeze mode needs a defrost_step")
    frozen: frozenset[str] = frozenset()
    if mode == "frozen" or (mode == "freeze_unfreeze" and step < defrost_step):
        frozen = frozenset(FROZEN_PATTERNS)
    return FreezeMask(frozen, mode, defrost_step if mode == "freeze_unfreeze" else None)


def default_defrost_step(total_steps: int) -> int:
    """Quarter of the run, the 500k-of-2M warmup ratio scaled down."""
    return max(1, total_steps // 4)


@dataclass(frozen=True)
class GrowPlan:
    donor: Path
    target_config: ModelConfig
    mode: str = "frozen"
    defrost_step: Optional[int] = None
    seed: int = 0


def transplant(plan: GrowPlan, donor: Optional[ParameterTree] = None) -> ParameterTree:
    """Grown tree whose text/core/time groups are bitwise copies of the donor's.

    Everything else comes fresh from ``build_uvit(target_config, seed)``; the
    donor's entry, shallow encoder/decoder and output head are dropped.
    """
    target = plan.target_config
    if target.is_shallow:
        raise ConfigError("transplant target must be a grown (encdec) config")
    mask = make_freeze_mask(plan.mode, 0, plan.defrost_step)
    if donor is None:
        donor = load_tree(plan.donor)
    donor_fp = donor.metadata.get("core_fingerprint")
    if donor_fp != target.core_fingerprint():
        raise IncompatibleDonorError(
            f"donor core fingerprint {donor_fp} does not match target {target.core_fingerprint()}"
        )
    grown = build_uvit(target, plan.seed)
    for name in grown.names():
        if group_of(name) not in CORE_COMPONENT_GROUPS:
            continue
        if name not in donor:
            raise CorruptCheckpointError(f"donor is missing parameter {name}")
        src = donor[name]
        if tuple(src.shape) != tuple(grown[name].shape):
            raise CorruptCheckpointError(f"donor parameter {name} has shape {tuple(src.shape)}")
        grown.entries[name] = src.detach().clone()
    grown.metadata.update(
        {
            "phase": "grown",
            "donor_fingerprint": donor.metadata.get("config_fingerprint"),
            "donor_core_fingerprint": donor_fp,
            "mode": plan.mode,
            "defrost_step": plan.defrost_step,
            "transplant_seed": plan.seed,
            "schedule_shift": shift_for_resolution(target.resolution),
            "step": 0,
        }
    )
    grown.frozen = frozenset(mask.resolve(grown.names()))
    return grown

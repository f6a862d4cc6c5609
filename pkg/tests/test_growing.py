import pytest
import torch

from greedy_growing.architecture import apply_core, build_shallow, build_uvit, context, time_embedding
from greedy_growing.config import CoreConfig
from greedy_growing.errors import ConfigError, CorruptCheckpointError, IncompatibleDonorError
from greedy_growing.growing import GrowPlan, default_defrost_step, make_freeze_mask, transplant
from greedy_growing.schedule import shift_for_resolution

from conftest import random_cond, randomize, tiny_config, tiny_grown

CORE = ("text_enc", "core", "time_enc")


@pytest.fixture
def donor_path(tmp_path):
    donor = randomize(build_shallow(tiny_config(), 0), seed=11)
    return donor.save(tmp_path / "donor.ggpt"), donor


def test_mask_modes():
    names = ["text_enc.a.b.c", "core.block0.attn_q.weight", "time_enc.mlp.fc1.weight", "encoder.l.r.w"]
    assert make_freeze_mask("scratch", 10).resolve(names) == set()
    assert make_freeze_mask("finetune", 10).resolve(names) == set()
    frozen = make_freeze_mask("frozen", 10**9).resolve(names)
    assert frozen == {"text_enc.a.b.c", "core.block0.attn_q.weight"}
    assert "time_enc.mlp.fc1.weight" not in frozen


def test_defrost_boundary():
    names = ["core.block0.attn_q.weight", "time_enc.mlp.fc1.weight"]
    before = make_freeze_mask("freeze_unfreeze", 499_999, defrost_step=500_000)
    after = make_freeze_mask("freeze_unfreeze", 500_000, defrost_step=500_000)
    assert before.resolve(names) == {"core.block0.attn_q.weight"}
    assert after.resolve(names) == set()
    assert before.defrost_step == 500_000
    assert make_freeze_mask("frozen").defrost_step is None


def test_mask_errors():
    with pytest.raises(ConfigError):
        make_freeze_mask("freeze_unfreeze", 0)
    with pytest.raises(ConfigError):
        make_freeze_mask("melt", 0)


def test_default_defrost_quarter():
    assert default_defrost_step(2_000_000) == 500_000
    assert default_defrost_step(2) == 1


def test_transplant_copies_core_bitwise(donor_path):
    path, donor = donor_path
    grown = transplant(GrowPlan(path, tiny_grown(), "frozen", None, 4))
    ref = build_uvit(tiny_grown(), 4)
    assert grown.names() == ref.names()
    assert grown.shapes() == ref.shapes()
    for n in grown.names():
        if n.split(".")[0] in CORE:
            assert torch.equal(grown[n], donor[n]), n
        else:
            assert torch.equal(grown[n], ref[n]), n
    groups = {n.split(".")[0] for n in grown.names()}
    assert not groups & {"shallow_encoder", "shallow_decoder"}


def test_transplant_metadata_and_frozen_flags(donor_path):
    path, donor = donor_path
    grown = transplant(GrowPlan(path, tiny_grown(), "freeze_unfreeze", 40, 4))
    meta = grown.metadata
    assert meta["donor_fingerprint"] == donor.metadata["config_fingerprint"]
    assert meta["mode"] == "freeze_unfreeze" and meta["defrost_step"] == 40 and meta["transplant_seed"] == 4
    assert meta["schedule_shift"] == shift_for_resolution(32)
    assert grown.frozen == {n for n in grown.names() if n.split(".")[0] in ("text_enc", "core")}


def test_transplant_deterministic_and_idempotent(donor_path, tmp_path):
    path, _ = donor_path
    plan = GrowPlan(path, tiny_grown(), "frozen", None, 2)
    a, b = transplant(plan), transplant(plan)
    assert all(torch.equal(a[n], b[n]) for n in a.names())
    a.save(tmp_path / "a.ggpt")
    assert (tmp_path / "a.ggpt").read_bytes() == b.save(tmp_path / "b.ggpt").read_bytes()


def test_core_features_preserved(donor_path):
    path, donor = donor_path
    grown = transplant(GrowPlan(path, tiny_grown(), "frozen", None, 9))
    cfg_s, cfg_g = donor.config, grown.config
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 8, 4, 4, generator=g) * 3
    t = torch.rand(3, generator=g)
    cond = random_cond(cfg_s, 3, seed=5)

    def core_out(tree, cfg):
        p = tree.entries
        return apply_core(p, cfg, x, time_embedding(p, cfg, t), context(p, cfg, cond, None, 3))

    assert (core_out(donor, cfg_s) - core_out(grown, cfg_g)).abs().max() <= 1e-6


def test_incompatible_donor(donor_path):
    path, _ = donor_path
    other = tiny_config(core=CoreConfig(1, 8, 24, 2, grid=4, text_dim=8)).grown(tiny_grown().encdec)
    with pytest.raises(IncompatibleDonorError):
        transplant(GrowPlan(path, other, "frozen", None, 0))


def test_missing_donor_tensor(donor_path, tmp_path):
    _, donor = donor_path
    del donor.entries["core.block0.attn_q.weight"]
    with pytest.raises(CorruptCheckpointError):
        transplant(GrowPlan(donor.save(tmp_path / "broken.ggpt"), tiny_grown(), "frozen", None, 0))


def test_transplant_rejects_shallow_target(donor_path):
    path, _ = donor_path
    with pytest.raises(ConfigError):
        transplant(GrowPlan(path, tiny_config(), "frozen", None, 0))

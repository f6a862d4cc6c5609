import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from greedy_growing.architecture import build, predict_eps
from greedy_growing.conditioning import LookupEncoder, TrigramEncoder
from greedy_growing.sampling import (
    GROWN_GUIDANCE,
    SHALLOW_GUIDANCE,
    SamplerConfig,
    cfg_combine,
    ddpm_step,
    sample,
    sample_from,
    sampler_preset,
    time_grid,
    to_uint8,
    write_pngs,
)
from greedy_growing.schedule import NoiseSchedule, alpha_sigma, logsnr

from conftest import TINY_ENCODERS, random_cond, randomize, tiny_config, tiny_grown

SCHED = NoiseSchedule()


def point_mass_oracle(target: torch.Tensor, schedule=SCHED):
    """Exact eps prediction when all data sits at ``target``."""

    def model(z, t, cond):
        lam = logsnr(schedule, t.to(torch.float64))
        a = torch.sqrt(torch.sigmoid(lam)).view(-1, 1, 1, 1).to(z.dtype)
        s = torch.sqrt(torch.sigmoid(-lam)).view(-1, 1, 1, 1).to(z.dtype)
        return (z - a * target) / s

    return model


def _target(n=2, side=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(n, 3, side, side, generator=g, dtype=torch.float64) * 1.6 - 0.8)


def test_cfg_identities():
    g = torch.Generator().manual_seed(0)
    u, c = torch.randn(5, 7, generator=g), torch.randn(5, 7, generator=g)
    assert torch.equal(cfg_combine(u, c, 0.0), u)
    assert torch.equal(cfg_combine(u, c, 1.0), c)
    assert torch.allclose(cfg_combine(u, c, 4.0), u + 4.0 * (c - u), atol=1e-6)


def test_cfg_worked_example():
    u, c = torch.tensor([0.1, -0.2]), torch.tensor([0.3, 0.0])
    assert torch.allclose(cfg_combine(u, c, 4.0), torch.tensor([0.9, 0.6]), atol=1e-6)


def test_cfg_shape_mismatch():
    with pytest.raises(ValueError):
        cfg_combine(torch.zeros(2, 3), torch.zeros(3, 2), 2.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 20), st.integers(0, 1000))
def test_cfg_linear_in_weight(w, seed):
    g = torch.Generator().manual_seed(seed)
    u, c = torch.randn(4, generator=g, dtype=torch.float64), torch.randn(4, generator=g, dtype=torch.float64)
    assert torch.allclose(cfg_combine(u, c, w) - u, w * (c - u), atol=1e-9)


def test_single_step_matches_posterior():
    x0 = _target()
    t, s = 0.6, 0.45
    g = torch.Generator().manual_seed(1)
    a_t, s_t = alpha_sigma(logsnr(SCHED, t))
    z_t = a_t * x0 + s_t * torch.randn(x0.shape, generator=g, dtype=torch.float64)
    out = ddpm_step(point_mass_oracle(x0), z_t, t, s, None, 1.0, torch.Generator().manual_seed(5), SCHED)
    # Gaussian posterior q(z_s | z_t, x0) with the same noise draw
    a_s, s_s = alpha_sigma(logsnr(SCHED, s))
    a_ts = a_t / a_s
    var_ts = s_t**2 - a_ts**2 * s_s**2
    mean = (a_ts * s_s**2 / s_t**2) * z_t + (a_s * var_ts / s_t**2) * x0
    std = math.sqrt(var_ts * s_s**2 / s_t**2)
    noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    want = mean + std * noise
    assert (out - want).abs().max() / want.abs().max() <= 1e-3


def test_final_step_is_noise_free():
    x0 = _target()
    z = torch.randn(x0.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    oracle = point_mass_oracle(x0)
    a = ddpm_step(oracle, z, 0.01, SCHED.t_min, None, 1.0, torch.Generator().manual_seed(1), SCHED)
    b = ddpm_step(oracle, z, 0.01, SCHED.t_min, None, 1.0, torch.Generator().manual_seed(2), SCHED)
    assert torch.equal(a, b)
    assert torch.allclose(a, x0, atol=1e-9)


def _psnr(a, b):
    mse = float(((a - b) ** 2).mean())
    return 10 * math.log10(4.0 / mse)


@pytest.mark.parametrize("steps", [1, 8, 64])
def test_oracle_chain_recovers_target(steps):
    x0 = _target(side=16)
    out = sample_from(point_mass_oracle(x0), None, SamplerConfig(steps, 1.0, 3), x0.shape, SCHED)
    assert _psnr(out.double(), x0) > 30


def test_time_grid_endpoints():
    grid = time_grid(4, SCHED)
    assert grid[0] == SCHED.t_max and grid[-1] == SCHED.t_min and len(grid) == 5
    assert all(a > b for a, b in zip(grid, grid[1:]))


def test_one_step_chain_is_one_final_update():
    x0 = _target()
    oracle = point_mass_oracle(x0)
    out = sample_from(oracle, None, SamplerConfig(1, 1.0, 4), x0.shape, SCHED)
    rng = torch.Generator().manual_seed(4)
    z = torch.randn(x0.shape, generator=rng)
    want = ddpm_step(oracle, z, SCHED.t_max, SCHED.t_min, None, 1.0, rng, SCHED, final=True).clamp(-1, 1)
    assert torch.equal(out, want)


def _tiny_tree():
    return randomize(build(tiny_config(), 0), 8, std=0.2)


def test_fixed_seed_bitwise_and_range():
    tree = _tiny_tree()
    cond = random_cond(tiny_config(), 3, seed=1)
    cfg = SamplerConfig(steps=6, guidance_weight=2.5, seed=11)
    a = sample_from(tree, cond, cfg, (3, 3, 16, 16))
    b = sample_from(tree, cond, cfg, (3, 3, 16, 16))
    assert torch.equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    c = sample_from(tree, cond, SamplerConfig(6, 2.5, 12), (3, 3, 16, 16))
    assert not torch.equal(a, c)


def test_doubled_batch_matches_separate_passes():
    tree = _tiny_tree()
    cond = random_cond(tiny_config(), 2, seed=2)
    sched = NoiseSchedule().with_shift(2 * math.log(64 / 16))

    def separate(z, t, c):
        return predict_eps(tree, z, t, c, None, sched, tree.config)

    z = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    a = ddpm_step(tree, z, 0.5, 0.4, cond, 3.0, torch.Generator().manual_seed(1), sched)
    b = ddpm_step(separate, z, 0.5, 0.4, cond, 3.0, torch.Generator().manual_seed(1), sched)
    assert torch.allclose(a, b, atol=1e-5)


def test_prompt_sampling_chunks(tmp_path):
    tree = _tiny_tree()
    encs = [LookupEncoder(TINY_ENCODERS[0], ["one", "red", "circle"], 0), TrigramEncoder(TINY_ENCODERS[1], seed=1)]
    cfg = SamplerConfig(steps=3, guidance_weight=1.75, seed=5)
    prompts = ["one red circle", "two", "", "red red"]
    whole = sample(tree, prompts, cfg, encs, batch_size=2)
    assert whole.shape == (4, 3, 16, 16)
    first = sample(tree, prompts[:2], cfg, encs, batch_size=2)
    assert torch.equal(whole[:2], first)


def test_presets():
    assert sampler_preset(tiny_config()).guidance_weight == SHALLOW_GUIDANCE == 1.75
    assert sampler_preset(tiny_grown()).guidance_weight == GROWN_GUIDANCE == 4.0
    assert sampler_preset(tiny_grown(), steps=3).steps == 3
    assert SamplerConfig().steps == 256
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(guidance_weight=-1)
    cfg = SamplerConfig(4, 2.0, 1, NoiseSchedule(shift=0.5))
    assert SamplerConfig.from_dict(cfg.to_dict()) == cfg


def test_uint8_rounds_half_even():
    # 0.0 maps to exactly 127.5
    x = torch.tensor([-1.0, 1.0, 0.0, 2.0, -3.0], dtype=torch.float64)
    img = x.view(1, 1, 1, 5).expand(1, 3, 1, 5)
    assert to_uint8(img)[0, 0, :, 0].tolist() == [0, 255, 128, 255, 0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 510))
def test_uint8_matches_builtin_round(m):
    # m / 255 - 1 puts (x + 1) * 127.5 on or near m / 2
    x = m / 255 - 1
    img = torch.full((1, 3, 1, 1), x, dtype=torch.float64)
    assert int(to_uint8(img)[0, 0, 0, 0]) == round((x + 1.0) * 127.5)


def test_png_export_round_trip_and_stable(tmp_path):
    imgs = torch.rand(2, 3, 8, 8, generator=torch.Generator().manual_seed(0)) * 2 - 1
    paths = write_pngs(imgs, tmp_path / "a")
    assert [p.name for p in paths] == ["sample_00000.png", "sample_00001.png"]
    with Image.open(paths[1]) as im:
        assert np.array_equal(np.asarray(im), to_uint8(imgs)[1])
    again = write_pngs(imgs, tmp_path / "b")
    assert all(p.read_bytes() == q.read_bytes() for p, q in zip(paths, again))

import math
import time

import pytest
import torch
import torch.nn.functional as F
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from greedy_growing.architecture import (
    apply_core,
    build,
    build_shallow,
    build_uvit,
    context,
    count_params,
    forward,
    predict_eps,
    time_embedding,
)
from greedy_growing.config import CoreConfig, EncoderDecoderConfig, ModelConfig, preset
from greedy_growing.errors import ConfigError
from greedy_growing.schedule import NoiseSchedule, alpha_sigma, logsnr

from conftest import random_cond, randomize, tiny_config, tiny_grown


def _conv(ci, co, k=3):
    return ci * co * k * k + co


def _lin(i, o):
    return i * o + o


def _res(ci, co, mid, T):
    return 2 * ci + _conv(ci, mid) + _lin(T, 2 * mid) + 2 * mid + _conv(mid, co) + (_conv(ci, co, 1) if ci != co else 0)


def hand_count(cfg: ModelConfig) -> int:
    """Parameter count written out term by term from the layer inventory."""
    c = cfg.core
    h, m, td, T, F_ = c.hidden_size, c.mlp_channels, c.text_dim, cfg.time_embed_dim, cfg.time_freq_dim
    n = sum(_lin(e.embed_dim, td) for e in cfg.text_encoders) + cfg.text_seq_len * td + _lin(td, T)
    n += _lin(F_, T) + _lin(T, T)
    block = 3 * 2 * h + 4 * _lin(h, h) + 2 * _lin(h, h) + 2 * _lin(td, h) + _lin(h, 2 * m) + _lin(m, h) + _lin(T, 6 * h)
    n += c.grid**2 * h + c.num_blocks * block + 2 * h
    if cfg.encdec is None:
        steps = int(math.log2(cfg.shallow_input_resolution // c.grid))
        chans = [3] + [cfg.shallow_entry_channels] * (steps - 1) + [h]
        n += sum(_conv(a, b) for a, b in zip(chans, chans[1:]))
        mid = int(round(cfg.shallow_expansion * h))
        n += 2 * _res(h, h, mid, T)
        back = chans[::-1]
        back[-1] = 3
        n += 2 * h + sum(_conv(a, b) for a, b in zip(back, back[1:]))
        return n
    ch = list(cfg.encdec.channels_per_level)
    nxt = ch[1:] + [h]
    n += _conv(3, ch[0])
    for i, (cc, r) in enumerate(zip(ch, cfg.encdec.res_blocks_per_level)):
        n += r * _res(cc, cc, cc, T)
        n += _res(2 * cc, cc, cc, T) + (r - 1) * _res(cc, cc, cc, T)
        if nxt[i] != cc:
            n += _conv(cc, nxt[i], 1) + _conv(nxt[i], cc, 1)
    return n + 2 * ch[0] + _conv(ch[0], 3)


def test_tiny_count_matches_hand_formula():
    cfg = tiny_config()
    # text 216 + time 112 + core 1624 + entry 408 + two res blocks 4008 + head 419
    assert hand_count(cfg) == 6787
    assert count_params(cfg) == 6787
    assert count_params(tiny_grown()) == hand_count(tiny_grown())


@settings(max_examples=25, deadline=None)
@given(
    blocks=st.integers(1, 3),
    heads=st.sampled_from([1, 2, 4]),
    head_dim=st.sampled_from([2, 4]),
    grid=st.sampled_from([1, 2, 4]),
    reduction=st.sampled_from([1, 2, 4]),
    grown=st.booleans(),
)
def test_symbolic_count_equals_built_tree(blocks, heads, head_dim, grid, reduction, grown):
    h = heads * head_dim
    cfg = tiny_config(core=CoreConfig(blocks, h, 2 * h, heads, grid=grid, text_dim=6),
                      shallow_input_resolution=grid * reduction)
    if grown:
        cfg = cfg.grown(EncoderDecoderConfig((4, h), (1, 1), target_resolution=grid * 8))
    tree = build(cfg, 0)
    assert count_params(cfg) == tree.num_params() == hand_count(cfg)
    assert count_params(cfg, "trainable") + count_params(cfg, "frozen") == count_params(cfg)


@pytest.mark.parametrize(
    "name,want", [("small", 672e6), ("large", 1.3e9), ("huge", 3.5e9), ("xhuge", 7.7e9)]
)
def test_shallow_preset_counts(name, want):
    assert abs(count_params(preset(name)) / want - 1) <= 0.05


def test_count_is_symbolic_and_fast():
    t0 = time.perf_counter()
    for name in ("small", "large", "huge", "xhuge"):
        count_params(preset(name, grown=True), "trainable")
    assert time.perf_counter() - t0 < 1.0


def test_core_names_and_shapes_shared():
    for name in ("toy",):
        s, g = build_shallow(preset(name), 0), build_uvit(preset(name, grown=True), 0)
        core = lambda t: {n: v for n, v in t.shapes().items() if n.split(".")[0] in ("core", "text_enc", "time_enc")}
        assert core(s) == core(g)
    from greedy_growing.architecture import param_specs

    for name in ("small", "xhuge"):
        a, b = param_specs(preset(name)), param_specs(preset(name, grown=True))
        pick = lambda sp: {n: v[0] for n, v in sp.items() if n.startswith(("core.", "text_enc.", "time_enc."))}
        assert pick(a) == pick(b)


def test_grown_groups_exclude_shallow_only_groups():
    groups = {n.split(".")[0] for n in build(tiny_grown(), 0).names()}
    assert groups == {"text_enc", "core", "time_enc", "entry", "encoder", "decoder", "out_head"}
    groups = {n.split(".")[0] for n in build(tiny_config(), 0).names()}
    assert groups == {"text_enc", "core", "time_enc", "entry", "shallow_encoder", "shallow_decoder", "out_head"}


def test_entry_reduces_to_core_grid():
    cfg = preset("small")
    assert cfg.shallow_reduction_steps == 2
    assert 512 // 2 // 2**4 == preset("small", grown=True).core.grid


def test_init_deterministic_per_seed():
    a, b, c = build(tiny_grown(), 5), build(tiny_grown(), 5), build(tiny_grown(), 6)
    assert all(torch.equal(a[n], b[n]) for n in a.names())
    assert any(not torch.equal(a[n], c[n]) for n in a.names() if a[n].abs().sum() > 0)


def test_output_projection_zero_at_init():
    for cfg in (tiny_config(), tiny_grown()):
        tree = build(cfg, 0)
        r = cfg.resolution
        out = forward(tree, torch.randn(2, 3, r, r), 0.5, random_cond(cfg, 2))
        assert torch.count_nonzero(out) == 0


def test_config_errors():
    with pytest.raises(ConfigError):
        build_shallow(tiny_config(shallow_input_resolution=12), 0)
    bad = tiny_config().grown(EncoderDecoderConfig((4, 6), (1, 1), 32))
    with pytest.raises(ConfigError) as info:
        build_uvit(bad, 0)
    assert "innermost" in str(info.value)
    with pytest.raises(ConfigError):
        build_uvit(tiny_config(), 0)
    with pytest.raises(ConfigError):
        build_shallow(tiny_grown(), 0)


def test_config_lists_every_problem():
    cfg = ModelConfig(core=CoreConfig(0, 10, 4, 3, grid=0), text_encoders=())
    probs = cfg.problems()
    assert len(probs) >= 4


small_configs = st.builds(
    lambda blocks, heads, grid, red, grown, batch: (
        tiny_config(core=CoreConfig(blocks, 4 * heads, 8 * heads, heads, grid=grid, text_dim=8),
                    shallow_input_resolution=grid * red).grown(
            EncoderDecoderConfig((4, 4 * heads), (1, 1), target_resolution=grid * 8)) if grown
        else tiny_config(core=CoreConfig(blocks, 4 * heads, 8 * heads, heads, grid=grid, text_dim=8),
                         shallow_input_resolution=grid * red),
        batch,
    ),
    st.integers(1, 2), st.sampled_from([1, 2]), st.sampled_from([2, 4]), st.sampled_from([1, 2, 4]),
    st.booleans(), st.integers(1, 3),
)


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(small_configs)
def test_forward_shape_closure(case):
    cfg, batch = case
    tree = randomize(build(cfg, 1))
    r = cfg.resolution
    z = torch.randn(batch, 3, r, r)
    out = forward(tree, z, torch.rand(batch), random_cond(cfg, batch))
    assert out.shape == z.shape
    assert torch.isfinite(out).all()


def test_forward_deterministic_and_checks_resolution(tiny):
    tree = randomize(build(tiny, 0))
    z = torch.randn(3, 3, 16, 16)
    cond = random_cond(tiny, 3)
    a = forward(tree, z, torch.tensor([0.1, 0.5, 0.9]), cond)
    b = forward(tree, z, torch.tensor([0.1, 0.5, 0.9]), cond)
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        forward(tree, torch.randn(1, 3, 32, 32), 0.5, random_cond(tiny, 1))


def test_null_condition_matches_dropped_rows(tiny):
    tree = randomize(build(tiny, 0))
    z = torch.randn(2, 3, 16, 16)
    t = torch.tensor([0.3, 0.7])
    uncond = forward(tree, z, t, None)
    dropped = forward(tree, z, t, random_cond(tiny, 2), drop=torch.tensor([True, True]))
    assert torch.equal(uncond, dropped)
    mixed = forward(tree, z, t, random_cond(tiny, 2), drop=torch.tensor([False, True]))
    assert torch.equal(mixed[1], uncond[1])


def test_masked_tokens_do_not_matter(tiny):
    tree = randomize(build(tiny, 0))
    z = torch.randn(2, 3, 16, 16)
    cond = random_cond(tiny, 2)
    noisy = [type(c)(torch.where(c.mask[..., None], c.vectors, torch.randn_like(c.vectors)), c.mask, c.source)
             for c in cond]
    assert torch.allclose(forward(tree, z, 0.4, cond), forward(tree, z, 0.4, noisy), atol=1e-6)


def test_degenerate_head_matches_hand_computation(tiny):
    """Zero every weight, then pin the head by hand.

    With all weights zero, the head sees silu(GroupNorm bias) everywhere, so
    channel c of the output is ``w_c * silu(b) + bias_c`` where ``w_c`` is the
    centre tap of the last conv (the other taps are zero, so padding is irrelevant).
    """
    tree = build(tiny, 0)
    for n, v in tree.entries.items():
        tree.entries[n] = torch.zeros_like(v)
    steps = tiny.shallow_reduction_steps
    last = f"out_head.up{steps - 1}.conv"
    prev = f"out_head.up{steps - 2}.conv"
    # the layer before the last emits a constant 0.5 on every channel
    tree.entries[f"{prev}.bias"] = torch.full_like(tree[f"{prev}.bias"], 0.5)
    w = torch.zeros_like(tree[f"{last}.weight"])
    w[:, :, 1, 1] = torch.tensor([[1.0] * w.shape[1], [-2.0] * w.shape[1], [0.25] * w.shape[1]])
    tree.entries[f"{last}.weight"] = w
    tree.entries[f"{last}.bias"] = torch.tensor([0.1, 0.2, -0.3])
    out = forward(tree, torch.randn(2, 3, 16, 16), 0.5, random_cond(tiny, 2))
    s = 0.5 / (1 + math.exp(-0.5))
    cin = w.shape[1]
    want = torch.tensor([cin * s + 0.1, -2 * cin * s + 0.2, 0.25 * cin * s - 0.3])
    assert torch.allclose(out, want[None, :, None, None].expand_as(out), atol=1e-6)


def test_core_with_zero_branches_is_layer_norm(tiny):
    """Zeroed attention/MLP outputs leave LayerNorm(x + pos) as the core's map."""
    tree = randomize(build(tiny, 0))
    for n in tree.names():
        if n.split(".")[-2] in ("attn_o", "xattn_o", "mlp_out"):
            tree.entries[n] = torch.zeros_like(tree[n])
    x = torch.randn(2, 8, 4, 4)
    temb = time_embedding(tree.entries, tiny, torch.tensor([0.2, 0.6]))
    ctx = context(tree.entries, tiny, random_cond(tiny, 2), None, 2)
    got = apply_core(tree.entries, tiny, x, temb, ctx)
    tok = x.flatten(2).transpose(1, 2) + tree["core.pos.grid.embedding"]
    mu, var = tok.mean(-1, keepdim=True), tok.var(-1, unbiased=False, keepdim=True)
    ref = (tok - mu) / torch.sqrt(var + 1e-6) * tree["core.final.norm.weight"] + tree["core.final.norm.bias"]
    assert torch.allclose(got, ref.transpose(1, 2).reshape(2, 8, 4, 4), atol=1e-5)


def test_v_prediction_converts_to_eps():
    cfg = tiny_config(prediction="v")
    tree = randomize(build(cfg, 0))
    sched = NoiseSchedule()
    z = torch.randn(2, 3, 16, 16)
    t = torch.tensor([0.25, 0.75])
    v = forward(tree, z, t, None)
    a, s = alpha_sigma(logsnr(sched, t.double()))
    want = s.float()[:, None, None, None] * z + a.float()[:, None, None, None] * v
    assert torch.allclose(predict_eps(tree, z, t, None, schedule=sched), want, atol=1e-6)


def test_pooling_on_all_masked_sequence_is_finite(tiny):
    tree = randomize(build(tiny, 0))
    cond = random_cond(tiny, 1)
    empty = [type(c)(torch.zeros_like(c.vectors), torch.zeros_like(c.mask), c.source) for c in cond]
    out = forward(tree, torch.randn(1, 3, 16, 16), 0.5, empty)
    assert torch.isfinite(out).all()

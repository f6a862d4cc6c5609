"""Shallow-UViT and grown UViT: parameter layout, initialisation, forward pass.

The forward pass is functional: it reads tensors out of a ``ParameterTree`` by
name, so the same tree can be trained, frozen piecewise, transplanted and
serialised without any module objects in between.

Layout shared by both forms (the transplantable core components):

* ``text_enc``  per-encoder projections to ``text_dim``, the learned null
  sequence, and a pooled-text projection into the time embedding
* ``time_enc``  sinusoidal features followed by a two-layer swish MLP
* ``core``      transformer blocks on the ``grid x grid`` token map, each
  pre-norm self-attention, cross-attention over text and a GEGLU MLP, all
  modulated by the time embedding (adaLN shift/scale)
"""

from __future__ import annotations

import json
import math
import zlib
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .conditioning import NULL_NAME, EmbeddingSequence, concat_encoders
from .config import ModelConfig
from .errors import ConfigError
from .params import CORE_COMPONENT_GROUPS, ParameterTree, group_of

# init kinds: ("trunc", fan_in) | ("normal", std) | ("zeros",) | ("ones",)
ParamSpec = dict[str, tuple[tuple[int, ...], tuple]]

LN_EPS = 1e-6
GN_EPS = 1e-5


def _linear(specs: ParamSpec, prefix: str, fan_in: int, fan_out: int) -> None:
    specs[f"{prefix}.weight"] = ((fan_out, fan_in), ("trunc", fan_in))
    specs[f"{prefix}.bias"] = ((fan_out,), ("zeros",))


def _conv(specs: ParamSpec, prefix: str, c_in: int, c_out: int, k: int = 3, zero: bool = False) -> None:
    specs[f"{prefix}.weight"] = ((c_out, c_in, k, k), ("zeros",) if zero else ("trunc", c_in * k * k))
    specs[f"{prefix}.bias"] = ((c_out,), ("zeros",))


def _norm(specs: ParamSpec, prefix: str, c: int) -> None:
    specs[f"{prefix}.weight"] = ((c,), ("ones",))
    specs[f"{prefix}.bias"] = ((c,), ("zeros",))


def _resblock(specs: ParamSpec, prefix: str, c_in: int, c_out: int, mid: int, temb: int) -> None:
    _norm(specs, f"{prefix}.norm1", c_in)
    _conv(specs, f"{prefix}.conv1", c_in, mid)
    _linear(specs, f"{prefix}.film", temb, 2 * mid)
    _norm(specs, f"{prefix}.norm2", mid)
    _conv(specs, f"{prefix}.conv2", mid, c_out)
    if c_in != c_out:
        _conv(specs, f"{prefix}.skip", c_in, c_out, k=1)


def _core_component_specs(cfg: ModelConfig) -> ParamSpec:
    c = cfg.core
    h, td, T = c.hidden_size, c.text_dim, cfg.time_embed_dim
    specs: ParamSpec = {}
    for enc in cfg.text_encoders:
        _linear(specs, f"text_enc.{enc.name}.proj", enc.embed_dim, td)
    specs[NULL_NAME] = ((cfg.text_seq_len, td), ("normal", 1.0))
    _linear(specs, "text_enc.pool.fc", td, T)

    _linear(specs, "time_enc.mlp.fc1", cfg.time_freq_dim, T)
    _linear(specs, "time_enc.mlp.fc2", T, T)

    specs["core.pos.grid.embedding"] = ((c.grid * c.grid, h), ("normal", 0.02))
    for i in range(c.num_blocks):
        p = f"core.block{i}"
        _norm(specs, f"{p}.norm1", h)
        for leaf in "qkvo":
            _linear(specs, f"{p}.attn_{leaf}", h, h)
        _norm(specs, f"{p}.norm2", h)
        _linear(specs, f"{p}.xattn_q", h, h)
        _linear(specs, f"{p}.xattn_k", td, h)
        _linear(specs, f"{p}.xattn_v", td, h)
        _linear(specs, f"{p}.xattn_o", h, h)
        _norm(specs, f"{p}.norm3", h)
        _linear(specs, f"{p}.mlp_in", h, 2 * c.mlp_channels)
        _linear(specs, f"{p}.mlp_out", c.mlp_channels, h)
        _linear(specs, f"{p}.ada", T, 6 * h)
    _norm(specs, "core.final.norm", h)
    return specs


def _shallow_channels(cfg: ModelConfig) -> list[int]:
    k = cfg.shallow_reduction_steps
    if k == 0:
        return [cfg.image_channels, cfg.core.hidden_size]
    return [cfg.image_channels] + [cfg.shallow_entry_channels] * (k - 1) + [cfg.core.hidden_size]


def param_specs(cfg: ModelConfig) -> ParamSpec:
    """Name -> (shape, init) for every parameter of ``cfg``; allocates nothing."""
    specs = _core_component_specs(cfg)
    h, T, C = cfg.core.hidden_size, cfg.time_embed_dim, cfg.image_channels
    if cfg.is_shallow:
        chans = _shallow_channels(cfg)
        for j in range(len(chans) - 1):
            _conv(specs, f"entry.stem.conv{j}", chans[j], chans[j + 1])
        mid = cfg.shallow_mid_channels
        _resblock(specs, "shallow_encoder.res0", h, h, mid, T)
        _resblock(specs, "shallow_decoder.res0", h, h, mid, T)
        _norm(specs, "out_head.head.norm", h)
        back = chans[::-1]
        back[-1] = C
        for j in range(len(back) - 1):
            _conv(specs, f"out_head.up{j}.conv", back[j], back[j + 1], zero=(j == len(back) - 2))
        return specs

    e = cfg.encdec
    chans = list(e.channels_per_level)
    nxt = chans[1:] + [h]
    _conv(specs, "entry.stem.conv0", C, chans[0])
    for i, (c, n) in enumerate(zip(chans, e.res_blocks_per_level)):
        for r in range(n):
            _resblock(specs, f"encoder.level{i}_res{r}", c, c, c, T)
        if nxt[i] != c:
            _conv(specs, f"encoder.level{i}.down", c, nxt[i], k=1)
    for i in reversed(range(len(chans))):
        c = chans[i]
        if nxt[i] != c:
            _conv(specs, f"decoder.level{i}.up", nxt[i], c, k=1)
        for r in range(e.res_blocks_per_level[i]):
            _resblock(specs, f"decoder.level{i}_res{r}", 2 * c if r == 0 else c, c, c, T)
    _norm(specs, "out_head.head.norm", chans[0])
    _conv(specs, "out_head.head.conv", chans[0], C, zero=True)
    return specs


def count_params(config: ModelConfig, mode: str = "total") -> int:
    """Symbolic parameter count.

    ``mode``: ``total``; ``trainable`` (under the frozen-core mask, i.e. text
    and core groups excluded); ``frozen`` (their complement).
    """
    config.validate()
    frozen_groups = ("text_enc", "core")
    total = frozen = 0
    for name, (shape, _) in param_specs(config).items():
        n = math.prod(shape)
        total += n
        if group_of(name) in frozen_groups:
            frozen += n
    if mode == "total":
        return total
    if mode == "trainable":
        return total - frozen
    if mode == "frozen":
        return frozen
    raise ValueError(f"unknown count mode {mode!r}")


def _generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(zlib.crc32(f"{seed}:{name}".encode()) ^ (seed & 0xFFFFFFFF) << 32)
    return g


def _init(shape, kind, seed: int, name: str) -> torch.Tensor:
    if kind[0] == "zeros":
        return torch.zeros(shape)
    if kind[0] == "ones":
        return torch.ones(shape)
    out = torch.empty(shape)
    std = 1.0 / math.sqrt(kind[1]) if kind[0] == "trunc" else kind[1]
    torch.nn.init.trunc_normal_(out, 0.0, std, -2 * std, 2 * std, generator=_generator(seed, name))
    return out


def _metadata(cfg: ModelConfig, seed: int, phase: str) -> dict:
    return {
        "phase": phase,
        "config": json.loads(json.dumps(cfg.to_dict())),
        "config_fingerprint": cfg.fingerprint(),
        "core_fingerprint": cfg.core_fingerprint(),
        "seed": seed,
    }


def init_params(cfg: ModelConfig, seed: int, names: Optional[Sequence[str]] = None) -> dict[str, torch.Tensor]:
    specs = param_specs(cfg)
    names = specs.keys() if names is None else names
    return {n: _init(specs[n][0], specs[n][1], seed, n) for n in names}


def build_shallow(config: ModelConfig, seed: int = 0) -> ParameterTree:
    if not config.is_shallow:
        raise ConfigError("build_shallow needs a config without encdec")
    config.validate()
    return ParameterTree(init_params(config, seed), _metadata(config, seed, "shallow"))


def build_uvit(config: ModelConfig, seed: int = 0) -> ParameterTree:
    if config.is_shallow:
        raise ConfigError("build_uvit needs a config with encdec")
    config.validate()
    return ParameterTree(init_params(config, seed), _metadata(config, seed, "grown"))


def build(config: ModelConfig, seed: int = 0) -> ParameterTree:
    return build_shallow(config, seed) if config.is_shallow else build_uvit(config, seed)


# ---------------------------------------------------------------------------
# forward


def _lin(p, prefix: str, x: torch.Tensor) -> torch.Tensor:
    return F.linear(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def _conv2d(p, prefix: str, x: torch.Tensor, stride: int = 1) -> torch.Tensor:
    w = p[f"{prefix}.weight"]
    return F.conv2d(x, w, p[f"{prefix}.bias"], stride=stride, padding=w.shape[-1] // 2)


def _group_norm(p, prefix: str, x: torch.Tensor) -> torch.Tensor:
    groups = math.gcd(x.shape[1], 32)
    return F.group_norm(x, groups, p[f"{prefix}.weight"], p[f"{prefix}.bias"], eps=GN_EPS)


def _layer_norm(p, prefix: str, x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], p[f"{prefix}.weight"], p[f"{prefix}.bias"], eps=LN_EPS)


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64) * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def time_embedding(p, cfg: ModelConfig, t: torch.Tensor) -> torch.Tensor:
    dtype = p["time_enc.mlp.fc1.weight"].dtype
    x = timestep_features(t, cfg.time_freq_dim).to(dtype)
    return _lin(p, "time_enc.mlp.fc2", F.silu(_lin(p, "time_enc.mlp.fc1", x)))


def context(p, cfg: ModelConfig, cond, drop, batch: int) -> EmbeddingSequence:
    """Projected, concatenated text context with null rows where ``drop`` (or ``cond is None``)."""
    null = p[NULL_NAME]
    if cond is None:
        vectors = null.unsqueeze(0).expand(batch, -1, -1).contiguous()
        return EmbeddingSequence(vectors, torch.ones(vectors.shape[:2], dtype=torch.bool), "null")
    projections = [(p[f"text_enc.{e.name}.proj.weight"], p[f"text_enc.{e.name}.proj.bias"]) for e in cfg.text_encoders]
    if len(cond) != len(projections):
        raise ValueError(f"expected {len(projections)} encoder sequences, got {len(cond)}")
    cat = concat_encoders(list(cond), projections)
    if drop is None:
        return cat
    d = drop.to(torch.bool)
    vectors = torch.where(d[:, None, None], null.unsqueeze(0), cat.vectors)
    mask = cat.mask | d[:, None]
    return EmbeddingSequence(vectors, mask, cat.source)


def _attention(q, k, v, heads: int, key_mask=None) -> torch.Tensor:
    b, n, dim = q.shape
    dh = dim // heads
    q = q.view(b, n, heads, dh).transpose(1, 2)
    k = k.view(b, k.shape[1], heads, dh).transpose(1, 2)
    v = v.view(b, v.shape[1], heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], torch.finfo(scores.dtype).min)
    weights = scores.softmax(dim=-1)
    if key_mask is not None:
        weights = weights * key_mask.any(dim=-1).to(weights.dtype)[:, None, None, None]
    return (weights @ v).transpose(1, 2).reshape(b, n, dim)


def apply_core(p, cfg: ModelConfig, x: torch.Tensor, temb: torch.Tensor, ctx: EmbeddingSequence) -> torch.Tensor:
    """Core transformer stack on a (B, hidden, grid, grid) activation."""
    c = cfg.core
    b, h, gh, gw = x.shape
    tok = x.flatten(2).transpose(1, 2) + p["core.pos.grid.embedding"]
    act = F.silu(temb)
    for i in range(c.num_blocks):
        pre = f"core.block{i}"
        mod = _lin(p, f"{pre}.ada", act).unsqueeze(1).chunk(6, dim=-1)
        y = _layer_norm(p, f"{pre}.norm1", tok) * (1 + mod[1]) + mod[0]
        y = _attention(_lin(p, f"{pre}.attn_q", y), _lin(p, f"{pre}.attn_k", y), _lin(p, f"{pre}.attn_v", y), c.num_heads)
        tok = tok + _lin(p, f"{pre}.attn_o", y)
        y = _layer_norm(p, f"{pre}.norm2", tok) * (1 + mod[3]) + mod[2]
        y = _attention(
            _lin(p, f"{pre}.xattn_q", y),
            _lin(p, f"{pre}.xattn_k", ctx.vectors),
            _lin(p, f"{pre}.xattn_v", ctx.vectors),
            c.num_heads,
            ctx.mask,
        )
        tok = tok + _lin(p, f"{pre}.xattn_o", y)
        y = _layer_norm(p, f"{pre}.norm3", tok) * (1 + mod[5]) + mod[4]
        a, gate = _lin(p, f"{pre}.mlp_in", y).chunk(2, dim=-1)
        tok = tok + _lin(p, f"{pre}.mlp_out", a * F.gelu(gate))
    tok = _layer_norm(p, "core.final.norm", tok)
    return tok.transpose(1, 2).reshape(b, h, gh, gw)


def _apply_resblock(p, prefix: str, x: torch.Tensor, act_temb: torch.Tensor) -> torch.Tensor:
    y = _conv2d(p, f"{prefix}.conv1", F.silu(_group_norm(p, f"{prefix}.norm1", x)))
    scale, shift = _lin(p, f"{prefix}.film", act_temb)[:, :, None, None].chunk(2, dim=1)
    y = _group_norm(p, f"{prefix}.norm2", y) * (1 + scale) + shift
    y = _conv2d(p, f"{prefix}.conv2", F.silu(y))
    skip = _conv2d(p, f"{prefix}.skip", x) if f"{prefix}.skip.weight" in p else x
    return skip + y


def _up(x: torch.Tensor, factor: int) -> torch.Tensor:
    return x if factor == 1 else F.interpolate(x, scale_factor=factor, mode="nearest")


def _shallow_body(p, cfg: ModelConfig, z, temb, act, ctx):
    steps = len(_shallow_channels(cfg)) - 1
    stride = 2 if cfg.shallow_reduction_steps else 1
    x = z
    for j in range(steps):
        x = _conv2d(p, f"entry.stem.conv{j}", x, stride=stride)
        if j < steps - 1:
            x = F.silu(x)
    x = _apply_resblock(p, "shallow_encoder.res0", x, act)
    x = apply_core(p, cfg, x, temb, ctx)
    x = _apply_resblock(p, "shallow_decoder.res0", x, act)
    x = F.silu(_group_norm(p, "out_head.head.norm", x))
    for j in range(steps):
        x = _conv2d(p, f"out_head.up{j}.conv", _up(x, stride))
        if j < steps - 1:
            x = F.silu(x)
    return x


def _uvit_body(p, cfg: ModelConfig, z, temb, act, ctx):
    e = cfg.encdec
    chans = list(e.channels_per_level)
    x = _conv2d(p, "entry.stem.conv0", z, stride=e.entry_reduction)
    skips = []
    for i, n in enumerate(e.res_blocks_per_level):
        for r in range(n):
            x = _apply_resblock(p, f"encoder.level{i}_res{r}", x, act)
        skips.append(x)
        x = F.avg_pool2d(x, 2)
        if f"encoder.level{i}.down.weight" in p:
            x = _conv2d(p, f"encoder.level{i}.down", x)
    x = apply_core(p, cfg, x, temb, ctx)
    for i in reversed(range(len(chans))):
        x = _up(x, 2)
        if f"decoder.level{i}.up.weight" in p:
            x = _conv2d(p, f"decoder.level{i}.up", x)
        x = torch.cat([x, skips[i]], dim=1)
        for r in range(e.res_blocks_per_level[i]):
            x = _apply_resblock(p, f"decoder.level{i}_res{r}", x, act)
    x = F.silu(_group_norm(p, "out_head.head.norm", x))
    return _conv2d(p, "out_head.head.conv", _up(x, e.entry_reduction))


def _entries(params):
    return params.entries if isinstance(params, ParameterTree) else params


def forward(
    params,
    z_t: torch.Tensor,
    t,
    cond: Optional[Sequence[EmbeddingSequence]] = None,
    drop: Optional[torch.Tensor] = None,
    config: Optional[ModelConfig] = None,
) -> torch.Tensor:
    """Raw network output (epsilon or v, per ``config.prediction``), shaped like ``z_t``.

    ``cond`` holds one batched sequence per configured text encoder, in config
    order; ``None`` means the null condition for every row. ``drop`` marks rows
    whose condition is replaced by the null sequence.
    """
    cfg = config if config is not None else params.config
    p = _entries(params)
    if z_t.ndim != 4 or z_t.shape[1] != cfg.image_channels or z_t.shape[-2:] != (cfg.resolution, cfg.resolution):
        raise ValueError(
            f"expected (B, {cfg.image_channels}, {cfg.resolution}, {cfg.resolution}) input, got {tuple(z_t.shape)}"
        )
    b = z_t.shape[0]
    # NHWC is markedly faster for the small convolutions here on CPU
    z_t = z_t.contiguous(memory_format=torch.channels_last)
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.ndim == 0:
        t = t.expand(b)
    ctx = context(p, cfg, cond, drop, b)
    m = ctx.mask.to(ctx.vectors.dtype).unsqueeze(-1)
    pooled = (ctx.vectors * m).sum(1) / m.sum(1).clamp(min=1.0)
    temb = time_embedding(p, cfg, t) + _lin(p, "text_enc.pool.fc", pooled)
    act = F.silu(temb)
    body = _shallow_body if cfg.is_shallow else _uvit_body
    return body(p, cfg, z_t, temb, act, ctx)


def predict_eps(params, z_t, t, cond=None, drop=None, schedule=None, config=None) -> torch.Tensor:
    """Epsilon estimate regardless of the network's output parameterisation."""
    from .schedule import alpha_sigma, logsnr

    cfg = config if config is not None else params.config
    out = forward(params, z_t, t, cond, drop, cfg)
    if cfg.prediction == "eps":
        return out
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.ndim == 0:
        t = t.expand(z_t.shape[0])
    a, s = alpha_sigma(logsnr(schedule, t))
    a = a.to(z_t.dtype)[:, None, None, None]
    s = s.to(z_t.dtype)[:, None, None, None]
    return s * z_t + a * out


def core_component_names(tree: ParameterTree) -> list[str]:
    return [n for n in tree.names() if group_of(n) in CORE_COMPONENT_GROUPS]

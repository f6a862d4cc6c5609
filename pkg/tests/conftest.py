import pytest
import torch

from greedy_growing.conditioning import EmbeddingSequence
from greedy_growing.config import CoreConfig, EncoderDecoderConfig, ModelConfig, TextEncoderSpec

TINY_ENCODERS = (TextEncoderSpec("lookup", 3, 6), TextEncoderSpec("trigram", 2, 5))


def tiny_config(**overrides) -> ModelConfig:
    """1 block, hidden 8, mlp 16, 2 heads, 4x4 grid, 16px input."""
    kw = dict(
        core=CoreConfig(num_blocks=1, hidden_size=8, mlp_channels=16, num_heads=2, grid=4, text_dim=8),
        text_encoders=TINY_ENCODERS,
        time_embed_dim=8,
        time_freq_dim=4,
        shallow_entry_channels=4,
        shallow_input_resolution=16,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_grown(**overrides) -> ModelConfig:
    return tiny_config(**overrides).grown(EncoderDecoderConfig((4, 8), (1, 2), target_resolution=32))


def grad_config() -> ModelConfig:
    """Under 5k parameters."""
    return ModelConfig(
        core=CoreConfig(1, 8, 8, 2, grid=2, text_dim=4),
        text_encoders=(TextEncoderSpec("lookup", 3, 4),),
        time_embed_dim=8,
        time_freq_dim=4,
        shallow_entry_channels=4,
        shallow_input_resolution=8,
        shallow_expansion=1.0,
    )


def random_cond(cfg: ModelConfig, batch: int, seed: int = 0, dtype=torch.float32) -> list[EmbeddingSequence]:
    g = torch.Generator().manual_seed(seed)
    out = []
    for e in cfg.text_encoders:
        vectors = torch.randn(batch, e.seq_len, e.embed_dim, generator=g, dtype=dtype)
        lengths = torch.randint(1, e.seq_len + 1, (batch,), generator=g)
        mask = torch.arange(e.seq_len)[None, :] < lengths[:, None]
        out.append(EmbeddingSequence(vectors * mask[..., None], mask, e.name))
    return out


def randomize(tree, seed: int = 0, std: float = 0.3):
    """Overwrite every tensor (including zero-initialised ones) with noise."""
    g = torch.Generator().manual_seed(seed)
    for n, v in tree.entries.items():
        tree.entries[n] = torch.randn(v.shape, generator=g, dtype=v.dtype) * std
    return tree


@pytest.fixture
def tiny():
    return tiny_config()


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

"""Text conditioning: toy frozen encoders, projection/concatenation, null conditioning."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, Union

import numpy as np
import torch

from .config import TextEncoderSpec

log = logging.getLogger(__name__)

NULL_NAME = "text_enc.null.seq.embedding"


@dataclass
class EmbeddingSequence:
    """``vectors`` is (..., L, d); ``mask`` is (..., L) with True on real tokens."""

    vectors: torch.Tensor
    mask: torch.Tensor
    source: str

    def __post_init__(self):
        if self.vectors.shape[:-1] != self.mask.shape:
            raise ValueError(
                f"mask shape {tuple(self.mask.shape)} does not match vectors {tuple(self.vectors.shape)}"
            )

    @property
    def length(self) -> int:
        return self.vectors.shape[-2]

    @property
    def width(self) -> int:
        return self.vectors.shape[-1]


class TextEncoder(Protocol):
    spec: TextEncoderSpec

    def encode(self, prompt: str) -> EmbeddingSequence: ...


def tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


def _pad(rows: list[np.ndarray], spec: TextEncoderSpec) -> EmbeddingSequence:
    vectors = np.zeros((spec.seq_len, spec.embed_dim), dtype=np.float32)
    mask = np.zeros(spec.seq_len, dtype=bool)
    for i, row in enumerate(rows[: spec.seq_len]):
        vectors[i] = row
        mask[i] = True
    return EmbeddingSequence(torch.from_numpy(vectors), torch.from_numpy(mask), spec.name)


class LookupEncoder:
    """Whitespace tokens looked up in a seeded random table; unknown tokens share one row."""

    def __init__(self, spec: TextEncoderSpec, vocab: Sequence[str], seed: int = 0):
        self.spec = spec
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((len(self.vocab) + 1, spec.embed_dim)).astype(np.float32)

    @classmethod
    def from_vocab_file(cls, spec: TextEncoderSpec, path, seed: int = 0) -> "LookupEncoder":
        return cls(spec, read_vocab(path), seed)

    def token_ids(self, prompt: str) -> list[int]:
        unk = len(self.vocab)
        return [self.index.get(tok, unk) for tok in tokenize(prompt)]

    def encode(self, prompt: str) -> EmbeddingSequence:
        return _pad([self.table[i] for i in self.token_ids(prompt)], self.spec)


class TrigramEncoder:
    """Per-word sum of hashed character-trigram embeddings.

    Each word ``w`` becomes ``"#" + w + "#"``; every length-3 window is
    CRC32-hashed into ``n_buckets`` rows of a seeded random table.
    """

    def __init__(self, spec: TextEncoderSpec, n_buckets: int = 512, seed: int = 0):
        self.spec = spec
        self.n_buckets = n_buckets
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((n_buckets, spec.embed_dim)).astype(np.float32)

    def buckets(self, word: str) -> list[int]:
        padded = f"#{word}#"
        return [zlib.crc32(padded[i : i + 3].encode("utf-8")) % self.n_buckets for i in range(len(padded) - 2)]

    def encode(self, prompt: str) -> EmbeddingSequence:
        rows = [self.table[self.buckets(w)].sum(axis=0) for w in tokenize(prompt)]
        return _pad(rows, self.spec)


def read_vocab(path) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


def write_vocab(tokens: Iterable[str], path) -> Path:
    path = Path(path)
    path.write_text("".join(f"{t}\n" for t in tokens), encoding="utf-8")
    return path


def build_encoders(specs: Sequence[TextEncoderSpec], vocab_path=None, seed: int = 0) -> list[TextEncoder]:
    """Instantiate the shipped toy encoders by name (``lookup*`` or ``trigram*``)."""
    out = []
    for k, spec in enumerate(specs):
        if spec.name.startswith("lookup"):
            if vocab_path is None:
                raise ValueError(f"encoder {spec.name} needs a vocabulary file")
            out.append(LookupEncoder.from_vocab_file(spec, vocab_path, seed + k))
        elif spec.name.startswith("trigram"):
            out.append(TrigramEncoder(spec, seed=seed + k))
        else:
            raise ValueError(f"no implementation shipped for text encoder {spec.name!r}")
    return out


def encode_text(encoder: TextEncoder, prompt: str) -> EmbeddingSequence:
    return encoder.encode(prompt)


def stack(seqs: Sequence[EmbeddingSequence]) -> EmbeddingSequence:
    return EmbeddingSequence(
        torch.stack([s.vectors for s in seqs]), torch.stack([s.mask for s in seqs]), seqs[0].source
    )


def encode_batch(encoders: Sequence[TextEncoder], prompts: Sequence[str]) -> list[EmbeddingSequence]:
    """One batched sequence per encoder, each (B, L_i, d_i)."""
    return [stack([enc.encode(p) for p in prompts]) for enc in encoders]


def take(cond: Sequence[EmbeddingSequence], index) -> list[EmbeddingSequence]:
    return [EmbeddingSequence(c.vectors[index], c.mask[index], c.source) for c in cond]


Projection = Union[Callable[[torch.Tensor], torch.Tensor], tuple]


def _apply(proj: Projection, x: torch.Tensor) -> torch.Tensor:
    if callable(proj):
        return proj(x)
    weight, bias = proj
    return torch.nn.functional.linear(x, weight, bias)


def concat_encoders(sequences: Sequence[EmbeddingSequence], projections: Sequence[Projection]) -> EmbeddingSequence:
    """Project each sequence to the common width, then concatenate along the sequence axis.

    Padded positions are zeroed after projection and stay masked.
    """
    if not sequences:
        raise ValueError("need at least one sequence")
    if len(sequences) != len(projections):
        raise ValueError("one projection per sequence is required")
    vecs, masks = [], []
    for seq, proj in zip(sequences, projections):
        v = _apply(proj, seq.vectors)
        vecs.append(v * seq.mask.unsqueeze(-1).to(v.dtype))
        masks.append(seq.mask)
    return EmbeddingSequence(
        torch.cat(vecs, dim=-2), torch.cat(masks, dim=-1), "+".join(s.source for s in sequences)
    )


def null_condition(params) -> EmbeddingSequence:
    """The learned null sequence stored in ``params``; identical for every prompt."""
    vectors = params[NULL_NAME]
    return EmbeddingSequence(vectors, torch.ones(vectors.shape[0], dtype=torch.bool), "null")


def drop_condition(seq: EmbeddingSequence, p_drop: float, rng_seed: int, null: EmbeddingSequence) -> EmbeddingSequence:
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    return null if np.random.default_rng(rng_seed).random() < p_drop else seq


def drop_mask(batch_size: int, p_drop: float, generator: torch.Generator) -> torch.Tensor:
    """Per-row CFG dropout decisions for a training batch."""
    return torch.rand(batch_size, generator=generator, dtype=torch.float64) < p_drop

"""Named parameter collections and their single-file container format.

Container layout::

    b"GGPT" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | pad to 64 | raw arrays

Every array is stored C-contiguous little-endian at ``data_start + offset``.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError

GROUPS = (
    "text_enc",
    "core",
    "time_enc",
    "entry",
    "shallow_encoder",
    "shallow_decoder",
    "out_head",
    "encoder",
    "decoder",
)
CORE_COMPONENT_GROUPS = ("text_enc", "core", "time_enc")

NAME_RE = re.compile(r"^(%s)\.[A-Za-z0-9_]+\.[A-Za-z0-9_]+\.[A-Za-z0-9_]+$" % "|".join(GROUPS))

_MAGIC = b"GGPT"
_VERSION = 1
_ALIGN = 64


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class ParameterTree:
    entries: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)
    frozen: frozenset[str] = frozenset()

    def __post_init__(self):
        bad = [n for n in self.entries if not NAME_RE.match(n)]
        if bad:
            raise ValueError(f"parameter names violate the naming grammar: {bad[:5]}")

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: tuple(v.shape) for n, v in self.entries.items()}

    def group(self, *groups: str) -> dict[str, torch.Tensor]:
        return {n: v for n, v in self.entries.items() if group_of(n) in groups}

    def num_params(self) -> int:
        return sum(v.numel() for v in self.entries.values())

    def clone(self) -> "ParameterTree":
        return ParameterTree(
            {n: v.detach().clone() for n, v in self.entries.items()},
            json.loads(json.dumps(self.metadata)),
            frozenset(self.frozen),
        )

    def to(self, dtype: torch.dtype) -> "ParameterTree":
        out = self.clone()
        out.entries = {n: v.to(dtype) for n, v in out.entries.items()}
        return out

    @property
    def config(self):
        from .config import ModelConfig

        return ModelConfig.from_dict(self.metadata["config"])

    def save(self, path) -> Path:
        return save_tree(self, path)

    @classmethod
    def load(cls, path) -> "ParameterTree":
        return load_tree(path)


def save_tree(tree: ParameterTree, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, records, offset = [], [], 0
    for name, value in tree.entries.items():
        arr = np.ascontiguousarray(value.detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
                "frozen": name in tree.frozen,
            }
        )
        blobs.append(raw)
        pad = -len(raw) % _ALIGN
        blobs.append(b"\0" * pad)
        offset += len(raw) + pad
    manifest = json.dumps({"metadata": tree.metadata, "tensors": records}, sort_keys=True).encode()
    header = _MAGIC + struct.pack("<IQ", _VERSION, len(manifest)) + manifest
    header += b"\0" * (-len(header) % _ALIGN)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def read_manifest(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != _MAGIC:
            raise CorruptCheckpointError(f"{path}: not a parameter container")
        version, mlen = struct.unpack("<IQ", head[4:])
        if version != _VERSION:
            raise CorruptCheckpointError(f"{path}: unsupported container version {version}")
        raw = fh.read(mlen)
    if len(raw) != mlen:
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest") from exc
    start = 16 + mlen
    start += -start % _ALIGN
    return manifest, start


def load_tree(path) -> ParameterTree:
    manifest, start = read_manifest(path)
    data = Path(path).read_bytes()
    entries, frozen = {}, set()
    for rec in manifest["tensors"]:
        lo = start + rec["offset"]
        hi = lo + rec["nbytes"]
        if hi > len(data):
            raise CorruptCheckpointError(f"{path}: tensor {rec['name']} runs past end of file")
        count = int(np.prod(rec["shape"]))
        arr = np.frombuffer(data, dtype=np.dtype(rec["dtype"]), count=count, offset=lo)
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(rec["shape"])
        entries[rec["name"]] = torch.from_numpy(arr)
        if rec["frozen"]:
            frozen.add(rec["name"])
    return ParameterTree(entries, manifest["metadata"], frozenset(frozen))

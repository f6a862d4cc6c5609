"""Captioned colored-shapes scenes: a self-contained stand-in for a text-image corpus."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .conditioning import write_vocab
from .training import DatasetRecord, write_records

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 200, 30),
    "purple": (140, 50, 170),
}
KINDS = ("circle", "square", "triangle")
BACKGROUND = (245, 245, 240)
MAX_SHAPES = 5

# (width, height, probability)
DEFAULT_MIXTURE = ((48, 48, 0.25), (64, 64, 0.35), (80, 64, 0.2), (64, 96, 0.2))


def vocabulary() -> list[str]:
    words = list(NUMBER_WORDS[1:]) + list(COLORS) + list(KINDS) + [k + "s" for k in KINDS] + ["and"]
    return words


def caption_for(groups: Sequence[tuple[int, str, str]]) -> str:
    """``[(3, "red", "circle"), (1, "blue", "square")]`` -> "three red circles and one blue square"."""
    parts = [f"{NUMBER_WORDS[n]} {color} {kind}{'s' if n > 1 else ''}" for n, color, kind in groups]
    return " and ".join(parts)


def count_in_caption(caption: str) -> int:
    return sum(NUMBER_WORDS.index(w) for w in caption.split() if w in NUMBER_WORDS)


def _draw(draw: ImageDraw.ImageDraw, kind: str, cx: float, cy: float, r: float, fill) -> None:
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif kind == "square":
        s = r / math.sqrt(2) * 1.2
        draw.rectangle([cx - s, cy - s, cx + s, cy + s], fill=fill)
    else:
        pts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
        draw.polygon(pts, fill=fill)


def render_scene(rng: np.random.Generator, width: int, height: int) -> tuple[Image.Image, str, int]:
    """Random scene of 1-5 non-overlapping shapes in one or two (color, kind) groups.

    Returns the image, its caption and the number of shapes drawn. Shapes that
    cannot be placed without overlap are dropped before the caption is made.
    """
    n_groups = int(rng.integers(1, 3))
    total = int(rng.integers(max(1, n_groups), MAX_SHAPES + 1))
    colors = rng.choice(list(COLORS), size=n_groups, replace=False)
    kinds = rng.choice(KINDS, size=n_groups, replace=True)
    split = [total] if n_groups == 1 else [int(rng.integers(1, total)), 0]
    if n_groups == 2:
        split[1] = total - split[0]

    side = min(width, height)
    radius = side * (0.16 if total <= 2 else 0.11)
    placed: list[tuple[float, float, float]] = []
    counts = []
    for n in split:
        k = 0
        for _ in range(n):
            for _ in range(50):
                r = radius * float(rng.uniform(0.8, 1.2))
                cx = float(rng.uniform(r + 1, width - r - 1))
                cy = float(rng.uniform(r + 1, height - r - 1))
                if all(math.hypot(cx - x, cy - y) > r + q + 1 for x, y, q in placed):
                    placed.append((cx, cy, r))
                    k += 1
                    break
        counts.append(k)

    img = Image.new("RGB", (width, height), BACKGROUND)
    draw = ImageDraw.Draw(img)
    i = 0
    groups = []
    for k, color, kind in zip(counts, colors, kinds):
        for cx, cy, r in placed[i : i + k]:
            _draw(draw, str(kind), cx, cy, r, COLORS[str(color)])
        i += k
        if k:
            groups.append((k, str(color), str(kind)))
    return img, caption_for(groups), len(placed)


def make_toy_data(
    n: int,
    out_dir,
    seed: int = 0,
    resolution: int = 64,
    mixture: Optional[Sequence[tuple[int, int, float]]] = None,
) -> Path:
    """Render ``n`` scenes, write PNGs, ``manifest.jsonl`` and ``vocab.txt``; return the manifest path.

    Without ``mixture`` every image is ``resolution`` square. Record ``i`` draws
    from its own seeded stream, so outputs do not depend on ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if mixture is not None:
        probs = np.array([p for _, _, p in mixture], dtype=np.float64)
        probs = probs / probs.sum()
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        if mixture is None:
            w = h = resolution
        else:
            w, h, _ = mixture[int(rng.choice(len(mixture), p=probs))]
        img, caption, _ = render_scene(rng, int(w), int(h))
        rel = f"images/img_{i:05d}.png"
        img.save(out_dir / rel, format="PNG")
        records.append(DatasetRecord(rel, caption, int(w), int(h)))
    write_vocab(vocabulary(), out_dir / "vocab.txt")
    return write_records(records, out_dir / "manifest.jsonl")

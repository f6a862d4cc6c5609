"""Distribution metrics over pluggable feature extractors, and guidance calibration."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import SweepError


def _as_2d(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be an (N, d) array")
    return a


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_2d(a, "feats_a"), _as_2d(b, "feats_b")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples on each side")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    The cross term ``Tr((Sa Sb)^1/2)`` is the sum of singular values of
    ``Sa^1/2 Sb^1/2``. That form is symmetric in its arguments and never takes
    a square root of the product's tiny eigenvalues, which would amplify
    rounding when a covariance is singular. Negative eigenvalues are clipped.
    """
    a, b = _check_pair(feats_a, feats_b)
    mu = a.mean(0) - b.mean(0)
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    cross = np.linalg.svd(_sym_sqrt(sa) @ _sym_sqrt(sb), compute_uv=False).sum()
    return max(0.0, float(mu @ mu + np.trace(sa) + np.trace(sb) - 2.0 * cross))


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(feats_a, feats_b) -> float:
    """Median pairwise distance over the pooled sample (1.0 if all points coincide)."""
    pooled = np.concatenate([_as_2d(feats_a, "feats_a"), _as_2d(feats_b, "feats_b")])
    d = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.sqrt(np.median(d[iu])))
    return med if med > 0 else 1.0


def mmd_from_kernels(kxx: np.ndarray, kyy: np.ndarray, kxy: np.ndarray) -> float:
    """Unbiased squared MMD from precomputed kernel blocks.

    For equal sample sizes the paired U-statistic is used (the cross term also
    skips ``i == j``), which is exactly zero when both samples are identical.
    """
    n, m = kxx.shape[0], kyy.shape[0]
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    if n == m:
        xy = (kxy.sum() - np.trace(kxy)) / (n * (n - 1))
    else:
        xy = kxy.mean()
    return float(xx + yy - 2.0 * xy)


def mmd_distance(feats_a, feats_b, bandwidth: Optional[float] = None) -> float:
    """Squared MMD with kernel ``exp(-|x - y|^2 / (2 bandwidth^2))``.

    ``bandwidth=None`` picks the median heuristic. The estimate is unbiased
    and can dip slightly below zero.
    """
    a, b = _check_pair(feats_a, feats_b)
    if bandwidth is None:
        bandwidth = median_bandwidth(a, b)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    scale = -1.0 / (2.0 * bandwidth**2)
    kxx = np.exp(scale * _sq_dists(a, a))
    kyy = np.exp(scale * _sq_dists(b, b))
    kxy = np.exp(scale * _sq_dists(a, b))
    return mmd_from_kernels(kxx, kyy, kxy)


def alignment_score(image_feats, text_feats) -> float:
    """Mean cosine similarity between paired rows, unclamped."""
    a, b = _as_2d(image_feats, "image_feats"), _as_2d(text_feats, "text_feats")
    if a.shape != b.shape:
        raise ValueError(f"paired features must share a shape: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("alignment_score is undefined for zero vectors")
    return float(np.mean((a * b).sum(1) / (na * nb)))


class FeatureExtractor(Protocol):
    name: str
    dim: int
    input_resolution: int

    def __call__(self, images: torch.Tensor) -> np.ndarray: ...


class RandomProjectionExtractor:
    """Frozen random two-layer conv net, pooled to 4x4 and randomly projected.

    Images are resized to ``input_resolution`` first, so models at different
    resolutions are measured in one feature space.
    """

    def __init__(self, dim: int = 64, input_resolution: int = 32, seed: int = 0, width: int = 16):
        self.name = f"random-projection-{dim}-r{input_resolution}-s{seed}"
        self.dim = dim
        self.input_resolution = input_resolution
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(width, 3, 5, 5, generator=g, dtype=torch.float64) / math.sqrt(75)
        self.w2 = torch.randn(2 * width, width, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(9 * width)
        flat = 2 * width * 16 + 3 * 16
        self.proj = torch.randn(flat, dim, generator=g, dtype=torch.float64) / math.sqrt(flat)

    def __call__(self, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
        out = []
        for lo in range(0, images.shape[0], batch_size):
            x = images[lo : lo + batch_size].detach().to(torch.float64)
            r = self.input_resolution
            if x.shape[-1] != r or x.shape[-2] != r:
                x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False, antialias=True)
            h = F.relu(F.conv2d(x, self.w1, stride=2, padding=2))
            h = F.relu(F.conv2d(h, self.w2, stride=2, padding=1))
            pooled = torch.cat([F.adaptive_avg_pool2d(h, 4).flatten(1), F.adaptive_avg_pool2d(x, 4).flatten(1)], 1)
            out.append(torch.tanh(pooled @ self.proj))
        return torch.cat(out).numpy()


class ToyAligner:
    """Ridge regression from image features into caption-embedding space.

    Fitted on real (image, caption) pairs; scoring a generated image means
    mapping its features through the fit and comparing to its prompt's
    embedding.
    """

    def __init__(self, ridge: float = 1e-2):
        self.ridge = ridge
        self.weight: Optional[np.ndarray] = None

    def fit(self, image_feats, text_feats) -> "ToyAligner":
        x = np.hstack([_as_2d(image_feats, "image_feats"), np.ones((len(image_feats), 1))])
        y = _as_2d(text_feats, "text_feats")
        reg = self.ridge * np.eye(x.shape[1])
        self.weight = np.linalg.solve(x.T @ x + reg, x.T @ y)
        return self

    def project(self, image_feats) -> np.ndarray:
        if self.weight is None:
            raise RuntimeError("ToyAligner used before fit")
        x = _as_2d(image_feats, "image_feats")
        return np.hstack([x, np.ones((len(x), 1))]) @ self.weight

    def score(self, image_feats, text_feats) -> float:
        return alignment_score(self.project(image_feats), text_feats)


def pooled_text_features(conditions) -> np.ndarray:
    """Masked mean of each encoder's sequence, concatenated across encoders."""
    parts = []
    for c in conditions:
        m = c.mask.to(torch.float64).unsqueeze(-1)
        parts.append(((c.vectors.to(torch.float64) * m).sum(-2) / m.sum(-2).clamp(min=1.0)).numpy())
    return np.concatenate(parts, axis=-1)


@dataclass(frozen=True)
class MetricRow:
    weight: float
    frechet: float
    mmd: float
    alignment: float


class GuidanceRange(NamedTuple):
    low: float
    high: float
    warnings: list[str]


def _argmin_weight(rows: Sequence[MetricRow], key: str) -> float:
    return min(rows, key=lambda r: getattr(r, key)).weight


def recommend_range(rows: Sequence[MetricRow]) -> GuidanceRange:
    """Fréchet argmin to MMD argmin; an inverted pair is swapped and reported."""
    if not rows:
        raise ValueError("recommend_range needs at least one row")
    rows = sorted(rows, key=lambda r: r.weight)
    warnings = []
    if len(rows) == 1:
        w = rows[0].weight
        return GuidanceRange(w, w, [f"single guidance weight {w}: degenerate range"])
    low, high = _argmin_weight(rows, "frechet"), _argmin_weight(rows, "mmd")
    edges = (rows[0].weight, rows[-1].weight)
    for key, w in (("frechet", low), ("mmd", high)):
        if w in edges:
            warnings.append(f"{key} minimum on grid boundary (w={w})")
    if high < low:
        warnings.append(f"mmd minimum (w={high}) below frechet minimum (w={low}); range swapped")
        low, high = high, low
    return GuidanceRange(low, high, warnings)


@dataclass
class MetricReport:
    rows: list[MetricRow]
    recommended_range: tuple[float, float]
    warnings: list[str] = field(default_factory=list)
    sample_count: int = 0
    reference_count: int = 0
    extractor: str = ""

    @classmethod
    def from_rows(cls, rows: Sequence[MetricRow], **info) -> "MetricReport":
        rows = sorted(rows, key=lambda r: r.weight)
        rng = recommend_range(rows)
        return cls(rows, (rng.low, rng.high), list(rng.warnings), **info)

    def save(self, csv_path) -> tuple[Path, Path]:
        """CSV of the rows plus a sidecar ``.json`` with everything else."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["weight", "frechet", "mmd", "alignment"])
            for r in self.rows:
                w.writerow([repr(r.weight), repr(r.frechet), repr(r.mmd), repr(r.alignment)])
        side = csv_path.with_suffix(".json")
        side.write_text(
            json.dumps(
                {
                    "recommended_range": list(self.recommended_range),
                    "warnings": self.warnings,
                    "sample_count": self.sample_count,
                    "reference_count": self.reference_count,
                    "extractor": self.extractor,
                },
                indent=2,
            )
        )
        return csv_path, side

    @classmethod
    def load(cls, csv_path) -> "MetricReport":
        csv_path = Path(csv_path)
        with open(csv_path, newline="", encoding="utf-8") as fh:
            rows = [MetricRow(*(float(r[k]) for k in ("weight", "frechet", "mmd", "alignment")))
                    for r in csv.DictReader(fh)]
        side = json.loads(csv_path.with_suffix(".json").read_text())
        return cls(rows, tuple(side.pop("recommended_range")), **side)

    def plot(self, path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        w = [r.weight for r in self.rows]
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for ax, key in zip(axes, ("frechet", "mmd", "alignment")):
            ax.plot(w, [getattr(r, key) for r in self.rows], marker="o")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("guidance weight")
            ax.set_title(key)
        lo, hi = self.recommended_range
        for ax in axes:
            ax.axvspan(lo, hi, color="tab:green", alpha=0.15)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
        return path


# (prompts, guidance weight) -> images in [-1, 1]
ImageSource = Callable[[Sequence[str], float], torch.Tensor]


def guidance_sweep(
    generate: ImageSource,
    prompts: Sequence[str],
    weights: Sequence[float],
    extractor: FeatureExtractor,
    reference_feats,
    text_feats=None,
    aligner: Optional[ToyAligner] = None,
    bandwidth: Optional[float] = None,
) -> MetricReport:
    """One row per guidance weight: Fréchet and MMD against the reference set, plus alignment.

    Alignment is NaN unless both ``text_feats`` (one row per prompt) and a
    fitted ``aligner`` are given. Failures are re-raised as ``SweepError``
    naming the weight.
    """
    if not weights:
        raise ValueError("guidance_sweep needs at least one weight")
    reference_feats = _as_2d(reference_feats, "reference_feats")
    rows = []
    for w in sorted(weights):
        try:
            feats = extractor(generate(prompts, w))
            frechet = frechet_distance(feats, reference_feats)
            mmd = mmd_distance(feats, reference_feats, bandwidth)
            align = float("nan")
            if text_feats is not None and aligner is not None:
                align = aligner.score(feats, text_feats)
        except Exception as exc:
            raise SweepError(w, exc) from exc
        rows.append(MetricRow(float(w), frechet, mmd, align))
    return MetricReport.from_rows(
        rows, sample_count=len(prompts), reference_count=len(reference_feats), extractor=extractor.name
    )

"""Evaluation metrics: MSE, Frechet distance over a fixed embedder, and the
reconstruction-diversity standard deviation.

Clean images appear here and only here: metric code receives the held-back
originals that the training path never sees.  The Frechet metric is computed
against a pluggable embedder; at desk scale a frozen randomly initialized
convolutional embedder gives stable *relative* comparisons (never compare
scores across embedders).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corruption import STREAM_EVAL, rng_for_item

log = logging.getLogger(__name__)

DEFAULT_EMBEDDER_SEED = 20240001  # frozen; all desk-scale scores share it


class MetricError(ValueError):
    pass


@dataclass
class EmbeddingStats:
    """Gaussian fit of an embedded image set."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise MetricError(f"covariance shape {self.cov.shape} does not match "
                              f"mean of length {self.mean.size}")
        if self.n < 2:
            raise MetricError("need at least 2 samples for covariance")
        if np.abs(self.cov - self.cov.T).max() > 1e-8:
            raise MetricError("covariance not symmetric within 1e-8")


def mse_metric(x_rec, x_true) -> float:
    """Mean over batch and pixels of the squared reconstruction error.

    Evaluation-only supervision: ``x_true`` are clean images.
    """
    a = np.asarray(x_rec, dtype=np.float64)
    b = np.asarray(x_true, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _psd_check(cov: np.ndarray, name: str, tol: float) -> None:
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.min() < -tol * max(1.0, abs(eigvals.max())):
        raise MetricError(f"{name} covariance is not PSD within tolerance "
                          f"(min eigenvalue {eigvals.min():.3e})")


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats, psd_tol: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2).

    The cross term uses Tr((S_a S_b)^1/2) = sum of sqrt eigenvalues of
    S_a^1/2 S_b S_a^1/2, a symmetric PSD matrix; small negative eigenvalues
    from roundoff are clamped to zero.
    """
    if a.mean.size != b.mean.size:
        raise MetricError("embedding dimensions differ")
    _psd_check(a.cov, "first", psd_tol)
    _psd_check(b.cov, "second", psd_tol)

    vals_a, vecs_a = np.linalg.eigh(a.cov)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = (inner + inner.T) / 2.0
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum()

    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(value, 0.0)


def embed_and_stats(images, embedder) -> EmbeddingStats:
    """Empirical mean and unbiased covariance of ``embedder(images)``."""
    feats = np.asarray(embedder(images), dtype=np.float64)
    if feats.ndim != 2:
        raise MetricError(f"embedder must return (N, D), got shape {feats.shape}")
    if feats.shape[0] < 2:
        raise MetricError("need at least 2 images")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
    return EmbeddingStats(mean=mean, cov=cov, n=feats.shape[0])


def diversity_std(reconstruct, observations, n_z: int = 10, z_dim: int = 128,
                  rng: np.random.Generator | None = None,
                  max_items: int = 1000) -> float:
    """Mean per-masked-pixel standard deviation across latent draws.

    For each observation, ``n_z`` latents produce ``n_z`` reconstructions;
    the population std over draws is averaged over masked pixels (per
    channel) and then over images.  Fully observed items are skipped.

    ``reconstruct(y, mask, z)`` maps batches (B,C,H,W), (B,1,H,W), (B,z_dim)
    to composed reconstructions.
    """
    if rng is None:
        rng = rng_for_item(0, STREAM_EVAL, 0)
    per_image = []
    skipped = 0
    for count, (y, mask) in enumerate(observations):
        if count >= max_items:
            break
        y = np.asarray(y, dtype=np.float32)
        mask = np.asarray(mask, dtype=np.float32).reshape(y.shape[-2], y.shape[-1])
        hole = mask == 0
        if not hole.any():
            skipped += 1
            continue
        z = rng.standard_normal((n_z, z_dim)).astype(np.float32)
        y_rep = np.repeat(y[None], n_z, axis=0)
        m_rep = np.repeat(mask[None, None], n_z, axis=0)
        recs = np.asarray(reconstruct(y_rep, m_rep, z))  # (n_z, C, H, W)
        std = recs.std(axis=0, ddof=0)                   # population, (C, H, W)
        per_image.append(float(std[:, hole].mean()))
    if skipped:
        log.info("diversity_std skipped %d fully observed items", skipped)
    if not per_image:
        return 0.0
    return float(np.mean(per_image))


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------

class IdentityEmbedder:
    """Flatten pixels; useful for tests and tiny sanity checks."""

    def __call__(self, images) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        return arr.reshape(arr.shape[0], -1)


class RandomConvEmbedder(nn.Module):
    """Frozen random convolutional feature extractor.

    Desk-scale stand-in for a pretrained embedding network: comparisons are
    meaningful only between scores computed with the same seed and shape.
    """

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 3,
                 feature_dim: int = 64, seed: int = DEFAULT_EMBEDDER_SEED):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        c = channels
        for i in range(depth):
            out = width * (2 ** i)
            conv = nn.Conv2d(c, out, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, 0.2, generator=g)
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            c = out
        self.features = nn.Sequential(*layers)
        head = nn.Linear(c, feature_dim)
        with torch.no_grad():
            head.weight.normal_(0.0, 0.2, generator=g)
            head.bias.zero_()
        self.head = head
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def __call__(self, images) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(images, dtype=np.float32))
            h = self.features(x).mean(dim=(2, 3))
            return self.head(h).numpy()


# ---------------------------------------------------------------------------
# model-level evaluation and reports
# ---------------------------------------------------------------------------

def evaluate_reconstructions(reconstruct, y, mask, clean, embedder,
                             n_z: int = 10, z_dim: int = 128,
                             seed: int = 0) -> dict:
    """FID / MSE / diversity-std triple for one model on one corrupted set.

    ``clean`` are the held-back originals paired with the observations; they
    feed only the metrics.  A single latent per item drives the MSE and FID
    reconstruction; ``n_z`` latents drive the diversity measure.
    """
    y = np.asarray(y, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    clean = np.asarray(clean, dtype=np.float32)
    rng = rng_for_item(seed, STREAM_EVAL, 1)
    z = rng.standard_normal((y.shape[0], z_dim)).astype(np.float32)
    recs = np.asarray(reconstruct(y, mask, z))
    mse = mse_metric(recs, clean)
    fid = frechet_distance(embed_and_stats(clean, embedder),
                           embed_and_stats(recs, embedder))
    std = diversity_std(reconstruct, zip(y, mask), n_z=n_z, z_dim=z_dim,
                        rng=rng_for_item(seed, STREAM_EVAL, 2))
    return {"fid": fid, "mse": mse, "std": std}


_CSV_HEADER = ["variant", "corruption", "fid", "mse", "std"]


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in _CSV_HEADER})


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({"variant": row["variant"], "corruption": row["corruption"],
                         "fid": float(row["fid"]), "mse": float(row["mse"]),
                         "std": float(row["std"])})
        return rows


def render_report_table(rows: list[dict]) -> str:
    """Aligned text grid: one row per variant, FID/MSE/std triplet per
    corruption.  Diversity uses the population std convention."""
    variants = sorted({r["variant"] for r in rows})
    corruptions = sorted({r["corruption"] for r in rows})
    cells = {(r["variant"], r["corruption"]): r for r in rows}
    lines = ["# diversity: population std over latent draws"]
    header = f"{'variant':<16}"
    for c in corruptions:
        header += f"| {c:^26} "
    lines.append(header)
    sub = " " * 16
    for _ in corruptions:
        sub += f"| {'FID':>8} {'MSE':>8} {'std':>8} "
    lines.append(sub)
    lines.append("-" * len(sub))
    for v in variants:
        line = f"{v:<16}"
        for c in corruptions:
            r = cells.get((v, c))
            if r is None:
                line += f"| {'-':>8} {'-':>8} {'-':>8} "
            else:
                line += f"| {r['fid']:>8.3f} {r['mse']:>8.4f} {r['std']:>8.4f} "
        lines.append(line)
    return "\n".join(lines) + "\n"

"""Stochastic measurement process: mask samplers, masking, mask recovery.

An observation is produced from a signal ``x`` by zeroing everything a
binary mask does not select::

    y = x * m + tau * (1 - m)

with ``tau`` fixed to 0 throughout the pipeline (black fill).  Masks are a
single spatial channel broadcast over color channels.  All samplers take an
explicit ``numpy.random.Generator`` so that the mask drawn for an item is a
pure function of (seed, item index), independent of workers or batching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

PATCH = "patch"
DROP_PIXEL = "drop_pixel"

# stream tags for per-item generators, see rng_for_item()
STREAM_MANIFEST_MASK = 0
STREAM_FRESH_MASK = 1
STREAM_LATENT = 2
STREAM_ENCODER_NOISE = 3
STREAM_DATA_ORDER = 4
STREAM_SPLIT = 5
STREAM_EVAL = 6
STREAM_SUPERVISED_SPLIT = 7


class ConfigurationError(ValueError):
    """Measurement geometry or parameters are invalid."""


def rng_for_item(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for one (stream, item) pair under a global seed."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


@dataclass(frozen=True)
class MeasurementConfig:
    """Parameters of the corruption operator.

    ``patch`` keeps the union of ``n`` axis-aligned ``k x k`` squares and
    zeroes the rest; ``drop_pixel`` zeroes an exact fraction ``p`` of pixel
    positions (all channels).
    """

    kind: str = PATCH
    n: int = 1
    k: int = 32
    p: float = 0.9
    border: int = 4
    tau: float = 0.0

    def __post_init__(self):
        if self.kind not in (PATCH, DROP_PIXEL):
            raise ConfigurationError(f"unknown measurement kind {self.kind!r}")
        if self.kind == PATCH:
            if self.n <= 0 or self.k <= 0:
                raise ConfigurationError("patch measurement needs n > 0 and k > 0")
            if self.border < 0:
                raise ConfigurationError("border must be non-negative")
        else:
            if not 0.0 <= self.p <= 1.0:
                raise ConfigurationError(f"drop fraction p={self.p} outside [0, 1]")

    def validate_geometry(self, height: int, width: int) -> None:
        if self.kind == PATCH and self.k + 2 * self.border > min(height, width):
            raise ConfigurationError(
                f"patch size k={self.k} with border={self.border} does not fit "
                f"a {height}x{width} image"
            )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "k": self.k,
            "p": self.p,
            "border": self.border,
            "tau": self.tau,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MeasurementConfig":
        return cls(
            kind=obj["kind"],
            n=int(obj["n"]),
            k=int(obj["k"]),
            p=float(obj["p"]),
            border=int(obj["border"]),
            tau=float(obj["tau"]),
        )


@dataclass
class Mask:
    """Binary per-pixel observation indicator (1 = observed, 0 = masked)."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits)
        if self.bits.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {self.bits.shape}")
        values = np.unique(self.bits)
        if not np.isin(values, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.bits = self.bits.astype(np.uint8)

    @property
    def shape(self) -> tuple:
        return self.bits.shape

    def complement(self) -> "Mask":
        return Mask(1 - self.bits)

    def ones_count(self) -> int:
        return int(self.bits.sum())

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.bits.astype(dtype)


@dataclass
class Observation:
    """A corrupted image together with the mask and parameters that made it."""

    y: np.ndarray
    mask: Mask
    config: MeasurementConfig
    source_id: str = ""

    def __post_init__(self):
        bits = _bits_like(self.mask, self.y)
        if not np.all(self.y * (1 - bits) == self.config.tau * (1 - bits)):
            raise ValueError("masked region of observation must hold exactly tau")


def _bits_like(mask, image):
    """Mask bits coerced to ``image``'s array kind; broadcasting over leading
    batch/channel axes is left to numpy/torch semantics."""
    bits = mask.bits if isinstance(mask, Mask) else mask
    if hasattr(image, "detach"):  # torch tensor
        import torch

        if not isinstance(bits, torch.Tensor):
            bits = torch.as_tensor(np.asarray(bits))
        return bits.to(dtype=image.dtype, device=image.device)
    if hasattr(bits, "detach"):
        bits = bits.detach().cpu().numpy()
    return np.asarray(bits).astype(np.asarray(image).dtype, copy=False)


def sample_patch_mask(cfg: MeasurementConfig, height: int, width: int,
                      rng: np.random.Generator) -> Mask:
    """Union of ``cfg.n`` squares of side ``cfg.k``, corners uniform inside
    the border-inset rectangle.  Overlapping patches are allowed."""
    if cfg.kind != PATCH:
        raise ConfigurationError(f"expected patch config, got {cfg.kind!r}")
    cfg.validate_geometry(height, width)
    lo = cfg.border
    hi_r = height - cfg.k - cfg.border  # inclusive
    hi_c = width - cfg.k - cfg.border
    bits = np.zeros((height, width), dtype=np.uint8)
    rows = rng.integers(lo, hi_r + 1, size=cfg.n)
    cols = rng.integers(lo, hi_c + 1, size=cfg.n)
    for r, c in zip(rows, cols):
        bits[r:r + cfg.k, c:c + cfg.k] = 1
    return Mask(bits)


def sample_drop_pixel_mask(cfg: MeasurementConfig, height: int, width: int,
                           rng: np.random.Generator) -> Mask:
    """Zero exactly round(p*H*W) distinct pixels, uniformly without replacement."""
    if cfg.kind != DROP_PIXEL:
        raise ConfigurationError(f"expected drop_pixel config, got {cfg.kind!r}")
    total = height * width
    n_drop = int(round(cfg.p * total))
    bits = np.ones(total, dtype=np.uint8)
    if n_drop > 0:
        dropped = rng.choice(total, size=n_drop, replace=False)
        bits[dropped] = 0
    return Mask(bits.reshape(height, width))


def sample_mask(cfg: MeasurementConfig, height: int, width: int,
                rng: np.random.Generator) -> Mask:
    if cfg.kind == PATCH:
        return sample_patch_mask(cfg, height, width, rng)
    return sample_drop_pixel_mask(cfg, height, width, rng)


def apply_measurement(x, mask, tau: float = 0.0):
    """``x * m + tau * (1 - m)``.  Differentiable in ``x``; works on numpy
    arrays and torch tensors alike (mask broadcasts over channels)."""
    m = _bits_like(mask, x)
    return x * m + tau * (1 - m)


def extract_mask(y: np.ndarray, tau: float = 0.0) -> Mask:
    """Recover the mask from an observation: a pixel is masked iff every
    channel equals ``tau``.

    Fallback operator only: an observed pixel whose true value happens to be
    tau everywhere is misclassified as masked.  The dataset manifest stores
    the true mask, which the pipeline prefers.
    """
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None, :, :]
    masked = np.all(y == tau, axis=0)
    return Mask((~masked).astype(np.uint8))


def compose_reconstruction(g_out, y, mask):
    """``g_out * (1 - m) + y``: generated content on the masked region, the
    observation passed through bit-exactly on the observed region.

    Requires the masked region of ``y`` to hold exactly tau = 0.
    """
    m = _bits_like(mask, g_out)
    return g_out * (1 - m) + y


def save_mask_png(mask: Mask, path) -> None:
    """Lossless 1-bit-per-pixel mask file."""
    img = PILImage.fromarray((mask.bits * 255).astype(np.uint8)).convert("1")
    img.save(path)


def load_mask_png(path) -> Mask:
    img = PILImage.open(path).convert("1")
    return Mask((np.asarray(img) > 0).astype(np.uint8))


def save_measurement_config(cfg: MeasurementConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2))


def load_measurement_config(path) -> MeasurementConfig:
    return MeasurementConfig.from_json(json.loads(Path(path).read_text()))

"""Dataset ingestion, corrupt-once manifest construction, and iteration.

The pipeline never recomputes corruption: ``build_manifest`` draws exactly
one mask per source image, materializes the corrupted image and its mask on
disk as lossless PNGs, and records everything in a JSON manifest.  A 15%
holdout (rounded down) is reserved for hyperparameter selection; it is
corrupted data like everything else.  Clean images exist only in the ingest
store and are touched exclusively by evaluation code.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .corruption import (
    STREAM_DATA_ORDER,
    STREAM_MANIFEST_MASK,
    STREAM_SPLIT,
    Mask,
    MeasurementConfig,
    apply_measurement,
    load_mask_png,
    rng_for_item,
    sample_mask,
    save_mask_png,
)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
TRAIN = "train"
HOLDOUT = "holdout"


class IngestError(RuntimeError):
    pass


class ManifestError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image io
# ---------------------------------------------------------------------------

def load_image(path, channels: int = 3) -> np.ndarray:
    """PNG/JPEG file -> float32 array (C, H, W) in [0, 1]."""
    mode = "RGB" if channels == 3 else "L"
    img = PILImage.open(path).convert(mode)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if channels == 1:
        return arr[None, :, :]
    return arr.transpose(2, 0, 1)


def save_image(arr: np.ndarray, path) -> None:
    """(C, H, W) array in [0, 1] -> 8-bit PNG."""
    arr = np.clip(np.asarray(arr), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    if data.shape[0] == 1:
        img = PILImage.fromarray(data[0], mode="L")
    else:
        img = PILImage.fromarray(data.transpose(1, 2, 0), mode="RGB")
    img.save(path)


def center_crop_resize(img: PILImage.Image, out_size: int) -> PILImage.Image:
    """Largest centered square crop, then bilinear resize to out_size^2."""
    w, h = img.size
    side = min(w, h)
    left = (w - side) // 2
    top = (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != out_size:
        img = img.resize((out_size, out_size), PILImage.BILINEAR)
    return img


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

@dataclass
class ImageStore:
    """Directory of preprocessed clean square PNGs, addressed by source id."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.png"))

    def path(self, source_id: str) -> Path:
        return self.root / f"{source_id}.png"

    def load(self, source_id: str, channels: int = 3) -> np.ndarray:
        return load_image(self.path(source_id), channels=channels)

    def __len__(self) -> int:
        return len(self.ids)


def ingest(src_dir, out_dir, out_size: int, crop: str = "center") -> ImageStore:
    """Decode every image under ``src_dir``, crop/resize, write PNG store.

    Undecodable files are skipped with a warning; zero usable images is an
    error.  ``crop`` is "center" (largest centered square then resize) or
    "none" (plain resize, for already-square input).
    """
    if crop not in ("center", "none"):
        raise IngestError(f"unknown crop mode {crop!r}")
    src_dir = Path(src_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    skipped = 0
    usable = 0
    for path in sorted(p for p in src_dir.iterdir() if p.is_file()):
        try:
            img = PILImage.open(path)
            img = img.convert("RGB")
        except Exception as exc:  # undecodable input file
            log.warning("skipping %s: %s", path.name, exc)
            skipped += 1
            continue
        if crop == "center":
            img = center_crop_resize(img, out_size)
        else:
            img = img.resize((out_size, out_size), PILImage.BILINEAR)
        img.save(out_dir / f"{path.stem}.png")
        usable += 1
    if usable == 0:
        raise IngestError(f"no decodable images in {src_dir}")
    if skipped:
        log.warning("ingest skipped %d undecodable files", skipped)
    return ImageStore(out_dir)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    source_id: str
    image_path: str  # corrupted observation, relative to manifest dir
    mask_path: str
    config: MeasurementConfig
    split: str

    def to_json(self) -> dict:
        return {"source_id": self.source_id, "image_path": self.image_path,
                "mask_path": self.mask_path, "config": self.config.to_json(),
                "split": self.split}

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRecord":
        return cls(source_id=obj["source_id"], image_path=obj["image_path"],
                   mask_path=obj["mask_path"],
                   config=MeasurementConfig.from_json(obj["config"]),
                   split=obj["split"])


@dataclass
class Manifest:
    records: list
    seed: int
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path | None = None  # directory the relative paths hang off

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "seed": self.seed,
                "records": [r.to_json() for r in self.records]}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        obj = json.loads(path.read_text())
        if obj.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(
                f"manifest schema {obj.get('schema_version')} != {MANIFEST_SCHEMA_VERSION}")
        records = [ManifestRecord.from_json(r) for r in obj["records"]]
        return cls(records=records, seed=int(obj["seed"]), root=path.parent)

    def split(self, which: str) -> list:
        return [r for r in self.records if r.split == which]

    def validate(self) -> None:
        ids = [r.source_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate source ids in manifest")
        n_hold = len(self.split(HOLDOUT))
        if n_hold != int(0.15 * len(ids)):
            raise ManifestError(
                f"holdout count {n_hold} != floor(0.15 * {len(ids)})")
        if self.root is not None:
            for r in self.records:
                if not (self.root / r.image_path).exists():
                    raise ManifestError(f"missing observation {r.image_path}")
                if not (self.root / r.mask_path).exists():
                    raise ManifestError(f"missing mask {r.mask_path}")


def build_manifest(store: ImageStore, cfg: MeasurementConfig, seed: int,
                   out_dir, holdout: float = 0.15) -> Manifest:
    """Corrupt every store image exactly once and persist the results.

    One mask per source image, drawn from a per-item stream so the result
    depends only on (seed, item index).  The split is a seeded uniform draw
    of exactly floor(holdout * N) records.
    """
    ids = store.ids
    if not ids:
        raise ManifestError("image store is empty")
    out_dir = Path(out_dir)
    (out_dir / "observations").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    n_holdout = int(holdout * len(ids))
    perm = np.random.default_rng([seed, STREAM_SPLIT]).permutation(len(ids))
    holdout_idx = set(perm[:n_holdout].tolist())

    records = []
    for index, source_id in enumerate(ids):
        x = store.load(source_id)
        _, height, width = x.shape
        cfg.validate_geometry(height, width)
        mask = sample_mask(cfg, height, width,
                           rng_for_item(seed, STREAM_MANIFEST_MASK, index))
        y = apply_measurement(x, mask, cfg.tau)
        image_rel = f"observations/{source_id}.png"
        mask_rel = f"masks/{source_id}.png"
        save_image(y, out_dir / image_rel)
        save_mask_png(mask, out_dir / mask_rel)
        records.append(ManifestRecord(
            source_id=source_id, image_path=image_rel, mask_path=mask_rel,
            config=cfg, split=HOLDOUT if index in holdout_idx else TRAIN))

    manifest = Manifest(records=records, seed=seed, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


class ManifestDataset:
    """In-memory view of one manifest split: observations plus true masks."""

    def __init__(self, manifest: Manifest, which: str = TRAIN, channels: int = 3):
        if manifest.root is None:
            raise ManifestError("manifest has no root directory")
        self.records = manifest.split(which) if which else list(manifest.records)
        if not self.records:
            raise ManifestError(f"no records in split {which!r}")
        self.channels = channels
        ys, masks = [], []
        for r in self.records:
            ys.append(load_image(manifest.root / r.image_path, channels=channels))
            masks.append(load_mask_png(manifest.root / r.mask_path).as_float()[None])
        self.y = np.stack(ys)            # (N, C, H, W)
        self.mask = np.stack(masks)      # (N, 1, H, W)
        self.ids = [r.source_id for r in self.records]

    @property
    def image_size(self) -> int:
        return self.y.shape[-1]

    def __len__(self) -> int:
        return len(self.records)


def epoch_order(seed: int, n_items: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle: a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, STREAM_DATA_ORDER, epoch]).permutation(n_items)


# ---------------------------------------------------------------------------
# procedural toy data
# ---------------------------------------------------------------------------

def generate_shape_images(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """Synthetic colored-shapes corpus: flat background, one filled circle and
    one filled rectangle per image.  Returns float32 (N, 3, size, size)."""
    if size < 12:
        raise ValueError("shape images need size >= 12")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, 7, i])
        img = np.empty((3, size, size), dtype=np.float32)
        img[:] = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        # rectangle
        r0, c0 = rng.integers(0, size - 4, size=2)
        rh, rw = rng.integers(3, max(4, size // 2), size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        img[:, r0:r0 + rh, c0:c0 + rw] = color[:, None, None]
        # circle
        cy, cx = rng.uniform(4, size - 4, size=2)
        rad = rng.uniform(3, size / 4)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        color = rng.uniform(0.0, 1.0, size=3)
        img[:, disc] = color[:, None]
        images[i] = img
    return images


def write_shape_store(out_dir, n: int, size: int = 32, seed: int = 0) -> ImageStore:
    """Materialize a toy store on disk (ids are zero-padded indices)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = generate_shape_images(n, size=size, seed=seed)
    width = len(str(n - 1))
    for i in range(n):
        save_image(images[i], out_dir / f"{i:0{width}d}.png")
    return ImageStore(out_dir)

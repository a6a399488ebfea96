"""Operator entry points: ingest, corrupt, train, eval, reconstruct, report.

Batch-oriented: every command reads a JSON config (overridable by
``UNINPAINT_*`` environment variables and ``key=value`` CLI overrides), runs
to completion, and exits 0 iff all requested outputs were written.  On any
failure a single machine-parsable line goes to stderr and the partial
outputs created by the failed command are removed.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import baselines as bl
from . import evaluation as ev
from .corruption import DROP_PIXEL, PATCH, MeasurementConfig
from .data import HOLDOUT, TRAIN, ImageStore, Manifest, ManifestDataset, build_manifest, ingest, save_image
from .losses import LossWeights
from .training import TrainConfig, checkpoint_load, checkpoint_save, fit, make_reconstructor

ENV_PREFIX = "UNINPAINT_"

VARIANT_WEIGHTS = {
    "base": (0.0, 0.0),
    "z": (1.0, 0.0),
    "y": (0.0, 1.0),
    "zy": (1.0, 1.0),
}


class CommandError(RuntimeError):
    pass


class _Outputs:
    """Tracks paths a command creates so failures leave no partial output."""

    def __init__(self):
        self.paths: list[Path] = []

    def register(self, path) -> Path:
        path = Path(path)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for path in reversed(self.paths):
            if path.is_dir():
                shutil.rmtree(path, ignore_errors=True)
            elif path.exists():
                path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def load_config(path, overrides=(), env=None) -> dict:
    """Read a JSON config and layer environment and CLI overrides on top.

    Environment keys use the ``UNINPAINT_`` prefix with ``__`` as the nesting
    separator (``UNINPAINT_LOSS_WEIGHTS__LAMBDA_Z=2``); CLI overrides are
    ``dotted.key=value`` strings and win over everything.
    """
    cfg = {}
    if path is not None:
        cfg = json.loads(Path(path).read_text())
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(cfg, dotted, _coerce(raw))
    for item in overrides:
        if "=" not in item:
            raise CommandError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        _set_path(cfg, key, _coerce(raw))
    return cfg


def _measurement_from(cfg: dict, corruption: str | None) -> MeasurementConfig:
    obj = dict(cfg.get("measurement", {}))
    if corruption is not None:
        obj["kind"] = {"patch": PATCH, "drop": DROP_PIXEL}[corruption]
    defaults = MeasurementConfig().to_json()
    defaults.update(obj)
    return MeasurementConfig.from_json(defaults)


def _train_config(cfg: dict, args) -> dict:
    obj = dict(cfg)
    obj.pop("measurement", None)
    if args.seed is not None:
        obj["seed"] = args.seed
    defaults = TrainConfig().to_json()
    defaults.update(obj)
    defaults["measurement"] = _measurement_from(cfg, getattr(args, "corruption", None)).to_json()
    return defaults


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args, out: _Outputs) -> None:
    out_dir = out.register(args.out_dir)
    store = ingest(args.src, out_dir, out_size=args.size, crop=args.crop)
    print(f"ingested {len(store)} images into {out_dir}")


def cmd_corrupt(args, out: _Outputs) -> None:
    cfg = load_config(args.config, args.set)
    measurement = _measurement_from(cfg, args.corruption)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out_dir = out.register(args.out_dir)
    store = ImageStore(args.store)
    manifest = build_manifest(store, measurement, seed=seed, out_dir=out_dir)
    manifest.validate()
    print(f"corrupted {len(manifest.records)} images "
          f"({len(manifest.split(HOLDOUT))} holdout) -> {out_dir / 'manifest.json'}")


def cmd_train(args, out: _Outputs) -> None:
    cfg_dict = load_config(args.config, args.set)
    base = _train_config(cfg_dict, args)
    manifest = Manifest.load(Path(args.manifest))
    manifest.validate()
    out_dir = out.register(args.out_dir)

    if args.variant in VARIANT_WEIGHTS:
        mz, my = VARIANT_WEIGHTS[args.variant]
        weights = LossWeights.from_json(base["loss_weights"])
        base["loss_weights"] = LossWeights(
            lambda_z=weights.lambda_z * mz, lambda_y=weights.lambda_y * my,
            adv_form=weights.adv_form).to_json()
        cfg = TrainConfig.from_json(base)
        dataset = ManifestDataset(manifest, TRAIN, channels=cfg.image_channels)
        state = fit(cfg, dataset, out_dir=out_dir)
        final = Path(out_dir) / "checkpoints" / "final.pt"
        checkpoint_save(state, final, cfg)
        print(f"trained {args.variant} for {state.step} updates -> {final}")
        return

    if args.store is None:
        raise CommandError(f"variant {args.variant} requires --store with clean images")
    base["kind"] = args.variant
    defaults = bl.BaselineConfig(kind=args.variant).to_json()
    defaults.update(base)
    cfg = bl.BaselineConfig.from_json(defaults)
    dataset = ManifestDataset(manifest, TRAIN, channels=cfg.image_channels)
    clean = (bl.attach_clean(dataset, ImageStore(args.store), cfg.image_channels)
             if args.variant in (bl.UNPAIRED, bl.PAIRED) else None)
    state = bl.fit_baseline(cfg, dataset, clean=clean, out_dir=out_dir)
    final = Path(out_dir) / "checkpoints" / "final.pt"
    final.parent.mkdir(parents=True, exist_ok=True)
    if args.variant == bl.MISGAN:
        bl.misgan_checkpoint_save(state, final, cfg)
    else:
        checkpoint_save(state, final, cfg, kind=args.variant)
    print(f"trained {args.variant} for {state.step} updates -> {final}")


def _load_reconstructor(path):
    """(reconstruct_fn, z_dim, label) from any checkpoint kind."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    kind = payload.get("kind", "primary") if isinstance(payload, dict) else "primary"
    if kind == bl.MISGAN:
        state, cfg = bl.misgan_checkpoint_load(path)
        return bl.misgan_reconstructor(state), cfg.z_dim, kind
    state, cfg = checkpoint_load(path)
    return make_reconstructor(state.generator), cfg.z_dim, kind


def cmd_eval(args, out: _Outputs) -> None:
    reconstruct, z_dim, kind = _load_reconstructor(args.checkpoint)
    manifest = Manifest.load(Path(args.manifest))
    dataset = ManifestDataset(manifest, args.split)
    store = ImageStore(args.store)
    clean = bl.attach_clean(dataset, store)
    embedder = ev.RandomConvEmbedder(channels=dataset.y.shape[1])
    metrics = ev.evaluate_reconstructions(
        reconstruct, dataset.y, dataset.mask, clean, embedder,
        n_z=args.n_z, z_dim=z_dim, seed=args.seed or 0)
    variant = args.variant or kind
    corruption = args.corruption or dataset.records[0].config.kind
    row = {"variant": variant, "corruption": corruption, **metrics}

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out.register(out_dir / "metrics.csv")
    txt_path = out.register(out_dir / "metrics.txt")
    ev.write_report_csv([row], csv_path)
    table = ev.render_report_table([row])
    txt_path.write_text(table)
    print(table, end="")
    print(f"fid={metrics['fid']:.4f} mse={metrics['mse']:.6f} std={metrics['std']:.6f}")


def cmd_reconstruct(args, out: _Outputs) -> None:
    reconstruct, z_dim, _ = _load_reconstructor(args.checkpoint)
    manifest = Manifest.load(Path(args.manifest))
    dataset = ManifestDataset(manifest, args.split)
    n = min(args.n_images, len(dataset.ids))
    y = dataset.y[:n]
    mask = dataset.mask[:n]
    rng = np.random.default_rng(args.seed or 0)

    rows = [np.concatenate(list(y), axis=2)]  # top row: observations
    for _ in range(args.n_z):
        z = rng.standard_normal((n, z_dim)).astype(np.float32)
        recs = np.asarray(reconstruct(y, mask, z))
        rows.append(np.concatenate(list(recs), axis=2))
    grid = np.concatenate(rows, axis=1)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out.register(out_dir / "reconstructions.png")
    save_image(grid, path)
    print(f"wrote {1 + args.n_z} rows x {n} columns -> {path}")


def cmd_report(args, out: _Outputs) -> None:
    rows = []
    for path in args.inputs:
        rows.extend(ev.read_report_csv(path))
    if not rows:
        raise CommandError("no rows in any input report")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out.register(out_dir / "report.csv")
    txt_path = out.register(out_dir / "report.txt")
    ev.write_report_csv(rows, csv_path)
    table = ev.render_report_table(rows)
    txt_path.write_text(table)
    print(table, end="")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uninpaint",
        description="unsupervised adversarial inpainting pipeline")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override (repeatable)")

    p = sub.add_parser("ingest", help="decode, crop and resize source images")
    common(p)
    p.add_argument("--src", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--crop", choices=["center", "none"], default="center")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("corrupt", help="corrupt a store once and write the manifest")
    common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--corruption", choices=["patch", "drop"], default=None)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train a model variant")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", default="zy",
                   choices=list(VARIANT_WEIGHTS) + list(bl.BASELINE_KINDS))
    p.add_argument("--corruption", choices=["patch", "drop"], default=None)
    p.add_argument("--store", default=None,
                   help="clean image store (supervised baselines only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="FID / MSE / diversity metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--store", required=True, help="clean images (metrics only)")
    p.add_argument("--split", default=HOLDOUT, choices=[TRAIN, HOLDOUT])
    p.add_argument("--n-z", type=int, default=10)
    p.add_argument("--variant", default=None)
    p.add_argument("--corruption", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="observation/reconstruction image grid")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default=HOLDOUT, choices=[TRAIN, HOLDOUT])
    p.add_argument("--n-z", type=int, default=4)
    p.add_argument("--n-images", type=int, default=8)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="merge metric CSVs into one table")
    common(p)
    p.add_argument("--inputs", nargs="+", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    outputs = _Outputs()
    try:
        args.func(args, outputs)
        return 0
    except Exception as exc:  # single-line machine-parsable failure
        outputs.cleanup()
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Training loop: alternating D / (G, E) updates with gradient accumulation.

One optimizer update consumes ``accumulation_steps`` micro-batches; losses
are divided by the accumulation count so accumulated gradients average over
the effective batch.  Every random draw (fresh masks, latents, encoder
noise, data order) comes from a counter-keyed per-item stream derived from
the config seed, so runs are bit-reproducible, independent of micro-batch
splits, and resumable from integer counters alone.

Within a step the discriminator loss is computed first on detached
reconstructions; generator and encoder gradients are then taken on fresh
forward passes (against the pre-update discriminator), and all updates are
applied together at the accumulation boundary, discriminator first.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corruption import (
    STREAM_ENCODER_NOISE,
    STREAM_FRESH_MASK,
    STREAM_LATENT,
    MeasurementConfig,
    apply_measurement,
    compose_reconstruction,
    rng_for_item,
    sample_mask,
)
from .data import epoch_order
from .losses import (
    LossReport,
    LossWeights,
    d_adv_loss,
    encoding_y_terms,
    encoding_z_loss,
    g_adv_loss,
    total_objective,
)
from .nets import (
    Discriminator,
    DiscriminatorSpec,
    Encoder,
    EncoderSpec,
    Generator,
    GeneratorSpec,
    init_parameters,
    sample_latent,
    spec_from_json,
    spec_to_json,
    update_spectral_norms,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, step: int, term: str, batch_ids):
        self.step = step
        self.term = term
        self.batch_ids = list(batch_ids)
        super().__init__(
            f"non-finite loss at step {step} in term {term!r}, "
            f"batch ids {self.batch_ids[:8]}")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    batch_size: int = 128            # effective batch (accumulated)
    accumulation_steps: int = 4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    lr_e: float = 1e-4
    total_steps: int = 1000
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    # model sizing
    image_channels: int = 3
    image_size: int = 64
    z_dim: int = 128
    z_channels: int = 8
    base_width: int = 32
    n_blocks: int = 3
    attention_at: tuple = (16,)
    norm: str = "batch"
    # objective wiring (resolutions of ambiguous pseudocode readings)
    compose_output: bool = True           # off: adversary sees raw G output measured
    algorithm1_mask_reading: bool = False  # compose x~ with the fresh mask's complement
    encode_full_fake: bool = False         # z loss encodes all of y~, not just generated content
    mse_reduction: str = "sum"
    # bookkeeping
    dtype: str = "float32"
    sn_iters: int = 1
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.batch_size % self.accumulation_steps != 0:
            raise ValueError("batch_size must divide evenly into micro-batches")
        if min(self.lr_g, self.lr_d, self.lr_e) <= 0:
            raise ValueError("learning rates must be positive")
        object.__setattr__(self, "attention_at", tuple(self.attention_at))

    @property
    def micro_batch_size(self) -> int:
        return self.batch_size // self.accumulation_steps

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            image_channels=self.image_channels, image_size=self.image_size,
            z_dim=self.z_dim, z_channels=self.z_channels,
            base_width=self.base_width, n_blocks=self.n_blocks,
            attention_at=self.attention_at, norm=self.norm)

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            image_channels=self.image_channels, image_size=self.image_size,
            base_width=self.base_width, n_blocks=self.n_blocks,
            attention_at=self.attention_at, norm=self.norm)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            image_channels=self.image_channels, image_size=self.image_size,
            z_dim=self.z_dim, base_width=self.base_width,
            n_blocks=self.n_blocks, norm=self.norm)

    def to_json(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["loss_weights"] = self.loss_weights.to_json()
        obj["measurement"] = self.measurement.to_json()
        obj["attention_at"] = list(self.attention_at)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["loss_weights"] = LossWeights.from_json(obj["loss_weights"])
        obj["measurement"] = MeasurementConfig.from_json(obj["measurement"])
        obj["attention_at"] = tuple(obj.get("attention_at", ()))
        return cls(**obj)


def config_from_json(obj: dict):
    """Parse a serialized config, dispatching on the baseline kind tag."""
    if "kind" in obj:
        from .baselines import BaselineConfig

        return BaselineConfig.from_json(obj)
    return TrainConfig.from_json(obj)


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    encoder: Encoder
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    opt_e: torch.optim.Adam
    step: int = 0
    micro_step: int = 0
    epoch: int = 0
    cursor: int = 0            # position inside the current epoch order
    item_counter: int = 0      # items consumed by the per-item RNG streams

    def networks(self):
        return self.generator, self.discriminator, self.encoder


def build_state(cfg: TrainConfig) -> TrainState:
    g = Generator(cfg.generator_spec())
    d = Discriminator(cfg.discriminator_spec())
    e = Encoder(cfg.encoder_spec())
    init_parameters(g, cfg.seed * 10 + 1)
    init_parameters(d, cfg.seed * 10 + 2)
    init_parameters(e, cfg.seed * 10 + 3)
    dtype = cfg.torch_dtype
    g, d, e = g.to(dtype), d.to(dtype), e.to(dtype)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return TrainState(
        generator=g, discriminator=d, encoder=e,
        opt_g=torch.optim.Adam(g.parameters(), lr=cfg.lr_g, betas=betas),
        opt_d=torch.optim.Adam(d.parameters(), lr=cfg.lr_d, betas=betas),
        opt_e=torch.optim.Adam(e.parameters(), lr=cfg.lr_e, betas=betas),
    )


# ---------------------------------------------------------------------------
# per-item random streams
# ---------------------------------------------------------------------------

def draw_latents(seed: int, start: int, n: int, z_dim: int,
                 dtype=torch.float32) -> torch.Tensor:
    rows = [rng_for_item(seed, STREAM_LATENT, start + i).standard_normal(z_dim)
            for i in range(n)]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def draw_encoder_noise(seed: int, start: int, n: int, z_dim: int,
                       dtype=torch.float32) -> torch.Tensor:
    rows = [rng_for_item(seed, STREAM_ENCODER_NOISE, start + i).standard_normal(z_dim)
            for i in range(n)]
    return torch.as_tensor(np.stack(rows), dtype=dtype)


def draw_fresh_masks(seed: int, start: int, n: int, cfg: MeasurementConfig,
                     height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    rows = [sample_mask(cfg, height, width,
                        rng_for_item(seed, STREAM_FRESH_MASK, start + i)).as_float()
            for i in range(n)]
    return torch.as_tensor(np.stack(rows)[:, None], dtype=dtype)


# ---------------------------------------------------------------------------
# one micro-step of Algorithm-style training
# ---------------------------------------------------------------------------

def _check_finite(value: torch.Tensor, term: str, step: int, batch_ids) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(step, term, batch_ids)


def _scalar(value) -> float:
    if value is None:
        return 0.0
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_reconstruction(x_tilde, y, mask, cfg: TrainConfig, step: int,
                          batch_ids) -> None:
    """Divergence and observed-part preservation guards, run every phase."""
    if not torch.isfinite(x_tilde).all():
        raise TrainingDivergedError(step, "reconstruction", batch_ids)
    if cfg.compose_output and not cfg.algorithm1_mask_reading:
        # Observed pixels must pass through bit-exactly at every step.
        if not torch.equal(x_tilde * mask, y * mask):
            raise RuntimeError("observed-region preservation violated")


def _forward_paths(state: TrainState, cfg: TrainConfig, y, mask, z, eps,
                   fresh_mask, need_cycle: bool, batch_ids=()):
    """Reconstruction and measurement paths shared by both loss phases.

    Returns (x_tilde, y_tilde, x_hat, y_hat); the cycle pair is None unless
    requested.
    """
    weights = cfg.loss_weights
    g_raw = state.generator(y, mask, z)
    if not cfg.compose_output:
        x_tilde = g_raw
    elif cfg.algorithm1_mask_reading:
        x_tilde = compose_reconstruction(g_raw, y, fresh_mask)
    else:
        x_tilde = compose_reconstruction(g_raw, y, mask)
    _check_reconstruction(x_tilde, y, mask, cfg, state.step, batch_ids)
    y_tilde = apply_measurement(x_tilde, fresh_mask, cfg.measurement.tau)

    x_hat = y_hat = None
    if need_cycle and weights.lambda_y > 0:
        mean, logvar = state.encoder(y)
        z_cycle = sample_latent(mean, logvar, eps)
        g_cycle = state.generator(y_tilde, fresh_mask, z_cycle)
        x_hat = compose_reconstruction(g_cycle, y_tilde, fresh_mask)
        y_hat = apply_measurement(x_hat, mask, cfg.measurement.tau)
    return x_tilde, y_tilde, x_hat, y_hat


def train_micro_step(state: TrainState, batch: dict, cfg: TrainConfig) -> LossReport:
    """Process one micro-batch; apply optimizer updates at accumulation
    boundaries.  Mutates ``state`` and returns this micro-batch's losses."""
    weights = cfg.loss_weights
    y, mask, ids = batch["y"], batch["mask"], batch["ids"]
    n = y.shape[0]
    if n != cfg.micro_batch_size:
        raise ValueError(f"micro-batch size {n} != {cfg.micro_batch_size}")
    height, width = y.shape[-2], y.shape[-1]
    dtype = cfg.torch_dtype

    if state.micro_step % cfg.accumulation_steps == 0:
        for net in state.networks():
            update_spectral_norms(net, cfg.sn_iters)

    start = state.item_counter
    z = draw_latents(cfg.seed, start, n, cfg.z_dim, dtype)
    fresh_mask = draw_fresh_masks(cfg.seed, start, n, cfg.measurement,
                                  height, width, dtype)
    eps = (draw_encoder_noise(cfg.seed, start, n, cfg.z_dim, dtype)
           if weights.lambda_y > 0 else None)
    scale = 1.0 / cfg.accumulation_steps

    # --- discriminator phase: fakes are constants ---
    with torch.no_grad():
        _, y_tilde_d, _, y_hat_d = _forward_paths(
            state, cfg, y, mask, z, eps, fresh_mask, need_cycle=True,
            batch_ids=ids)
    real_scores = state.discriminator(y)
    d_loss = d_adv_loss(real_scores, state.discriminator(y_tilde_d),
                        form=weights.adv_form)
    if weights.lambda_y > 0:
        d_loss = d_loss + weights.lambda_y * d_adv_loss(
            real_scores, state.discriminator(y_hat_d), form=weights.adv_form)
    _check_finite(d_loss, "d_loss", state.step, ids)
    (scale * d_loss).backward()

    # --- generator/encoder phase: fresh forward passes, frozen D ---
    _set_requires_grad(state.discriminator, False)
    x_tilde, y_tilde, x_hat, y_hat = _forward_paths(
        state, cfg, y, mask, z, eps, fresh_mask, need_cycle=True, batch_ids=ids)
    g_adv = g_adv_loss(state.discriminator(y_tilde), form=weights.adv_form)
    _check_finite(g_adv, "g_adv", state.step, ids)
    g_total = g_adv
    z_rec = y_mse = y_adv = None
    if weights.lambda_z > 0:
        enc_in = y_tilde if cfg.encode_full_fake else y_tilde * (1 - mask)
        z_hat, _ = state.encoder(enc_in)
        z_rec = encoding_z_loss(z, z_hat)
        _check_finite(z_rec, "z_rec", state.step, ids)
        g_total = g_total + weights.lambda_z * z_rec
    if weights.lambda_y > 0:
        y_mse, y_adv = encoding_y_terms(
            y, y_hat, state.discriminator(y_hat), form=weights.adv_form,
            reduction=cfg.mse_reduction)
        _check_finite(y_mse, "y_rec_mse", state.step, ids)
        _check_finite(y_adv, "y_rec_adv", state.step, ids)
        g_total = g_total + weights.lambda_y * (y_mse + y_adv)
    (scale * g_total).backward()
    _set_requires_grad(state.discriminator, True)

    state.micro_step += 1
    state.item_counter += n
    if state.micro_step % cfg.accumulation_steps == 0:
        state.opt_d.step()
        state.opt_g.step()
        state.opt_e.step()
        state.opt_d.zero_grad(set_to_none=True)
        state.opt_g.zero_grad(set_to_none=True)
        state.opt_e.zero_grad(set_to_none=True)
        state.step += 1

    report = LossReport(
        d_loss=_scalar(d_loss), g_adv=_scalar(g_adv), z_rec=_scalar(z_rec),
        y_rec_mse=_scalar(y_mse), y_rec_adv=_scalar(y_adv))
    report.total = total_objective(report, weights)
    return report


# ---------------------------------------------------------------------------
# full fit loop
# ---------------------------------------------------------------------------

def _mean_report(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    out = LossReport()
    for r in reports:
        out.d_loss += r.d_loss / n
        out.g_adv += r.g_adv / n
        out.z_rec += r.z_rec / n
        out.y_rec_mse += r.y_rec_mse / n
        out.y_rec_adv += r.y_rec_adv / n
        out.total += r.total / n
    return out


def fit(cfg: TrainConfig, dataset, out_dir=None, state: TrainState | None = None,
        on_update=None) -> TrainState:
    """Run optimizer updates until ``cfg.total_steps``.

    ``dataset`` needs ``y`` (N,C,H,W), ``mask`` (N,1,H,W) and ``ids``.
    Writes a JSON-lines loss log and periodic checkpoints when ``out_dir``
    is given; ``on_update(state, report)`` fires after every update.
    Fully reproducible from (cfg.seed, dataset): resuming from a checkpoint
    continues the identical trajectory.
    """
    n_items = len(dataset.ids)
    micro = cfg.micro_batch_size
    if n_items < micro:
        raise ValueError(f"dataset of {n_items} items smaller than micro-batch {micro}")
    dtype = cfg.torch_dtype
    y_all = torch.as_tensor(np.asarray(dataset.y), dtype=dtype)
    mask_all = torch.as_tensor(np.asarray(dataset.mask), dtype=dtype)
    if y_all.shape[-1] != cfg.image_size or y_all.shape[1] != cfg.image_channels:
        raise ValueError(
            f"dataset images {tuple(y_all.shape[1:])} do not match config "
            f"{cfg.image_channels}x{cfg.image_size}^2")

    if state is None:
        state = build_state(cfg)
    log.info("effective batch %d = %d micro-batches x %d",
             cfg.batch_size, cfg.accumulation_steps, micro)

    log_file = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a")

    epochs_per_pass = n_items // micro  # partial trailing batch is dropped
    order = epoch_order(cfg.seed, n_items, state.epoch)
    try:
        group: list[LossReport] = []
        while state.step < cfg.total_steps:
            if state.cursor + micro > epochs_per_pass * micro:
                state.epoch += 1
                state.cursor = 0
                order = epoch_order(cfg.seed, n_items, state.epoch)
            idx = order[state.cursor:state.cursor + micro]
            state.cursor += micro
            batch = {"y": y_all[idx], "mask": mask_all[idx],
                     "ids": [dataset.ids[i] for i in idx]}
            before = state.step
            group.append(train_micro_step(state, batch, cfg))
            if state.step != before:  # an optimizer update was applied
                report = _mean_report(group)
                group = []
                if log_file is not None and state.step % cfg.log_every == 0:
                    row = {"step": state.step, **report.to_json()}
                    log_file.write(json.dumps(row) + "\n")
                    log_file.flush()
                if on_update is not None:
                    on_update(state, report)
                if ckpt_dir is not None and (
                        state.step % cfg.checkpoint_every == 0
                        or state.step == cfg.total_steps):
                    checkpoint_save(state, ckpt_dir / f"step_{state.step:07d}.pt", cfg)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def make_reconstructor(generator: Generator):
    """Numpy-facing inference path: eval-mode generator output composed with
    the observation, deterministic given (params, inputs)."""

    def reconstruct(y, mask, z):
        dtype = next(generator.parameters()).dtype
        was_training = generator.training
        generator.eval()
        try:
            with torch.no_grad():
                y_t = torch.as_tensor(np.asarray(y), dtype=dtype)
                m_t = torch.as_tensor(np.asarray(mask), dtype=dtype)
                if m_t.dim() == 3:
                    m_t = m_t[:, None]
                z_t = torch.as_tensor(np.asarray(z), dtype=dtype)
                out = compose_reconstruction(generator(y_t, m_t, z_t), y_t, m_t)
                return out.numpy()
        finally:
            generator.train(was_training)

    return reconstruct


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint_save(state: TrainState, path, cfg: TrainConfig,
                    kind: str = "primary") -> None:
    """Single versioned archive: parameters, optimizer moments, counters,
    and the three architecture specs as JSON."""
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": kind,
        "specs": json.dumps({
            "generator": spec_to_json(state.generator.spec),
            "discriminator": spec_to_json(state.discriminator.spec),
            "encoder": spec_to_json(state.encoder.spec),
        }),
        "config": json.dumps(cfg.to_json()),
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "encoder": state.encoder.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "opt_e": state.opt_e.state_dict(),
        "progress": {"step": state.step, "micro_step": state.micro_step,
                     "epoch": state.epoch, "cursor": state.cursor,
                     "item_counter": state.item_counter},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def checkpoint_load(path):
    """Restore (state, cfg) from an archive; raises CheckpointError on any
    malformed or version-mismatched input."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"not a checkpoint archive: {path}")
    if payload["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {payload['schema_version']} != "
            f"{CHECKPOINT_SCHEMA_VERSION}")
    if payload.get("kind", "primary") == "misgan":
        raise CheckpointError(
            "misgan checkpoint; load with baselines.misgan_checkpoint_load")
    try:
        cfg = config_from_json(json.loads(payload["config"]))
        state = build_state(cfg)
        state.generator.load_state_dict(payload["generator"])
        state.discriminator.load_state_dict(payload["discriminator"])
        state.encoder.load_state_dict(payload["encoder"])
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
        state.opt_e.load_state_dict(payload["opt_e"])
        progress = payload["progress"]
        state.step = progress["step"]
        state.micro_step = progress["micro_step"]
        state.epoch = progress["epoch"]
        state.cursor = progress["cursor"]
        state.item_counter = progress["item_counter"]
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return state, cfg

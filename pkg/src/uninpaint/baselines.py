"""Comparison systems trained with extra supervision, sharing the primary
architectures so differences isolate the supervision signal.

* unpaired: the discriminator sees clean images against full reconstructions
  (no measurement simulation on the fake path); everything else matches the
  unsupervised step.
* paired: direct regression of the reconstruction onto the paired clean
  image with a small adversarial term.
* misgan: adaptation of the two-game imputation model with the mask
  distribution replaced by the true corruption process; a data generator is
  trained against measurements and an imputer is trained to match the data
  generator's samples (reading documented in the README).

Clean images enter only through these baselines and the metrics, never
through the unsupervised training path.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corruption import (
    STREAM_SUPERVISED_SPLIT,
    apply_measurement,
    compose_reconstruction,
)
from .data import epoch_order
from .losses import LossReport, d_adv_loss, encoding_y_terms, encoding_z_loss, g_adv_loss, image_sq_error
from .nets import Discriminator, Generator, count_parameters, init_parameters, sample_latent, update_spectral_norms
from .training import (
    TrainConfig,
    TrainState,
    TrainingDivergedError,
    _check_finite,
    _check_reconstruction,
    _scalar,
    _set_requires_grad,
    build_state,
    draw_encoder_noise,
    draw_fresh_masks,
    draw_latents,
)

log = logging.getLogger(__name__)

UNPAIRED = "unpaired"
PAIRED = "paired"
MISGAN = "misgan"
BASELINE_KINDS = (UNPAIRED, PAIRED, MISGAN)


@dataclass(frozen=True)
class BaselineConfig(TrainConfig):
    kind: str = PAIRED
    test_fraction: float = 0.10      # held-out pairs for supervised variants
    paired_adv_weight: float = 0.01  # adversarial term relative to regression
    misgan_beta: float = 0.1         # imputer-game coupling into the data generator

    def __post_init__(self):
        super().__post_init__()
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"kind must be one of {BASELINE_KINDS}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")


def supervised_split(seed: int, n_items: int, fraction: float):
    """(train_idx, test_idx): a seeded uniform draw of floor(fraction * N)."""
    n_test = int(fraction * n_items)
    perm = np.random.default_rng(
        [seed, STREAM_SUPERVISED_SPLIT]).permutation(n_items)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def attach_clean(dataset, store, channels: int = 3) -> np.ndarray:
    """Clean images aligned with ``dataset.ids`` (supervision for baselines)."""
    return np.stack([store.load(i, channels=channels) for i in dataset.ids])


@dataclass
class MisGANState:
    """Two generators and two discriminators of the adapted imputation model."""

    data_generator: Generator
    imputer: Generator
    disc_data: Discriminator
    disc_imputer: Discriminator
    opt_gx: torch.optim.Adam
    opt_imp: torch.optim.Adam
    opt_dx: torch.optim.Adam
    opt_di: torch.optim.Adam
    step: int = 0
    micro_step: int = 0
    epoch: int = 0
    cursor: int = 0
    item_counter: int = 0

    def networks(self):
        return (self.data_generator, self.imputer, self.disc_data,
                self.disc_imputer)


def build_misgan_state(cfg: BaselineConfig) -> MisGANState:
    gen_spec = cfg.generator_spec()
    disc_spec = cfg.discriminator_spec()
    gx = Generator(gen_spec)
    imp = Generator(gen_spec)
    dx = Discriminator(disc_spec)
    di = Discriminator(disc_spec)
    init_parameters(gx, cfg.seed * 10 + 4)
    init_parameters(imp, cfg.seed * 10 + 5)
    init_parameters(dx, cfg.seed * 10 + 6)
    init_parameters(di, cfg.seed * 10 + 7)
    # identical capacity to the primary model, asserted not assumed
    assert count_parameters(gx) == count_parameters(Generator(gen_spec))
    assert count_parameters(imp) == count_parameters(gx)
    assert count_parameters(dx) == count_parameters(Discriminator(disc_spec))
    assert count_parameters(di) == count_parameters(dx)
    dtype = cfg.torch_dtype
    gx, imp, dx, di = (m.to(dtype) for m in (gx, imp, dx, di))
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return MisGANState(
        data_generator=gx, imputer=imp, disc_data=dx, disc_imputer=di,
        opt_gx=torch.optim.Adam(gx.parameters(), lr=cfg.lr_g, betas=betas),
        opt_imp=torch.optim.Adam(imp.parameters(), lr=cfg.lr_g, betas=betas),
        opt_dx=torch.optim.Adam(dx.parameters(), lr=cfg.lr_d, betas=betas),
        opt_di=torch.optim.Adam(di.parameters(), lr=cfg.lr_d, betas=betas),
    )


def build_baseline_state(cfg: BaselineConfig):
    if cfg.kind == MISGAN:
        return build_misgan_state(cfg)
    state = build_state(cfg)
    assert count_parameters(state.generator) == count_parameters(
        Generator(cfg.generator_spec()))
    return state


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _blank_observation(template: torch.Tensor):
    """All-masked observation (zero image, zero mask) so the shared
    image-to-image generator can act as an unconditional sampler."""
    b, _, h, w = template.shape
    zero_y = torch.zeros_like(template)
    zero_m = torch.zeros((b, 1, h, w), dtype=template.dtype)
    return zero_y, zero_m


def _unpaired_paths(state: TrainState, cfg: BaselineConfig, y, mask, z, eps,
                    fresh_mask, batch_ids=()):
    """Same wiring as the unsupervised step; only what feeds D changes."""
    g_raw = state.generator(y, mask, z)
    x_tilde = compose_reconstruction(g_raw, y, mask)
    _check_reconstruction(x_tilde, y, mask, cfg, state.step, batch_ids)
    y_tilde = apply_measurement(x_tilde, fresh_mask, cfg.measurement.tau)
    x_hat = y_hat = None
    if cfg.loss_weights.lambda_y > 0:
        mean, logvar = state.encoder(y)
        z_cycle = sample_latent(mean, logvar, eps)
        g_cycle = state.generator(y_tilde, fresh_mask, z_cycle)
        x_hat = compose_reconstruction(g_cycle, y_tilde, fresh_mask)
        y_hat = apply_measurement(x_hat, mask, cfg.measurement.tau)
    return x_tilde, y_tilde, x_hat, y_hat


def unpaired_step(state: TrainState, batch: dict, cfg: BaselineConfig) -> LossReport:
    """Unsupervised step with the adversary moved to image space: D compares
    independent clean samples against full reconstructions."""
    weights = cfg.loss_weights
    y, mask, x_clean, ids = batch["y"], batch["mask"], batch["x_clean"], batch["ids"]
    n = y.shape[0]
    dtype = cfg.torch_dtype
    if state.micro_step % cfg.accumulation_steps == 0:
        for net in state.networks():
            update_spectral_norms(net, cfg.sn_iters)
    start = state.item_counter
    z = draw_latents(cfg.seed, start, n, cfg.z_dim, dtype)
    fresh_mask = draw_fresh_masks(cfg.seed, start, n, cfg.measurement,
                                  y.shape[-2], y.shape[-1], dtype)
    eps = (draw_encoder_noise(cfg.seed, start, n, cfg.z_dim, dtype)
           if weights.lambda_y > 0 else None)
    scale = 1.0 / cfg.accumulation_steps

    with torch.no_grad():
        x_tilde_d, _, x_hat_d, _ = _unpaired_paths(state, cfg, y, mask, z, eps,
                                                   fresh_mask, batch_ids=ids)
    real_scores = state.discriminator(x_clean)
    d_loss = d_adv_loss(real_scores, state.discriminator(x_tilde_d),
                        form=weights.adv_form)
    if weights.lambda_y > 0:
        d_loss = d_loss + weights.lambda_y * d_adv_loss(
            real_scores, state.discriminator(x_hat_d), form=weights.adv_form)
    _check_finite(d_loss, "d_loss", state.step, ids)
    (scale * d_loss).backward()

    _set_requires_grad(state.discriminator, False)
    x_tilde, y_tilde, x_hat, y_hat = _unpaired_paths(state, cfg, y, mask, z,
                                                     eps, fresh_mask,
                                                     batch_ids=ids)
    g_adv = g_adv_loss(state.discriminator(x_tilde), form=weights.adv_form)
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
            y, y_hat, state.discriminator(x_hat), form=weights.adv_form,
            reduction=cfg.mse_reduction)
        _check_finite(y_mse, "y_rec_mse", state.step, ids)
        g_total = g_total + weights.lambda_y * (y_mse + y_adv)
    (scale * g_total).backward()
    _set_requires_grad(state.discriminator, True)

    state.micro_step += 1
    state.item_counter += n
    if state.micro_step % cfg.accumulation_steps == 0:
        for opt in (state.opt_d, state.opt_g, state.opt_e):
            opt.step()
            opt.zero_grad(set_to_none=True)
        state.step += 1
    return LossReport(d_loss=_scalar(d_loss), g_adv=_scalar(g_adv),
                      z_rec=_scalar(z_rec), y_rec_mse=_scalar(y_mse),
                      y_rec_adv=_scalar(y_adv))


def paired_step(state: TrainState, batch: dict, cfg: BaselineConfig) -> LossReport:
    """Regression onto the paired clean image plus a small adversarial term."""
    y, mask, x_clean, ids = batch["y"], batch["mask"], batch["x_clean"], batch["ids"]
    n = y.shape[0]
    dtype = cfg.torch_dtype
    if state.micro_step % cfg.accumulation_steps == 0:
        for net in state.networks():
            update_spectral_norms(net, cfg.sn_iters)
    z = draw_latents(cfg.seed, state.item_counter, n, cfg.z_dim, dtype)
    scale = 1.0 / cfg.accumulation_steps

    with torch.no_grad():
        x_tilde_d = compose_reconstruction(state.generator(y, mask, z), y, mask)
    d_loss = d_adv_loss(state.discriminator(x_clean),
                        state.discriminator(x_tilde_d), form=cfg.loss_weights.adv_form)
    _check_finite(d_loss, "d_loss", state.step, ids)
    (scale * d_loss).backward()

    _set_requires_grad(state.discriminator, False)
    x_tilde = compose_reconstruction(state.generator(y, mask, z), y, mask)
    mse = image_sq_error(x_tilde, x_clean, reduction=cfg.mse_reduction)
    _check_finite(mse, "paired_mse", state.step, ids)
    g_total = mse
    adv = None
    if cfg.paired_adv_weight > 0:
        adv = g_adv_loss(state.discriminator(x_tilde), form=cfg.loss_weights.adv_form)
        _check_finite(adv, "g_adv", state.step, ids)
        g_total = g_total + cfg.paired_adv_weight * adv
    (scale * g_total).backward()
    _set_requires_grad(state.discriminator, True)

    state.micro_step += 1
    state.item_counter += n
    if state.micro_step % cfg.accumulation_steps == 0:
        for opt in (state.opt_d, state.opt_g, state.opt_e):
            opt.step()
            opt.zero_grad(set_to_none=True)
        state.step += 1
    return LossReport(d_loss=_scalar(d_loss), g_adv=_scalar(adv),
                      y_rec_mse=_scalar(mse))


def misgan_step(state: MisGANState, batch: dict, cfg: BaselineConfig) -> LossReport:
    """Two adversarial games: measurements of generated data against real
    observations, and imputations against generated data."""
    weights = cfg.loss_weights
    y, mask, ids = batch["y"], batch["mask"], batch["ids"]
    n = y.shape[0]
    dtype = cfg.torch_dtype
    if state.micro_step % cfg.accumulation_steps == 0:
        for net in state.networks():
            update_spectral_norms(net, cfg.sn_iters)
    start = state.item_counter
    z_data = draw_latents(cfg.seed, start, n, cfg.z_dim, dtype)
    z_imp = draw_encoder_noise(cfg.seed, start, n, cfg.z_dim, dtype)
    fresh_mask = draw_fresh_masks(cfg.seed, start, n, cfg.measurement,
                                  y.shape[-2], y.shape[-1], dtype)
    blank_y, blank_m = _blank_observation(y)
    scale = 1.0 / cfg.accumulation_steps

    # discriminator phases
    with torch.no_grad():
        x_gen_d = state.data_generator(blank_y, blank_m, z_data)
        y_gen_d = apply_measurement(x_gen_d, fresh_mask, cfg.measurement.tau)
        x_imp_d = compose_reconstruction(state.imputer(y, mask, z_imp), y, mask)
    dx_loss = d_adv_loss(state.disc_data(y), state.disc_data(y_gen_d),
                         form=weights.adv_form)
    _check_finite(dx_loss, "misgan_dx", state.step, ids)
    (scale * dx_loss).backward()
    di_loss = d_adv_loss(state.disc_imputer(x_gen_d), state.disc_imputer(x_imp_d),
                         form=weights.adv_form)
    _check_finite(di_loss, "misgan_di", state.step, ids)
    (scale * di_loss).backward()

    # generator phases against frozen discriminators
    _set_requires_grad(state.disc_data, False)
    _set_requires_grad(state.disc_imputer, False)
    x_gen = state.data_generator(blank_y, blank_m, z_data)
    y_gen = apply_measurement(x_gen, fresh_mask, cfg.measurement.tau)
    gx_loss = g_adv_loss(state.disc_data(y_gen), form=weights.adv_form)
    if cfg.misgan_beta > 0:
        # the data generator also descends the imputer game's real-side score
        gx_loss = gx_loss + cfg.misgan_beta * state.disc_imputer(x_gen).mean()
    _check_finite(gx_loss, "misgan_gx", state.step, ids)
    (scale * gx_loss).backward()
    x_imp = compose_reconstruction(state.imputer(y, mask, z_imp), y, mask)
    imp_loss = g_adv_loss(state.disc_imputer(x_imp), form=weights.adv_form)
    _check_finite(imp_loss, "misgan_imputer", state.step, ids)
    (scale * imp_loss).backward()
    _set_requires_grad(state.disc_data, True)
    _set_requires_grad(state.disc_imputer, True)

    state.micro_step += 1
    state.item_counter += n
    if state.micro_step % cfg.accumulation_steps == 0:
        for opt in (state.opt_dx, state.opt_di, state.opt_gx, state.opt_imp):
            opt.step()
            opt.zero_grad(set_to_none=True)
        state.step += 1
    return LossReport(d_loss=_scalar(dx_loss) + _scalar(di_loss),
                      g_adv=_scalar(gx_loss), y_rec_adv=_scalar(imp_loss))


def misgan_checkpoint_save(state: MisGANState, path, cfg: BaselineConfig) -> None:
    """Same archive schema as the primary format with a misgan kind tag."""
    from .training import CHECKPOINT_SCHEMA_VERSION

    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": MISGAN,
        "config": json.dumps(cfg.to_json()),
        "data_generator": state.data_generator.state_dict(),
        "imputer": state.imputer.state_dict(),
        "disc_data": state.disc_data.state_dict(),
        "disc_imputer": state.disc_imputer.state_dict(),
        "opt_gx": state.opt_gx.state_dict(),
        "opt_imp": state.opt_imp.state_dict(),
        "opt_dx": state.opt_dx.state_dict(),
        "opt_di": state.opt_di.state_dict(),
        "progress": {"step": state.step, "micro_step": state.micro_step,
                     "epoch": state.epoch, "cursor": state.cursor,
                     "item_counter": state.item_counter},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def misgan_checkpoint_load(path):
    from .training import CHECKPOINT_SCHEMA_VERSION, CheckpointError

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("kind") != MISGAN:
        raise CheckpointError(f"not a misgan checkpoint: {path}")
    if payload["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {payload['schema_version']} != "
            f"{CHECKPOINT_SCHEMA_VERSION}")
    try:
        cfg = BaselineConfig.from_json(json.loads(payload["config"]))
        state = build_misgan_state(cfg)
        state.data_generator.load_state_dict(payload["data_generator"])
        state.imputer.load_state_dict(payload["imputer"])
        state.disc_data.load_state_dict(payload["disc_data"])
        state.disc_imputer.load_state_dict(payload["disc_imputer"])
        state.opt_gx.load_state_dict(payload["opt_gx"])
        state.opt_imp.load_state_dict(payload["opt_imp"])
        state.opt_dx.load_state_dict(payload["opt_dx"])
        state.opt_di.load_state_dict(payload["opt_di"])
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


def misgan_reconstructor(state: MisGANState):
    """Imputation path of the adapted model, for the shared metrics."""

    def reconstruct(y, mask, z):
        with torch.no_grad():
            dtype = next(state.imputer.parameters()).dtype
            y_t = torch.as_tensor(np.asarray(y), dtype=dtype)
            m_t = torch.as_tensor(np.asarray(mask), dtype=dtype)
            if m_t.dim() == 3:
                m_t = m_t[:, None]
            z_t = torch.as_tensor(np.asarray(z), dtype=dtype)
            out = compose_reconstruction(state.imputer(y_t, m_t, z_t), y_t, m_t)
            return out.numpy()

    return reconstruct


# ---------------------------------------------------------------------------
# fit loop shared by the three baselines
# ---------------------------------------------------------------------------

def fit_baseline(cfg: BaselineConfig, dataset, clean: np.ndarray | None = None,
                 out_dir=None, state=None, on_update=None):
    """Train one baseline.  ``clean`` (aligned with ``dataset.ids``) is
    required for the supervised variants; the split held out for testing is
    ``supervised_split(cfg.seed, n, cfg.test_fraction)``."""
    if cfg.kind in (UNPAIRED, PAIRED) and clean is None:
        raise ValueError(f"{cfg.kind} baseline requires clean images")
    n_items = len(dataset.ids)
    micro = cfg.micro_batch_size
    dtype = cfg.torch_dtype
    y_all = torch.as_tensor(np.asarray(dataset.y), dtype=dtype)
    mask_all = torch.as_tensor(np.asarray(dataset.mask), dtype=dtype)
    clean_all = (torch.as_tensor(np.asarray(clean), dtype=dtype)
                 if clean is not None else None)

    if cfg.kind == MISGAN:
        train_idx = np.arange(n_items)
    else:
        train_idx, _ = supervised_split(cfg.seed, n_items, cfg.test_fraction)
    if len(train_idx) < micro:
        raise ValueError("training split smaller than one micro-batch")

    if state is None:
        state = build_baseline_state(cfg)
    step_fn = {UNPAIRED: unpaired_step, PAIRED: paired_step,
               MISGAN: misgan_step}[cfg.kind]

    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / f"{cfg.kind}_log.jsonl", "a")

    usable = (len(train_idx) // micro) * micro
    order = train_idx[epoch_order(cfg.seed, len(train_idx), state.epoch)]
    clean_order = (train_idx[epoch_order(cfg.seed + 1, len(train_idx), state.epoch)]
                   if cfg.kind == UNPAIRED else None)
    try:
        while state.step < cfg.total_steps:
            if state.cursor + micro > usable:
                state.epoch += 1
                state.cursor = 0
                order = train_idx[epoch_order(cfg.seed, len(train_idx), state.epoch)]
                if cfg.kind == UNPAIRED:
                    clean_order = train_idx[
                        epoch_order(cfg.seed + 1, len(train_idx), state.epoch)]
            sel = order[state.cursor:state.cursor + micro]
            batch = {"y": y_all[sel], "mask": mask_all[sel],
                     "ids": [dataset.ids[i] for i in sel]}
            if cfg.kind == PAIRED:
                batch["x_clean"] = clean_all[sel]
            elif cfg.kind == UNPAIRED:
                # clean samples drawn independently of the corrupted batch
                sel_clean = clean_order[state.cursor:state.cursor + micro]
                batch["x_clean"] = clean_all[sel_clean]
            state.cursor += micro
            before = state.step
            report = step_fn(state, batch, cfg)
            if state.step != before:
                if log_file is not None:
                    row = {"step": state.step, **report.to_json()}
                    log_file.write(json.dumps(row) + "\n")
                    log_file.flush()
                if on_update is not None:
                    on_update(state, report)
    finally:
        if log_file is not None:
            log_file.close()
    return state

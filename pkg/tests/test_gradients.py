"""Central finite-difference checks of every loss term through every block
type, on sub-1000-parameter double-precision networks.

Networks run in eval mode so each loss is a pure deterministic function of
the parameters (frozen batch statistics and spectral-norm estimates); the
finite-difference oracle then probes exactly the function autograd saw.
"""

import numpy as np
import pytest
import torch

from _helpers import (
    autograd_gradient,
    fd_gradient,
    jitter_biases,
    relative_error,
    tiny_config,
    toy_batch,
)
from uninpaint.corruption import apply_measurement, compose_reconstruction
from uninpaint.losses import (
    HINGE,
    LEAST_SQUARES,
    LOGISTIC,
    d_adv_loss,
    encoding_z_loss,
    g_adv_loss,
    image_sq_error,
)
from uninpaint.nets import (
    Discriminator,
    Encoder,
    Generator,
    ResidualBlock,
    SelfAttention,
    count_parameters,
    init_parameters,
    sample_latent,
)
from uninpaint.training import (
    build_state,
    draw_encoder_noise,
    draw_fresh_masks,
    draw_latents,
)

torch.set_num_threads(1)

REL_TOL = 1e-3  # full-model tolerance; loss-formula checks are far tighter


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    state = build_state(cfg)
    for i, net in enumerate(state.networks()):
        assert count_parameters(net) <= 2000
        jitter_biases(net, 40 + i)  # generic point: no preactivation at a kink
        net.eval()
    batch = toy_batch(cfg, seed=1)
    n = cfg.micro_batch_size
    z = draw_latents(cfg.seed, 0, n, cfg.z_dim, torch.float64)
    eps = draw_encoder_noise(cfg.seed, 0, n, cfg.z_dim, torch.float64)
    fresh = draw_fresh_masks(cfg.seed, 0, n, cfg.measurement, cfg.image_size,
                             cfg.image_size, torch.float64)
    return cfg, state, batch, z, eps, fresh


def check(loss_fn, modules, tol=REL_TOL, h=1e-6):
    auto = autograd_gradient(loss_fn, modules)
    fd = fd_gradient(loss_fn, modules, h=h)
    for a, f in zip(auto, fd):
        assert relative_error(a, f) < tol


class TestBlockGradients:
    def test_plain_residual_block(self):
        block = ResidualBlock(2, 2, None, norm="batch").double()
        init_parameters(block, 5)
        jitter_biases(block, 15)
        block.eval()
        x = torch.tensor(np.random.default_rng(0).standard_normal((2, 2, 4, 4)))
        w = torch.tensor(np.random.default_rng(1).standard_normal((2, 2, 4, 4)))
        check(lambda: (block(x) * w).sum(), [block])

    def test_down_residual_block(self):
        block = ResidualBlock(2, 3, "down", norm="batch").double()
        init_parameters(block, 6)
        jitter_biases(block, 16)
        block.eval()
        x = torch.tensor(np.random.default_rng(2).standard_normal((2, 2, 4, 4)))
        check(lambda: (block(x) ** 2).sum(), [block])

    def test_up_residual_block_with_pixel_shuffle(self):
        block = ResidualBlock(3, 2, "up", norm="batch").double()
        init_parameters(block, 7)
        jitter_biases(block, 17)
        block.eval()
        x = torch.tensor(np.random.default_rng(3).standard_normal((2, 3, 4, 4)))
        check(lambda: (block(x) ** 2).sum(), [block])

    def test_self_attention_block(self):
        attn = SelfAttention(3).double()
        init_parameters(attn, 8)
        with torch.no_grad():
            attn.gamma.fill_(0.6)  # nonzero gate so all paths carry gradient
        x = torch.tensor(np.random.default_rng(4).standard_normal((2, 3, 4, 4)))
        check(lambda: (attn(x) ** 2).sum(), [attn])

    def test_norm_free_blocks(self):
        block = ResidualBlock(2, 2, None, norm="none").double()
        init_parameters(block, 9)
        jitter_biases(block, 19)
        x = torch.tensor(np.random.default_rng(5).standard_normal((1, 2, 4, 4)))
        check(lambda: (block(x) ** 2).sum(), [block])


class TestNetworkGradients:
    def test_generator(self, setup):
        cfg, state, batch, z, _, _ = setup
        g = state.generator
        w = torch.tensor(np.random.default_rng(6).standard_normal(
            (cfg.micro_batch_size, cfg.image_channels, 8, 8)))
        check(lambda: (g(batch["y"], batch["mask"], z) * w).sum(), [g])

    def test_discriminator(self, setup):
        cfg, state, batch, _, _, _ = setup
        d = state.discriminator
        check(lambda: (d(batch["y"]) ** 2).sum(), [d])

    def test_encoder_both_heads(self, setup):
        cfg, state, batch, _, eps, _ = setup
        e = state.encoder

        def loss():
            mean, logvar = e(batch["y"])
            return (sample_latent(mean, logvar, eps) ** 2).sum()

        check(loss, [e])


class TestLossTermGradients:
    """Each objective term as optimized, through the full forward paths."""

    def test_adversarial_g_term(self, setup):
        cfg, state, batch, z, _, fresh = setup
        g, d = state.generator, state.discriminator

        def loss():
            x_tilde = compose_reconstruction(
                g(batch["y"], batch["mask"], z), batch["y"], batch["mask"])
            return g_adv_loss(d(apply_measurement(x_tilde, fresh, 0.0)), HINGE)

        check(loss, [g, d])

    def test_d_term_through_discriminator(self, setup):
        cfg, state, batch, z, _, fresh = setup
        g, d = state.generator, state.discriminator
        with torch.no_grad():
            fake = apply_measurement(compose_reconstruction(
                g(batch["y"], batch["mask"], z), batch["y"], batch["mask"]),
                fresh, 0.0)

        for form in (HINGE, LOGISTIC, LEAST_SQUARES):
            check(lambda: d_adv_loss(d(batch["y"]), d(fake), form), [d])

    def test_encoding_z_term(self, setup):
        cfg, state, batch, z, _, fresh = setup
        g, e = state.generator, state.encoder

        def loss():
            x_tilde = compose_reconstruction(
                g(batch["y"], batch["mask"], z), batch["y"], batch["mask"])
            y_tilde = apply_measurement(x_tilde, fresh, 0.0)
            z_hat, _ = e(y_tilde * (1 - batch["mask"]))
            return encoding_z_loss(z, z_hat)

        check(loss, [g, e])

    def test_encoding_y_terms(self, setup):
        cfg, state, batch, z, eps, fresh = setup
        g, d, e = state.networks()

        def cycle():
            x_tilde = compose_reconstruction(
                g(batch["y"], batch["mask"], z), batch["y"], batch["mask"])
            y_tilde = apply_measurement(x_tilde, fresh, 0.0)
            mean, logvar = e(batch["y"])
            z_cycle = sample_latent(mean, logvar, eps)
            x_hat = compose_reconstruction(g(y_tilde, fresh, z_cycle),
                                           y_tilde, fresh)
            return apply_measurement(x_hat, batch["mask"], 0.0)

        check(lambda: image_sq_error(batch["y"], cycle(), "sum"), [g, e])
        check(lambda: g_adv_loss(d(cycle()), HINGE), [g, e, d])

    def test_combined_objective(self, setup):
        cfg, state, batch, z, eps, fresh = setup
        g, d, e = state.networks()

        def loss():
            x_tilde = compose_reconstruction(
                g(batch["y"], batch["mask"], z), batch["y"], batch["mask"])
            y_tilde = apply_measurement(x_tilde, fresh, 0.0)
            total = g_adv_loss(d(y_tilde), HINGE)
            z_hat, _ = e(y_tilde * (1 - batch["mask"]))
            total = total + 1.0 * encoding_z_loss(z, z_hat)
            mean, logvar = e(batch["y"])
            z_cycle = sample_latent(mean, logvar, eps)
            x_hat = compose_reconstruction(g(y_tilde, fresh, z_cycle),
                                           y_tilde, fresh)
            y_hat = apply_measurement(x_hat, batch["mask"], 0.0)
            total = total + 2.0 * (image_sq_error(batch["y"], y_hat, "sum")
                                   + g_adv_loss(d(y_hat), HINGE))
            return total

        check(loss, [g, e])

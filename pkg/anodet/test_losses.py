"""
Tests for the training objectives, including a float64 gradcheck of the
gradients the optimizers follow.
"""

import math
from dataclasses import replace

import pytest
import torch
from torch.func import functional_call

from anodet.config import NetworkConfig
from anodet.errors import ConfigurationError, NumericError, ShapeError
from anodet.losses import (
    LossBreakdown, check_finite, combined_eg_loss, consistency_loss, critic_objective,
    gradient_penalty, l1_per_sample, reference_bigan_losses, reference_gan_losses,
    reference_wgan_value, wgan_d_loss, wgan_eg_loss,
)
from anodet.models import build_triplet


def first_pixel_critic(x, z):
    """Scores each pair by the first pixel of its image."""
    return x[:, 0, 0, 0], x.flatten(1)


def constant_critic(x, z):
    return torch.full((x.shape[0],), 4.2), x.flatten(1)


class LinearCritic:
    """D(x, z) = w . vec(x); its input gradient has norm ||w|| everywhere."""

    def __init__(self, w):
        self.w = w

    def __call__(self, x, z):
        scores = x.flatten(1) @ self.w
        return scores, scores[:, None]


def _images(first_pixels, side=2):
    x = torch.zeros(len(first_pixels), side, side, 1)
    x[:, 0, 0, 0] = torch.tensor(first_pixels)
    return x


def test_eg_loss_with_first_pixel_critic():
    x, g_z = _images([0.4, 0.6]), _images([0.1, 0.3])
    z = torch.zeros(2, 3)
    assert wgan_eg_loss(first_pixel_critic, x, z, g_z, z).item() == pytest.approx(0.3)
    assert wgan_d_loss(first_pixel_critic, x, z, g_z, z).item() == pytest.approx(-0.3)


def test_eg_loss_single_sample():
    z = torch.zeros(1, 3)
    assert wgan_eg_loss(first_pixel_critic, _images([2.0]), z, _images([-1.0]), z).item() == pytest.approx(3.0)


def test_constant_critic_gives_zero():
    x = torch.randn(3, 2, 2, 1)
    z = torch.zeros(3, 3)
    assert wgan_eg_loss(constant_critic, x, z, x, z).item() == 0.0
    assert wgan_d_loss(constant_critic, x, z, x, z).item() == 0.0


def test_mismatched_batches_raise():
    with pytest.raises(ShapeError):
        wgan_eg_loss(first_pixel_critic, _images([0.1, 0.2]), torch.zeros(2, 3), _images([0.3]), torch.zeros(1, 3))


def test_player_losses_are_antisymmetric():
    cfg = NetworkConfig(image_side=32, channels=3, latent_dim=8, base_width=8)
    models = build_triplet(cfg, seed=1)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 32, 32, 3, generator=g) * 2 - 1
    z = torch.randn(4, 8, generator=g)
    with torch.no_grad():
        args = (models.critic, x, models.encoder(x), models.generator(z), z)
        total = wgan_d_loss(*args) + wgan_eg_loss(*args)
    assert abs(total.item()) < 1e-6


@pytest.mark.parametrize('norm, expected', [(3.0, 40.0), (1.0, 0.0)])
def test_gradient_penalty_linear_critic(norm, expected):
    w = torch.full((8,), norm / math.sqrt(8), dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(5, 2, 4, 1, generator=g, dtype=torch.float64)
    g_z = torch.randn(5, 2, 4, 1, generator=g, dtype=torch.float64)
    z = torch.randn(5, 3, generator=g, dtype=torch.float64)
    gp = gradient_penalty(LinearCritic(w), (x, z), (g_z, -z), coefficient=10.0, generator=g)
    assert gp.item() == pytest.approx(expected, abs=1e-5)


def test_gradient_penalty_zero_coefficient():
    x = torch.randn(2, 2, 2, 1)
    z = torch.randn(2, 3)
    assert gradient_penalty(first_pixel_critic, (x, z), (x, z), coefficient=0.0).item() == 0.0


def test_gradient_penalty_checks_inputs():
    x = torch.randn(2, 2, 2, 1)
    z = torch.randn(2, 3)
    with pytest.raises(ShapeError):
        gradient_penalty(first_pixel_critic, (x, z), (torch.randn(3, 2, 2, 1), z))
    with pytest.raises(ConfigurationError):
        gradient_penalty(first_pixel_critic, (x, z), (x, z), coefficient=-1.0)


def test_gradient_penalty_reports_bad_row():
    w = torch.ones(4)

    def exploding(x, z):
        scores = x.flatten(1) @ w
        return scores * torch.tensor([1.0, float('inf')]), scores[:, None]

    x = torch.randn(2, 2, 2, 1)
    z = torch.randn(2, 3)
    with pytest.raises(NumericError) as excinfo:
        gradient_penalty(exploding, (x, z), (x, z))
    assert excinfo.value.row == 1


def test_critic_objective_adds_penalty():
    w = torch.full((8,), 3.0 / math.sqrt(8))
    x, g_z = torch.randn(3, 2, 4, 1), torch.randn(3, 2, 4, 1)
    z = torch.randn(3, 2)
    objective, gp = critic_objective(LinearCritic(w), x, z, g_z, z, coefficient=10.0)
    l_d = wgan_d_loss(LinearCritic(w), x, z, g_z, z)
    assert gp.item() == pytest.approx(40.0, abs=1e-4)
    assert objective.item() == pytest.approx(l_d.item() + gp.item(), abs=1e-4)


def test_consistency_exact_inverses():
    identity = lambda t: t
    l_c, l_r, l_r_prime = consistency_loss(identity, identity, torch.randn(2, 4, 4, 3), torch.randn(2, 6))
    assert (l_c.item(), l_r.item(), l_r_prime.item()) == (0.0, 0.0, 0.0)


def test_consistency_sums_per_sample():
    x = torch.rand(2, 64, 64, 3, dtype=torch.float64)
    identity = lambda t: t
    shifted = lambda t: t - 0.1
    _, l_r, _ = consistency_loss(identity, shifted, x, x)
    assert l_r.item() == pytest.approx(1228.8)


def test_consistency_latent_term():
    offset = torch.zeros(64)
    offset[7] = 1.0
    encoder = lambda t: t + offset
    generator = lambda t: t
    z = torch.randn(3, 64)
    l_c, l_r, l_r_prime = consistency_loss(encoder, generator, torch.randn(3, 64), z)
    assert l_r_prime.item() == pytest.approx(1.0)
    assert l_c.item() == pytest.approx(l_r.item() + l_r_prime.item())


def test_l1_per_sample_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_per_sample(torch.zeros(2, 3), torch.zeros(2, 4))


def test_blend_endpoints_are_exact():
    l_eg, l_c = torch.tensor(-3.7), torch.tensor(812.5)
    assert combined_eg_loss(l_eg, l_c, 0.0) is l_eg
    assert combined_eg_loss(l_eg, l_c, 1.0) is l_c
    assert combined_eg_loss(2.0, 1000.0, 1e-4) == pytest.approx(2.0998)


@pytest.mark.parametrize('alpha', [-0.01, 1.01])
def test_blend_rejects_alpha_out_of_range(alpha):
    with pytest.raises(ConfigurationError):
        combined_eg_loss(1.0, 1.0, alpha)


def test_check_finite():
    good = LossBreakdown(l_eg=0.1, l_d=-0.1, l_r=3.0, l_r_prime=1.0, l_c=4.0, l_star_eg=0.1,
                         gp=0.5, alpha=1e-4, gp_coefficient=10.0)
    check_finite(good)
    record = good.as_record(step=20)
    assert record['step'] == 20 and record['l_c'] == 4.0

    bad = replace(good, l_r=float('nan'))
    with pytest.raises(NumericError) as excinfo:
        check_finite(bad)
    assert excinfo.value.breakdown is bad


def test_reference_gan_losses():
    half = torch.full((4,), 0.5)
    assert reference_gan_losses(half, half).value.item() == pytest.approx(2 * math.log(0.5))
    perfect = reference_gan_losses(torch.ones(4), torch.zeros(4))
    assert perfect.value.item() == pytest.approx(0.0, abs=1e-5)
    assert perfect.d_loss.item() == pytest.approx(-perfect.value.item())


def test_reference_bigan_losses():
    x, z = torch.randn(3, 2, 2, 1), torch.randn(3, 4)
    half_critic = lambda x, z: torch.full((x.shape[0],), 0.5)
    value = reference_bigan_losses(half_critic, x, z, x, z).value
    assert value.item() == pytest.approx(2 * math.log(0.5))
    assert reference_wgan_value(torch.tensor([2.0, 4.0]), torch.tensor([1.0])).item() == 2.0


def _gradcheck_parameters(loss_fn, named_params):
    """float64 gradcheck of ``loss_fn({name: tensor})`` with respect to every named parameter."""
    names = list(named_params)
    inputs = tuple(named_params[n].detach().clone().requires_grad_(True) for n in names)
    return torch.autograd.gradcheck(lambda *tensors: loss_fn(dict(zip(names, tensors))), inputs,
                                    eps=1e-8, atol=1e-4, rtol=1e-3, fast_mode=True)


def _bound(module, params, prefix):
    """``module`` as a function evaluated with ``params[prefix + name]``."""
    own = {name: params[prefix + name] for name, _ in module.named_parameters()}
    return lambda *args: functional_call(module, own, args)


def _small_float64_problem():
    cfg = NetworkConfig(image_side=32, channels=1, latent_dim=4, base_width=8)
    models = build_triplet(cfg, seed=0).double()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 32, 32, 1, generator=g, dtype=torch.float64) * 2 - 1
    z = torch.randn(2, 4, generator=g, dtype=torch.float64)
    u = torch.rand(2, generator=g, dtype=torch.float64)
    return models, x, z, u


def test_eg_objective_gradients_pass_gradcheck():
    models, x, z, _ = _small_float64_problem()
    E, G, D = models.encoder, models.generator, models.critic

    def loss(params):
        encode, generate = _bound(E, params, 'encoder.'), _bound(G, params, 'generator.')
        l_eg = wgan_eg_loss(D, x, encode(x), generate(z), z)
        l_c, _, _ = consistency_loss(encode, generate, x, z)
        return combined_eg_loss(l_eg, l_c, 0.5)

    named = {f"encoder.{n}": p for n, p in E.named_parameters()}
    named.update({f"generator.{n}": p for n, p in G.named_parameters()})
    assert _gradcheck_parameters(loss, named)


def test_critic_objective_gradients_pass_gradcheck():
    models, x, z, u = _small_float64_problem()
    E, G, D = models.encoder, models.generator, models.critic
    with torch.no_grad():
        z_x, g_z = E(x), G(z)

    def loss(params):
        critic = _bound(D, params, 'critic.')
        return wgan_d_loss(critic, x, z_x, g_z, z) + gradient_penalty(critic, (x, z_x), (g_z, z), 10.0, u=u)

    assert _gradcheck_parameters(loss, {f"critic.{n}": p for n, p in D.named_parameters()})

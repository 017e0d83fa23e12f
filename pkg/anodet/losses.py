"""
Training objectives.

Wasserstein BiGAN player losses, the gradient penalty on interpolated
(image, latent) pairs, the cycle consistency regularizer and the alpha blend
of the two E,G objectives. The log-loss GAN/BiGAN forms at the bottom are
reference values only; training never uses them.

Every L1 norm is summed over a sample's elements and averaged over the batch.
"""

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, NamedTuple, Optional, Tuple, Union

import torch

from anodet.errors import ConfigurationError, NumericError, ShapeError

Scalar = Union[float, torch.Tensor]
CriticFn = Callable[[torch.Tensor, torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]
MapFn = Callable[[torch.Tensor], torch.Tensor]

LOG_EPS = 1e-7


@dataclass
class LossBreakdown:
    """Loss values measured at one E,G half-step (or a failed critic half-step)."""

    l_eg: float
    l_d: float
    l_r: float
    l_r_prime: float
    l_c: float
    l_star_eg: float
    gp: float
    alpha: float
    gp_coefficient: float

    def as_record(self, step: int) -> Dict[str, float]:
        return {'step': step, **asdict(self)}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())

    @classmethod
    def critic_only(cls, l_d: float, gp: float, alpha: float, gp_coefficient: float) -> 'LossBreakdown':
        """Breakdown of a critic half-step; the E,G terms were never measured and are NaN."""
        nan = float('nan')
        return cls(l_eg=nan, l_d=l_d, l_r=nan, l_r_prime=nan, l_c=nan, l_star_eg=nan,
                   gp=gp, alpha=alpha, gp_coefficient=gp_coefficient)


def l1_per_sample(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Summed absolute difference per batch row."""
    if a.shape != b.shape:
        raise ShapeError('L1 operands', tuple(a.shape), tuple(b.shape))
    return (a - b).abs().flatten(1).sum(dim=1)


def _check_same_batch(*tensors: torch.Tensor):
    sizes = [t.shape[0] for t in tensors]
    if len(set(sizes)) != 1:
        raise ShapeError('batch sizes', (sizes[0],) * len(sizes), tuple(sizes))


def wgan_eg_loss(critic: CriticFn, x: torch.Tensor, z_x: torch.Tensor,
                 g_z: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """mean D(x, E(x)) - mean D(G(z), z)."""
    _check_same_batch(x, z_x, g_z, z)
    real_scores, _ = critic(x, z_x)
    fake_scores, _ = critic(g_z, z)
    return real_scores.mean() - fake_scores.mean()


def wgan_d_loss(critic: CriticFn, x: torch.Tensor, z_x: torch.Tensor,
                g_z: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """The critic's loss, the exact negation of ``wgan_eg_loss``."""
    return -wgan_eg_loss(critic, x, z_x, g_z, z)


def gradient_penalty(critic: CriticFn,
                     real_pair: Tuple[torch.Tensor, torch.Tensor],
                     fake_pair: Tuple[torch.Tensor, torch.Tensor],
                     coefficient: float = 10.0,
                     generator: Optional[torch.Generator] = None,
                     u: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    coefficient * mean (||grad D(x~, z~)||_2 - 1)^2 on random interpolates.

    One u ~ U(0, 1) per batch row mixes both members of the pair. The norm is
    taken over the concatenated image and latent gradients of each row.
    """
    x, z_x = real_pair
    g_z, z = fake_pair
    if x.shape != g_z.shape:
        raise ShapeError('gradient penalty images', tuple(x.shape), tuple(g_z.shape))
    if z_x.shape != z.shape:
        raise ShapeError('gradient penalty latents', tuple(z_x.shape), tuple(z.shape))
    if coefficient < 0:
        raise ConfigurationError('gp_coefficient', f"must be >= 0, got {coefficient}")
    if coefficient == 0:
        return x.new_zeros(())

    n = x.shape[0]
    if u is None:
        u = torch.rand(n, generator=generator, dtype=x.dtype, device=x.device)
    u_x = u.view(n, *([1] * (x.dim() - 1)))
    u_z = u.view(n, 1)
    x_hat = u_x * x + (1 - u_x) * g_z
    z_hat = u_z * z_x + (1 - u_z) * z
    if not x_hat.requires_grad:
        x_hat.requires_grad_(True)
    if not z_hat.requires_grad:
        z_hat.requires_grad_(True)

    scores, _ = critic(x_hat, z_hat)
    grad_x, grad_z = torch.autograd.grad(
        outputs=scores.sum(), inputs=[x_hat, z_hat], create_graph=True, allow_unused=True
    )
    if grad_x is None:
        grad_x = torch.zeros_like(x_hat)
    if grad_z is None:
        grad_z = torch.zeros_like(z_hat)

    gradients = torch.cat([grad_x.reshape(n, -1), grad_z.reshape(n, -1)], dim=1)
    norms = gradients.norm(2, dim=1)
    bad = ~torch.isfinite(norms)
    if bad.any():
        raise NumericError("non-finite critic gradient in penalty", row=int(bad.nonzero()[0, 0]))
    return coefficient * ((norms - 1) ** 2).mean()


def critic_objective(critic: CriticFn, x: torch.Tensor, z_x: torch.Tensor, g_z: torch.Tensor,
                     z: torch.Tensor, coefficient: float = 10.0,
                     generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """(l_d + gp, gp) for one critic update."""
    gp = gradient_penalty(critic, (x, z_x), (g_z, z), coefficient, generator=generator)
    return wgan_d_loss(critic, x, z_x, g_z, z) + gp, gp


def consistency_loss(encoder: MapFn, generator: MapFn, x: torch.Tensor,
                     z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(l_c, l_r, l_r') with l_r = ||x - G(E(x))||_1 and l_r' = ||z - E(G(z))||_1."""
    l_r = l1_per_sample(x, generator(encoder(x))).mean()
    l_r_prime = l1_per_sample(z, encoder(generator(z))).mean()
    return l_r + l_r_prime, l_r, l_r_prime


def combined_eg_loss(l_eg: Scalar, l_c: Scalar, alpha: float) -> Scalar:
    """(1 - alpha) * l_eg + alpha * l_c; the endpoints return one term untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError('alpha', f"must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return l_eg
    if alpha == 1.0:
        return l_c
    return (1 - alpha) * l_eg + alpha * l_c


def check_finite(breakdown: LossBreakdown):
    if not breakdown.is_finite():
        raise NumericError("non-finite training loss", breakdown=breakdown)


class ReferenceLosses(NamedTuple):
    value: torch.Tensor
    d_loss: torch.Tensor
    g_loss: torch.Tensor


def reference_gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor,
                         eps: float = LOG_EPS) -> ReferenceLosses:
    """
    Log-loss minimax value E[log D(real)] + E[log(1 - D(fake))] from critic
    probabilities, with the players' losses (D maximizes, G minimizes).
    """
    real = d_real.clamp(eps, 1 - eps)
    fake = d_fake.clamp(eps, 1 - eps)
    value = torch.log(real).mean() + torch.log(1 - fake).mean()
    return ReferenceLosses(value=value, d_loss=-value, g_loss=torch.log(1 - fake).mean())


def reference_bigan_losses(critic: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                           x: torch.Tensor, z_x: torch.Tensor, g_z: torch.Tensor, z: torch.Tensor,
                           eps: float = LOG_EPS) -> ReferenceLosses:
    """The same log-loss game played on (x, E(x)) versus (G(z), z) pairs."""
    _check_same_batch(x, z_x, g_z, z)
    return reference_gan_losses(critic(x, z_x), critic(g_z, z), eps)


def reference_wgan_value(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Wasserstein critic value E[D(real)] - E[D(fake)]."""
    return d_real.mean() - d_fake.mean()

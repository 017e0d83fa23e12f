"""
Encoder, generator and critic networks.

All three are residual convolutional networks without batch-coupling
normalization, so every output row depends only on its own input row.
Images travel channels-last, ``(N, H, W, C)`` in [-1, 1]; latents are
``(N, n)``.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from anodet.config import NetworkConfig, validate_config
from anodet.errors import ShapeError

logger = logging.getLogger(__name__)

FEATURE_TAP = 'joint.hidden'


def _to_channels_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _to_channels_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


class ResidualDown(nn.Module):
    """Pre-activation residual block that halves the spatial side."""

    def __init__(self, in_width: int, out_width: int, slope: float):
        super().__init__()
        self.slope = slope
        self.conv1 = nn.Conv2d(in_width, out_width, 3, padding=1)
        self.conv2 = nn.Conv2d(out_width, out_width, 3, padding=1)
        self.skip = nn.Conv2d(in_width, out_width, 1) if in_width != out_width else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.leaky_relu(x, self.slope))
        h = self.conv2(F.leaky_relu(h, self.slope))
        return F.avg_pool2d(h + self.skip(x), 2)


class ResidualUp(nn.Module):
    """Pre-activation residual block that doubles the spatial side (bilinear)."""

    def __init__(self, in_width: int, out_width: int, slope: float):
        super().__init__()
        self.slope = slope
        self.conv1 = nn.Conv2d(in_width, out_width, 3, padding=1)
        self.conv2 = nn.Conv2d(out_width, out_width, 3, padding=1)
        self.skip = nn.Conv2d(in_width, out_width, 1) if in_width != out_width else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)
        h = self.conv1(F.leaky_relu(x, self.slope))
        h = self.conv2(F.leaky_relu(h, self.slope))
        return h + self.skip(x)


class _ImageTrunk(nn.Module):
    """Stem convolution plus residual downsampling down to a 4x4 map."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = cfg.widths()
        self.slope = cfg.leaky_slope
        self.stem = nn.Conv2d(cfg.channels, widths[0], 3, padding=1)
        self.blocks = nn.Sequential(*[
            ResidualDown(widths[i], widths[i + 1], cfg.leaky_slope) for i in range(cfg.stages)
        ])
        self.out_features = widths[-1] * 4 * 4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(self.stem(_to_channels_first(x)))
        return torch.flatten(F.leaky_relu(h, self.slope), 1)


class _Network(nn.Module):
    """Shared bookkeeping for the three networks."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg

    def architecture(self) -> List[str]:
        """Layer list: one line per parameterized leaf module."""
        layers = []
        for name, module in self.named_modules():
            if name and not list(module.children()) and list(module.parameters(recurse=False)):
                shapes = ', '.join(str(tuple(p.shape)) for p in module.parameters(recurse=False))
                layers.append(f"{name}: {module.__class__.__name__} [{shapes}]")
        return layers

    def _check_image(self, x: torch.Tensor, what: str):
        expected = (self.cfg.image_side, self.cfg.image_side, self.cfg.channels)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(what, ('N',) + expected, tuple(x.shape))

    def _check_latent(self, z: torch.Tensor, what: str):
        if z.dim() != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ShapeError(what, ('N', self.cfg.latent_dim), tuple(z.shape))


class Encoder(_Network):
    """E: X -> Z. Downsampling residual trunk and a linear (unbounded) head."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg)
        self.trunk = _ImageTrunk(cfg)
        self.head = nn.Linear(self.trunk.out_features, cfg.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x, 'encoder input')
        return self.head(self.trunk(x))


class Generator(_Network):
    """G: Z -> X. Linear stem, bilinear residual upsampling, tanh output."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg)
        widths = cfg.widths()[::-1]
        self.slope = cfg.leaky_slope
        self.stem = nn.Linear(cfg.latent_dim, widths[0] * 4 * 4)
        self.blocks = nn.Sequential(*[
            ResidualUp(widths[i], widths[i + 1], cfg.leaky_slope) for i in range(cfg.stages)
        ])
        self.to_image = nn.Conv2d(widths[-1], cfg.channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        self._check_latent(z, 'generator input')
        h = self.stem(z).view(z.shape[0], -1, 4, 4)
        h = self.blocks(h)
        h = self.to_image(F.leaky_relu(h, self.slope))
        return _to_channels_last(torch.tanh(h))


class Critic(_Network):
    """
    D: X x Z -> R.

    An image trunk and a fully-connected latent branch are concatenated into a
    joint head. The last hidden joint layer is the feature tap f_D; the scalar
    output has no bounding activation.
    """

    feature_tap_name = FEATURE_TAP

    def __init__(self, cfg: NetworkConfig):
        super().__init__(cfg)
        d = cfg.feature_dim
        self.slope = cfg.leaky_slope
        self.image_trunk = _ImageTrunk(cfg)
        self.image_proj = nn.Linear(self.image_trunk.out_features, d)
        self.latent_branch = nn.Sequential(
            nn.Linear(cfg.latent_dim, d),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.Linear(d, d),
        )
        self.joint = nn.ModuleDict({
            'hidden': nn.Linear(2 * d, d),
            'score': nn.Linear(d, 1),
        })

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        self._check_image(x, 'critic image input')
        self._check_latent(z, 'critic latent input')
        if x.shape[0] != z.shape[0]:
            raise ShapeError('critic batch', (x.shape[0],), (z.shape[0],))
        hx = F.leaky_relu(self.image_proj(self.image_trunk(x)), self.slope)
        hz = F.leaky_relu(self.latent_branch(z), self.slope)
        features = F.leaky_relu(self.joint['hidden'](torch.cat([hx, hz], dim=1)), self.slope)
        scores = self.joint['score'](features).squeeze(1)
        return scores, features


def _seeded_build(module_cls, cfg: NetworkConfig, seed: int):
    cfg = validate_config(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = module_cls(cfg)
    logger.debug(f"Built {module_cls.__name__} ({sum(p.numel() for p in module.parameters())} parameters)")
    return module


def build_encoder(cfg: NetworkConfig, seed: int = 0) -> Encoder:
    return _seeded_build(Encoder, cfg, seed)


def build_generator(cfg: NetworkConfig, seed: int = 0) -> Generator:
    return _seeded_build(Generator, cfg, seed)


def build_critic(cfg: NetworkConfig, seed: int = 0) -> Critic:
    return _seeded_build(Critic, cfg, seed)


def encode(encoder: Encoder, x: torch.Tensor) -> torch.Tensor:
    return encoder(x)


def generate(generator: Generator, z: torch.Tensor) -> torch.Tensor:
    return generator(z)


def criticize(critic: Critic, x: torch.Tensor, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return critic(x, z)


@dataclass
class ModelTriplet:
    """The three networks trained together."""

    encoder: Encoder
    generator: Generator
    critic: Critic

    @property
    def config(self) -> NetworkConfig:
        return self.encoder.cfg

    def modules(self) -> Iterator[Tuple[str, nn.Module]]:
        yield 'encoder', self.encoder
        yield 'generator', self.generator
        yield 'critic', self.critic

    def parameters_of(self, name: str) -> List[nn.Parameter]:
        modules = dict(self.modules())
        if name not in modules:
            raise KeyError(f"no network named '{name}', expected one of {sorted(modules)}")
        return list(modules[name].parameters())

    def eg_parameters(self) -> List[nn.Parameter]:
        return self.parameters_of('encoder') + self.parameters_of('generator')

    def to(self, device=None, dtype=None) -> 'ModelTriplet':
        for _, module in self.modules():
            module.to(device=device, dtype=dtype)
        return self

    def double(self) -> 'ModelTriplet':
        return self.to(dtype=torch.float64)

    def eval(self) -> 'ModelTriplet':
        for _, module in self.modules():
            module.eval()
        return self

    def state_dict(self) -> Dict[str, Dict[str, torch.Tensor]]:
        return {name: module.state_dict() for name, module in self.modules()}

    def load_state_dict(self, state: Dict[str, Dict[str, torch.Tensor]]):
        for name, module in self.modules():
            module.load_state_dict(state[name])


def build_triplet(cfg: NetworkConfig, seed: int = 0) -> ModelTriplet:
    """Build E, G and D from one seed (each network gets its own derived seed)."""
    return ModelTriplet(
        encoder=build_encoder(cfg, seed),
        generator=build_generator(cfg, seed + 1),
        critic=build_critic(cfg, seed + 2),
    )

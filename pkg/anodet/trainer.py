"""
Alternating adversarial training of (E, G) against D.

Each step performs ``critic_steps`` critic updates minimizing l_d + gp with E
and G frozen, then one E,G update minimizing the alpha-blended objective with
D frozen. Every half-step draws a fresh latent batch. All randomness comes
from streams held in ``TrainState`` so a checkpointed run resumes exactly.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol, Tuple

import numpy as np
import torch
from tqdm import tqdm

from anodet.config import NetworkConfig, TrainConfig
from anodet.errors import ConfigurationError, NumericError, ShapeError
from anodet.losses import (
    LossBreakdown, check_finite, combined_eg_loss, consistency_loss,
    critic_objective, wgan_d_loss, wgan_eg_loss,
)
from anodet.models import ModelTriplet, build_triplet
from anodet.settings import log_run_event

logger = logging.getLogger(__name__)

EMA_DECAY = 0.98


class BatchSource(Protocol):
    def __len__(self) -> int: ...

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray: ...


class TrainSink(Protocol):
    def log(self, step: int, breakdown: LossBreakdown): ...

    def checkpoint(self, state: 'TrainState', final: bool = False): ...


@dataclass
class TrainState:
    """Everything needed to continue training bit-for-bit."""

    step: int
    models: ModelTriplet
    opt_eg: torch.optim.Adam
    opt_d: torch.optim.Adam
    latent_stream: torch.Generator
    data_stream: np.random.Generator
    running: Dict[str, float] = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {
            'step': self.step,
            'models': self.models.state_dict(),
            'opt_eg': self.opt_eg.state_dict(),
            'opt_d': self.opt_d.state_dict(),
            'latent_stream': self.latent_stream.get_state(),
            'data_stream': json.dumps(self.data_stream.bit_generator.state),
            'running': dict(self.running),
        }

    def load_state_dict(self, state: dict):
        self.step = int(state['step'])
        self.models.load_state_dict(state['models'])
        self.opt_eg.load_state_dict(state['opt_eg'])
        self.opt_d.load_state_dict(state['opt_d'])
        self.latent_stream.set_state(state['latent_stream'])
        self.data_stream.bit_generator.state = json.loads(state['data_stream'])
        self.running = dict(state['running'])


def init_state(net_cfg: NetworkConfig, cfg: TrainConfig, device: str = 'cpu',
               dtype: torch.dtype = torch.float32) -> TrainState:
    """Fresh networks, optimizers and random streams, all derived from ``cfg.seed``."""
    if net_cfg.latent_dim != cfg.latent_dim:
        raise ConfigurationError('latent_dim', f"network uses {net_cfg.latent_dim}, training uses {cfg.latent_dim}")
    models = build_triplet(net_cfg, cfg.seed).to(device=device, dtype=dtype)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    latent_stream = torch.Generator(device=device)
    latent_stream.manual_seed(cfg.seed)
    return TrainState(
        step=0,
        models=models,
        opt_eg=torch.optim.Adam(models.eg_parameters(), lr=cfg.learning_rate, betas=betas),
        opt_d=torch.optim.Adam(models.parameters_of('critic'), lr=cfg.learning_rate, betas=betas),
        latent_stream=latent_stream,
        data_stream=np.random.default_rng(cfg.seed),
    )


def sample_latent(count: int, dim: int, stream: torch.Generator,
                  dtype: torch.dtype = torch.float32, device=None) -> torch.Tensor:
    """i.i.d. standard normal latents drawn from ``stream``."""
    if count < 1 or dim < 1:
        raise ConfigurationError('latent', f"count and dim must be >= 1, got ({count}, {dim})")
    return torch.randn(count, dim, generator=stream, dtype=dtype, device=device or stream.device)


def _set_trainable(module: torch.nn.Module, trainable: bool):
    for p in module.parameters():
        p.requires_grad_(trainable)


def _critic_step(state: TrainState, x: torch.Tensor, cfg: TrainConfig) -> float:
    E, G, D = state.models.encoder, state.models.generator, state.models.critic
    z = sample_latent(x.shape[0], cfg.latent_dim, state.latent_stream, x.dtype, x.device)
    with torch.no_grad():
        z_x = E(x)
        g_z = G(z)
    try:
        objective, gp = critic_objective(D, x, z_x, g_z, z, cfg.gp_coefficient, generator=state.latent_stream)
    except NumericError as e:
        with torch.no_grad():
            l_d = wgan_d_loss(D, x, z_x, g_z, z).item()
        breakdown = LossBreakdown.critic_only(l_d, float('nan'), cfg.alpha, cfg.gp_coefficient)
        raise NumericError("critic gradient penalty failed", row=e.row, breakdown=breakdown) from e
    if not torch.isfinite(objective):
        breakdown = LossBreakdown.critic_only((objective - gp).item(), gp.item(), cfg.alpha, cfg.gp_coefficient)
        raise NumericError("non-finite critic objective", breakdown=breakdown)
    state.opt_d.zero_grad(set_to_none=True)
    objective.backward()
    state.opt_d.step()
    return gp.item()


def _eg_step(state: TrainState, x: torch.Tensor, cfg: TrainConfig) -> Tuple[float, ...]:
    E, G, D = state.models.encoder, state.models.generator, state.models.critic
    z = sample_latent(x.shape[0], cfg.latent_dim, state.latent_stream, x.dtype, x.device)
    _set_trainable(D, False)
    try:
        with torch.set_grad_enabled(cfg.alpha < 1.0):
            l_eg = wgan_eg_loss(D, x, E(x), G(z), z)
        with torch.set_grad_enabled(cfg.alpha > 0.0):
            l_c, l_r, l_r_prime = consistency_loss(E, G, x, z)
        objective = combined_eg_loss(l_eg, l_c, cfg.alpha)
        if not torch.isfinite(objective):
            return l_eg.item(), l_c.item(), l_r.item(), l_r_prime.item(), objective.item()
        state.opt_eg.zero_grad(set_to_none=True)
        objective.backward()
        state.opt_eg.step()
    finally:
        _set_trainable(D, True)
    return l_eg.item(), l_c.item(), l_r.item(), l_r_prime.item(), objective.item()


def train_step(state: TrainState, x, cfg: TrainConfig) -> Tuple[TrainState, LossBreakdown]:
    """One alternation: critic update(s), then one E,G update."""
    param = next(state.models.encoder.parameters())
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(param.device, param.dtype)
    if x.shape[0] < 1:
        raise ShapeError('training batch', ('N>=1',), tuple(x.shape))

    gp = 0.0
    for _ in range(cfg.critic_steps):
        gp = _critic_step(state, x, cfg)
    l_eg, l_c, l_r, l_r_prime, l_star = _eg_step(state, x, cfg)

    breakdown = LossBreakdown(l_eg=l_eg, l_d=-l_eg, l_r=l_r, l_r_prime=l_r_prime, l_c=l_c,
                              l_star_eg=l_star, gp=gp, alpha=cfg.alpha, gp_coefficient=cfg.gp_coefficient)
    check_finite(breakdown)

    state.step += 1
    for key in ('l_eg', 'l_d', 'gp', 'l_r', 'l_r_prime', 'l_star_eg'):
        value = getattr(breakdown, key)
        previous = state.running.get(key)
        state.running[key] = value if previous is None else EMA_DECAY * previous + (1 - EMA_DECAY) * value
    return state, breakdown


def train(dataset: BatchSource, cfg: TrainConfig, net_cfg: NetworkConfig,
          sink: Optional[TrainSink] = None, state: Optional[TrainState] = None,
          device: str = 'cpu') -> TrainState:
    """
    Run train steps until ``cfg.total_steps``. Pass ``state`` to resume a
    restored checkpoint; the run continues from ``state.step``.
    """
    if cfg.total_steps < 1:
        raise ConfigurationError('total_steps', f"must be >= 1, got {cfg.total_steps}")
    if len(dataset) == 0:
        raise ConfigurationError('dataset', "training set is empty")
    if state is None:
        state = init_state(net_cfg, cfg, device)
    else:
        log_run_event("RESUME", f"continuing from step {state.step}")

    log_run_event("TRAIN_START", f"variant={cfg.variant} alpha={cfg.alpha} steps={cfg.total_steps} seed={cfg.seed}")
    progress = tqdm(range(state.step, cfg.total_steps), initial=state.step, total=cfg.total_steps,
                    desc=f"train[{cfg.variant}]", disable=None)
    for _ in progress:
        x = dataset.sample(cfg.batch_size, state.data_stream)
        try:
            state, breakdown = train_step(state, x, cfg)
        except NumericError as e:
            log_run_event("DIVERGED", f"step {state.step + 1}: {e}")
            raise
        if sink is not None and state.step % cfg.log_every == 0:
            sink.log(state.step, breakdown)
        if sink is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            sink.checkpoint(state)
        progress.set_postfix({k: f"{v:.3g}" for k, v in state.running.items() if k in ('l_eg', 'l_r', 'gp')})

    if sink is not None:
        sink.checkpoint(state, final=True)
    log_run_event("TRAIN_FINISH", f"step {state.step}")
    return state

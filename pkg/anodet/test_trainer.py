"""
Tests for the alternating training loop, its random streams and resumption.
"""

import copy
import math

import numpy as np
import pytest
import torch

from anodet.checkpoint import RunSink, load_checkpoint, restore_state
from anodet.config import ExperimentConfig, TrainConfig, parse_config
from anodet.data import BatchSampler
from anodet.errors import ConfigurationError, NumericError
from anodet.losses import LossBreakdown, wgan_eg_loss
from anodet.synthetic import SynthSpec, generate_synthetic_corpus
from anodet.trainer import _critic_step, _eg_step, init_state, sample_latent, train, train_step


def tiny_experiment(**overrides) -> ExperimentConfig:
    values = {
        'category': 'synthetic', 'kind': 'texture', 'channels': 1,
        'texture_side': 32, 'patch_side': 32, 'latent_dim': 4, 'base_width': 8,
        'batch_size': 4, 'total_steps': 4, 'checkpoint_every': 0, 'log_every': 1,
    }
    values.update(overrides)
    return parse_config(ExperimentConfig, values)


def tiny_sampler(cfg: ExperimentConfig, n: int = 8) -> BatchSampler:
    spec = SynthSpec(n_train=n, n_test_normal=0, n_test_anomalous=0, image_side=32, channels=1)
    train_samples, _ = generate_synthetic_corpus(0, spec)
    return BatchSampler(train_samples, cfg.category_spec())


class RecordingSink:
    def __init__(self):
        self.logged = []
        self.checkpoints = []

    def log(self, step, breakdown):
        self.logged.append((step, breakdown))

    def checkpoint(self, state, final=False):
        self.checkpoints.append((state.step, final))


class ListSource:
    def __init__(self, batch):
        self.batch = batch

    def __len__(self):
        return len(self.batch)

    def sample(self, batch_size, rng):
        return self.batch


def _parameters(state):
    return [p.detach().clone() for _, m in state.models.modules() for p in m.parameters()]


def _same_parameters(a, b):
    return all(torch.equal(pa, pb) for pa, pb in zip(_parameters(a), _parameters(b)))


def test_sample_latent_shape_and_statistics():
    stream = torch.Generator().manual_seed(0)
    assert sample_latent(4, 64, stream).shape == (4, 64)
    z = sample_latent(1000, 100, stream, dtype=torch.float64)
    assert abs(z.mean().item()) < 0.02
    assert abs(z.var().item() - 1.0) < 0.03


def test_sample_latent_is_deterministic():
    a = sample_latent(3, 5, torch.Generator().manual_seed(7))
    b = sample_latent(3, 5, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)
    with pytest.raises(ConfigurationError):
        sample_latent(0, 5, torch.Generator())


def test_train_step_returns_consistent_breakdown():
    cfg = tiny_experiment()
    state = init_state(cfg.network_config(), cfg.train_config())
    x = tiny_sampler(cfg).sample(4, state.data_stream)
    state, breakdown = train_step(state, x, cfg.train_config())
    assert state.step == 1
    assert breakdown.l_d == -breakdown.l_eg
    assert breakdown.l_c == pytest.approx(breakdown.l_r + breakdown.l_r_prime, rel=1e-5)
    expected = (1 - cfg.alpha) * breakdown.l_eg + cfg.alpha * breakdown.l_c
    assert breakdown.l_star_eg == pytest.approx(expected, rel=1e-5, abs=1e-6)
    assert breakdown.gp >= 0.0
    assert set(state.running) == {'l_eg', 'l_d', 'gp', 'l_r', 'l_r_prime', 'l_star_eg'}


def test_half_steps_only_touch_their_own_networks():
    cfg = tiny_experiment()
    train_cfg = cfg.train_config()
    state = init_state(cfg.network_config(), train_cfg)
    x = torch.from_numpy(tiny_sampler(cfg).sample(4, state.data_stream))

    before = copy.deepcopy(state.models)
    _critic_step(state, x, train_cfg)
    for name in ('encoder', 'generator'):
        for a, b in zip(before.parameters_of(name), state.models.parameters_of(name)):
            assert torch.equal(a, b)
    assert any(not torch.equal(a, b) for a, b in zip(before.parameters_of('critic'),
                                                      state.models.parameters_of('critic')))

    before = copy.deepcopy(state.models)
    _eg_step(state, x, train_cfg)
    for a, b in zip(before.parameters_of('critic'), state.models.parameters_of('critic')):
        assert torch.equal(a, b)
    assert any(not torch.equal(a, b) for a, b in zip(before.eg_parameters(), state.models.eg_parameters()))
    assert all(p.requires_grad for p in state.models.parameters_of('critic'))


def test_double_autoencoder_step_ignores_the_critic():
    cfg = tiny_experiment(alpha=1.0)
    train_cfg = cfg.train_config()
    a = init_state(cfg.network_config(), train_cfg)
    b = init_state(cfg.network_config(), train_cfg)
    with torch.no_grad():
        for p in b.models.parameters_of('critic'):
            p.mul_(-3.0)
    x = torch.from_numpy(tiny_sampler(cfg).sample(4, np.random.default_rng(0)))
    _eg_step(a, x, train_cfg)
    _eg_step(b, x, train_cfg)
    for pa, pb in zip(a.models.eg_parameters(), b.models.eg_parameters()):
        assert torch.equal(pa, pb)
    assert all(p.grad is None for p in b.models.parameters_of('critic'))


def test_egbad_step_follows_the_adversarial_loss_only():
    cfg = tiny_experiment(alpha=0.0)
    train_cfg = cfg.train_config()
    a = init_state(cfg.network_config(), train_cfg)
    b = init_state(cfg.network_config(), train_cfg)
    x = torch.from_numpy(tiny_sampler(cfg).sample(4, np.random.default_rng(0)))
    _eg_step(a, x, train_cfg)

    E, G, D = b.models.encoder, b.models.generator, b.models.critic
    z = sample_latent(4, train_cfg.latent_dim, b.latent_stream)
    loss = wgan_eg_loss(D, x, E(x), G(z), z)
    b.opt_eg.zero_grad(set_to_none=True)
    loss.backward()
    b.opt_eg.step()
    for pa, pb in zip(a.models.eg_parameters(), b.models.eg_parameters()):
        assert torch.equal(pa, pb)


def test_same_seed_runs_are_identical():
    cfg = tiny_experiment()
    first = train(tiny_sampler(cfg), cfg.train_config(), cfg.network_config())
    second = train(tiny_sampler(cfg), cfg.train_config(), cfg.network_config())
    assert _same_parameters(first, second)
    other = tiny_experiment(seed=1)
    third = train(tiny_sampler(other), other.train_config(), other.network_config())
    assert not _same_parameters(first, third)


def test_resumed_run_matches_uninterrupted_run(tmp_path):
    short = tiny_experiment(total_steps=3, checkpoint_every=3, output_dir=tmp_path / 'run')
    sink = RunSink(short.run_dir(), short)
    train(tiny_sampler(short), short.train_config(), short.network_config(), sink=sink)

    full = tiny_experiment(total_steps=6)
    uninterrupted = train(tiny_sampler(full), full.train_config(), full.network_config())

    restored = restore_state(load_checkpoint(tmp_path / 'run' / 'checkpoint_0000003.ckpt'))
    assert restored.step == 3
    resumed = train(tiny_sampler(full), full.train_config(), full.network_config(), state=restored)
    assert resumed.step == 6
    assert _same_parameters(resumed, uninterrupted)
    assert resumed.running == pytest.approx(uninterrupted.running)


def test_sink_receives_logs_and_checkpoints():
    cfg = tiny_experiment(total_steps=4, log_every=2, checkpoint_every=3)
    sink = RecordingSink()
    train(tiny_sampler(cfg), cfg.train_config(), cfg.network_config(), sink=sink)
    assert [step for step, _ in sink.logged] == [2, 4]
    assert sink.checkpoints == [(3, False), (4, True)]


def test_invalid_runs_are_rejected():
    cfg = tiny_experiment()
    with pytest.raises(ConfigurationError):
        parse_config(TrainConfig, {'total_steps': 0})
    with pytest.raises(ConfigurationError):
        train(tiny_sampler(cfg), TrainConfig.model_construct(total_steps=0), cfg.network_config())
    with pytest.raises(ConfigurationError):
        train(ListSource(np.zeros((0, 32, 32, 1), np.float32)), cfg.train_config(), cfg.network_config())
    with pytest.raises(ConfigurationError):
        init_state(cfg.network_config(), cfg.train_config().model_copy(update={'latent_dim': 9}))


def test_non_finite_batch_aborts_training():
    cfg = tiny_experiment()
    batch = np.full((4, 32, 32, 1), np.nan, dtype=np.float32)
    with pytest.raises(NumericError) as excinfo:
        train(ListSource(batch), cfg.train_config(), cfg.network_config())
    breakdown = excinfo.value.breakdown
    assert breakdown is not None
    assert not breakdown.is_finite()
    assert breakdown.alpha == cfg.alpha
    assert breakdown.gp_coefficient == cfg.gp_coefficient
    assert str(breakdown) in str(excinfo.value)


def test_critic_only_breakdown_leaves_eg_terms_unmeasured():
    breakdown = LossBreakdown.critic_only(1.5, 0.25, 1e-4, 10.0)
    assert (breakdown.l_d, breakdown.gp) == (1.5, 0.25)
    assert all(np.isnan([breakdown.l_eg, breakdown.l_r, breakdown.l_r_prime, breakdown.l_c, breakdown.l_star_eg]))
    assert not breakdown.is_finite()


@pytest.mark.slow
def test_overfits_a_single_image():
    cfg = tiny_experiment(alpha=1e-2, total_steps=200, latent_dim=16, log_every=10)
    sampler = tiny_sampler(cfg, n=1)
    sink = RecordingSink()
    train(sampler, cfg.train_config(), cfg.network_config(), sink=sink)
    l_r = {step: b.l_r for step, b in sink.logged}
    assert math.isfinite(l_r[200])
    assert l_r[200] <= 0.5 * l_r[10]

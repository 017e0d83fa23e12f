"""
Reconstruction-based anomaly scoring.

A(x) = (1 - lambda) * ||x - G(E(x))||_1
       + lambda * ||f_D(x, E(x)) - f_D(G(E(x)), E(x))||_1

Both feature evaluations use the same latent E(x). Texture images are scored
patch by patch and the image score is the maximum patch score.
"""

import logging
import math
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from anodet.config import CategorySpec
from anodet.data import Sample, preprocess_object, tile_texture_test, tile_image
from anodet.errors import ConfigurationError, NumericError
from anodet.losses import l1_per_sample

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.1


class ScoreRecord(BaseModel):
    """Anomaly score of one sample and its two components."""

    model_config = ConfigDict(populate_by_name=True)

    sample_id: str
    score: float
    l_r: float
    l_fd: float
    lambda_: float = Field(alias='lambda')
    mode: Literal['whole', 'tiled']
    patch_scores: Optional[List[float]] = None
    patch_index: Optional[int] = None
    label: Optional[Literal['normal', 'anomalous']] = None

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True)


def _as_batch(images, device=None, dtype=None) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        batch = images
    else:
        batch = torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32)))
    if dtype is not None or device is not None:
        batch = batch.to(device=device, dtype=dtype)
    return batch


def _module_placement(module) -> Tuple[Optional[torch.device], Optional[torch.dtype]]:
    try:
        p = next(module.parameters())
        return p.device, p.dtype
    except (AttributeError, StopIteration):
        return None, None


def _check_lambda(lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError('lambda', f"must be in [0, 1], got {lam}")


@torch.no_grad()
def reconstruct(encoder: Callable, generator: Callable, x) -> torch.Tensor:
    """G(E(x)) for a batch of images."""
    device, dtype = _module_placement(encoder)
    return generator(encoder(_as_batch(x, device, dtype)))


@torch.no_grad()
def score_components(encoder: Callable, generator: Callable, critic: Callable,
                     x) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-row (l_r, l_fd) for a batch of images."""
    device, dtype = _module_placement(encoder)
    x = _as_batch(x, device, dtype)
    z = encoder(x)
    x_rec = generator(z)
    _, f_real = critic(x, z)
    _, f_rec = critic(x_rec, z)
    return l1_per_sample(x, x_rec), l1_per_sample(f_real, f_rec)


def _blend(l_r: float, l_fd: float, lam: float) -> float:
    return (1 - lam) * l_r + lam * l_fd


def _finite(sample_id: str, *values: float):
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"non-finite anomaly score for {sample_id}")


def score_batch(encoder: Callable, generator: Callable, critic: Callable, images,
                lam: float = DEFAULT_LAMBDA, sample_ids: Optional[Sequence[str]] = None,
                labels: Optional[Sequence[Optional[str]]] = None) -> List[ScoreRecord]:
    """Whole-image records for a batch of images."""
    _check_lambda(lam)
    l_r, l_fd = score_components(encoder, generator, critic, images)
    records = []
    for i, (r, f) in enumerate(zip(l_r.tolist(), l_fd.tolist())):
        sample_id = sample_ids[i] if sample_ids else str(i)
        score = _blend(r, f, lam)
        _finite(sample_id, r, f, score)
        records.append(ScoreRecord(sample_id=sample_id, score=score, l_r=r, l_fd=f, lambda_=lam,
                                   mode='whole', label=labels[i] if labels else None))
    return records


def anomaly_score(encoder: Callable, generator: Callable, critic: Callable, image,
                  lam: float = DEFAULT_LAMBDA, sample_id: str = '',
                  label: Optional[str] = None) -> ScoreRecord:
    """Score a single (H, W, C) image in whole mode."""
    batch = _as_batch(image)[None]
    return score_batch(encoder, generator, critic, batch, lam, [sample_id], [label])[0]


def score_patches(encoder: Callable, generator: Callable, critic: Callable,
                  patches: Sequence[np.ndarray], lam: float = DEFAULT_LAMBDA,
                  sample_id: str = '', label: Optional[str] = None) -> ScoreRecord:
    """Tiled record: the max patch score, with that patch's components."""
    _check_lambda(lam)
    l_r, l_fd = score_components(encoder, generator, critic, np.stack(patches))
    l_r, l_fd = l_r.tolist(), l_fd.tolist()
    patch_scores = [_blend(r, f, lam) for r, f in zip(l_r, l_fd)]
    _finite(sample_id, *patch_scores)
    best = int(np.argmax(patch_scores))
    return ScoreRecord(sample_id=sample_id, score=patch_scores[best], l_r=l_r[best], l_fd=l_fd[best],
                       lambda_=lam, mode='tiled', patch_scores=patch_scores, patch_index=best, label=label)


def score_tiled(encoder: Callable, generator: Callable, critic: Callable, image: np.ndarray,
                lam: float = DEFAULT_LAMBDA, patch_side: int = 64, stride: Optional[int] = None,
                sample_id: str = '', label: Optional[str] = None) -> ScoreRecord:
    """Split an already-resized texture image into patches and max-aggregate."""
    patches = tile_image(np.asarray(image), patch_side, stride)
    return score_patches(encoder, generator, critic, patches, lam, sample_id, label)


def score_sample(models, sample: Sample, spec: CategorySpec, lam: float = DEFAULT_LAMBDA,
                 stride: Optional[int] = None) -> ScoreRecord:
    """Score a test sample with the pipeline its category kind selects."""
    label = sample.label if sample.split == 'test' else None
    if spec.kind == 'object':
        return anomaly_score(models.encoder, models.generator, models.critic,
                             preprocess_object(sample, spec), lam, sample.id, label)
    patches = tile_texture_test(sample, spec, stride)
    return score_patches(models.encoder, models.generator, models.critic, patches, lam, sample.id, label)

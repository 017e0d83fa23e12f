"""
Seeded synthetic defect corpus.

Normal images are a stationary texture family; anomalous test images are
fresh normals with one injected local defect (occluding rectangle, scratch
line or contrast blob). The corpus is written in the MVTec-AD layout so every
downstream tool reads it like the real dataset.
"""

import logging
import math
from pathlib import Path
from typing import List, Literal, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.ndimage import gaussian_filter
from skimage.draw import disk, polygon

from anodet.data import Sample, write_image

logger = logging.getLogger(__name__)

DefectKind = Literal['rectangle', 'scratch', 'blob']


class SynthSpec(BaseModel):
    """Size and appearance of a synthetic corpus."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    category: str = 'synthetic'
    n_train: int = Field(200, ge=1)
    n_test_normal: int = Field(40, ge=0)
    n_test_anomalous: int = Field(40, ge=0)
    image_side: int = Field(64, ge=16)
    channels: int = Field(3)
    family: Literal['stripes', 'noise'] = 'stripes'
    defect_fraction: float = Field(0.05, ge=0.0, le=0.5, description="defect area / image area")
    defect_kinds: Tuple[DefectKind, ...] = ('rectangle', 'scratch', 'blob')


def _stripes(rng: np.random.Generator, side: int, channels: int) -> np.ndarray:
    """Oriented sinusoid grating with small jitter in angle, period and phase."""
    angle = math.radians(30.0 + rng.normal(0.0, 3.0))
    period = side / 6.0 * (1.0 + rng.normal(0.0, 0.03))
    phase = rng.uniform(0.0, 2 * math.pi)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    wave = np.sin(2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase)
    image = 0.6 * wave + rng.normal(0.0, 0.05, size=(side, side))
    tint = np.array([1.0, 0.85, 0.7][:channels]) if channels == 3 else np.array([1.0])
    return image[:, :, None] * tint[None, None, :]


def _noise(rng: np.random.Generator, side: int, channels: int) -> np.ndarray:
    """Band-limited Gaussian noise, standardized to a fixed contrast."""
    white = rng.normal(0.0, 1.0, size=(side, side))
    smooth = gaussian_filter(white, sigma=side / 32.0, mode='wrap')
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-8)
    image = 0.35 * smooth
    return np.repeat(image[:, :, None], channels, axis=2)


def _rectangle(image: np.ndarray, rng: np.random.Generator, area: float):
    side = image.shape[0]
    w = max(1, int(round(math.sqrt(area) * rng.uniform(0.7, 1.3))))
    h = max(1, min(side, int(round(area / w))))
    w = min(w, side)
    top = rng.integers(0, side - h + 1)
    left = rng.integers(0, side - w + 1)
    image[top:top + h, left:left + w] = rng.choice([-0.95, 0.95])


def _scratch(image: np.ndarray, rng: np.random.Generator, area: float):
    side = image.shape[0]
    thickness = max(1.0, side / 32.0)
    length = min(area / thickness, side * 0.9)
    angle = rng.uniform(0.0, math.pi)
    cy, cx = rng.uniform(side * 0.25, side * 0.75, size=2)
    dy, dx = math.sin(angle) * length / 2, math.cos(angle) * length / 2
    ny, nx = math.cos(angle) * thickness / 2, -math.sin(angle) * thickness / 2
    rows = [cy - dy + ny, cy + dy + ny, cy + dy - ny, cy - dy - ny]
    cols = [cx - dx + nx, cx + dx + nx, cx + dx - nx, cx - dx - nx]
    rr, cc = polygon(rows, cols, shape=image.shape[:2])
    image[rr, cc] = -0.95


def _blob(image: np.ndarray, rng: np.random.Generator, area: float):
    side = image.shape[0]
    radius = max(1.0, math.sqrt(area / math.pi))
    cy, cx = rng.uniform(radius, side - radius, size=2)
    rr, cc = disk((cy, cx), radius, shape=image.shape[:2])
    image[rr, cc] = np.clip(image[rr, cc] + rng.choice([-1.2, 1.2]), -1.0, 1.0)


DEFECTS = {'rectangle': _rectangle, 'scratch': _scratch, 'blob': _blob}


def _normal_image(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    family = _stripes if spec.family == 'stripes' else _noise
    return np.clip(family(rng, spec.image_side, spec.channels), -1.0, 1.0)


def generate_synthetic_corpus(seed: int, spec: SynthSpec = SynthSpec()) -> Tuple[List[Sample], List[Sample]]:
    """
    Deterministic (train, test) corpus. With ``defect_fraction`` 0 the
    anomalous samples are plain normals that still carry the anomalous label.
    """
    total = spec.n_train + spec.n_test_normal + spec.n_test_anomalous
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(total)]
    area = spec.defect_fraction * spec.image_side ** 2
    name = spec.category

    train = [
        Sample(id=f"{name}/train/good/{i:03d}", label='normal', category=name, split='train',
               pixels=_normal_image(spec, streams[i]).astype(np.float32), channels=spec.channels)
        for i in range(spec.n_train)
    ]
    test = []
    for i in range(spec.n_test_normal):
        rng = streams[spec.n_train + i]
        test.append(Sample(id=f"{name}/test/good/{i:03d}", label='normal', category=name, split='test',
                           pixels=_normal_image(spec, rng).astype(np.float32), channels=spec.channels))
    for i in range(spec.n_test_anomalous):
        rng = streams[spec.n_train + spec.n_test_normal + i]
        kind = spec.defect_kinds[i % len(spec.defect_kinds)]
        image = _normal_image(spec, rng)
        if area > 0:
            DEFECTS[kind](image, rng, area)
        test.append(Sample(id=f"{name}/test/{kind}/{i:03d}", label='anomalous', category=name, split='test',
                           pixels=image.astype(np.float32), defect_type=kind, channels=spec.channels))

    logger.info(f"Generated synthetic corpus '{name}' (seed {seed}): {len(train)} train, {len(test)} test")
    return train, test


def write_corpus(train: List[Sample], test: List[Sample], root: Union[str, Path]) -> Path:
    """Write samples as PNGs under ``root/<category>/{train,test}/<defect_type>/``."""
    root = Path(root)
    for sample in train + test:
        directory = root / sample.category / sample.split / sample.defect_type
        directory.mkdir(parents=True, exist_ok=True)
        write_image(directory / f"{sample.id.rsplit('/', 1)[-1]}.png", sample.image())
    logger.info(f"Wrote {len(train) + len(test)} images to {root}")
    return root

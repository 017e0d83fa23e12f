"""
Dataset ingestion and per-category preprocessing.

Reads the MVTec-AD directory convention, normalizes pixels to [-1, 1], and
implements the two preprocessing pipelines:

- object: resize to a square side; random rotation on training images of
  rotation-eligible categories
- texture: resize to a large square; training draws random patches with a
  random clockwise rotation, testing tiles the image into a row-major grid

Rotation fills borders by reflection; resizing is bilinear and antialiased.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from skimage.transform import resize, rotate

from anodet.config import CategorySpec
from anodet.errors import AnodetError, ConfigurationError, IngestionError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')

Label = Literal['normal', 'anomalous']
Split = Literal['train', 'test']


@dataclass
class Sample:
    """
    One image of a category. Pixels are held in memory or read lazily from
    ``path``; ``label`` is None for images with no ground truth.
    """

    id: str
    label: Optional[Label]
    category: str
    split: Split
    path: Optional[Path] = None
    pixels: Optional[np.ndarray] = None
    defect_type: str = 'good'
    channels: int = 3

    @property
    def is_anomalous(self) -> bool:
        return self.label == 'anomalous'

    def image(self) -> np.ndarray:
        """Pixels as float32 (H, W, C) in [-1, 1] at native resolution."""
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise IngestionError(f"sample {self.id} has neither pixels nor a path", show_layout=False)
        return read_image(self.path, self.channels)


def read_image(path: Union[str, Path], channels: int = 3) -> np.ndarray:
    """Read an image file as float32 (H, W, C) in [-1, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert('L' if channels == 1 else 'RGB')
            array = np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(f"unreadable image {path}: {e}", show_layout=False) from e
    if array.ndim == 2:
        array = array[:, :, None]
    return array / 127.5 - 1.0


def write_image(path: Union[str, Path], image: np.ndarray):
    """Write a [-1, 1] (H, W, C) image as 8-bit PNG."""
    array = np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if array.shape[-1] == 1:
        array = array[:, :, 0]
    Image.fromarray(array).save(path, format='PNG')


def _image_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root: Union[str, Path], category: str,
                 channels: int = 3) -> Tuple[List[Sample], List[Sample]]:
    """
    Walk ``root/category/{train/good, test/<defect_or_good>}``.

    Test images under ``good`` are normal, every other defect folder is
    anomalous. Samples come back in sorted, reproducible order.
    """
    base = Path(root) / category
    train_dir = base / 'train' / 'good'
    test_dir = base / 'test'
    for required in (train_dir, test_dir):
        if not required.is_dir():
            raise IngestionError(f"missing directory {required}")

    train = [
        Sample(id=f"{category}/train/good/{p.stem}", label='normal', category=category,
               split='train', path=p, channels=channels)
        for p in _image_files(train_dir)
    ]
    if not train:
        raise IngestionError(f"no training images in {train_dir}")

    test = []
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
        label = 'normal' if defect_dir.name == 'good' else 'anomalous'
        for p in _image_files(defect_dir):
            test.append(Sample(id=f"{category}/test/{defect_dir.name}/{p.stem}", label=label,
                               category=category, split='test', path=p,
                               defect_type=defect_dir.name, channels=channels))

    n_anomalous = sum(s.is_anomalous for s in test)
    logger.info(f"Loaded '{category}': {len(train)} train, {len(test) - n_anomalous} normal test, "
                f"{n_anomalous} anomalous test")
    return train, test


def resize_square(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear, antialiased resize to (side, side, C), clipped to [-1, 1]."""
    if image.shape[0] == side and image.shape[1] == side:
        return image.astype(np.float32, copy=False)
    out = resize(image, (side, side, image.shape[2]), order=1, mode='reflect',
                 anti_aliasing=True, preserve_range=True)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def rotate_clockwise(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center with reflected borders; positive angles turn clockwise."""
    if degrees == 0:
        return image
    out = rotate(image, -degrees, order=1, mode='reflect', preserve_range=True)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def draw_rotation(spec: CategorySpec, rng: np.random.Generator) -> float:
    low, high = spec.rotation_range
    return float(rng.uniform(low, high))


def draw_texture_params(spec: CategorySpec, rng: np.random.Generator) -> Tuple[int, int, float]:
    """(top, left, clockwise angle) of one random training patch."""
    limit = spec.resize_side - spec.train_side
    top, left = (int(v) for v in rng.integers(0, limit + 1, size=2))
    angle = draw_rotation(spec, rng) if spec.rotation_range else 0.0
    return top, left, angle


def augment_object(resized: np.ndarray, spec: CategorySpec, split: Split,
                   rng: Optional[np.random.Generator]) -> np.ndarray:
    if split == 'train' and spec.rotation_range is not None and rng is not None:
        return rotate_clockwise(resized, draw_rotation(spec, rng))
    return resized


def augment_texture(resized: np.ndarray, spec: CategorySpec, rng: np.random.Generator) -> np.ndarray:
    top, left, angle = draw_texture_params(spec, rng)
    side = spec.train_side
    patch = resized[top:top + side, left:left + side]
    return rotate_clockwise(patch, angle)


def _require_kind(spec: CategorySpec, kind: str):
    if spec.kind != kind:
        raise ConfigurationError('kind', f"category '{spec.name}' is a {spec.kind}, not a {kind}")


def preprocess_object(sample: Sample, spec: CategorySpec,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Resize to the object side; rotate training images of eligible categories."""
    _require_kind(spec, 'object')
    resized = resize_square(sample.image(), spec.resize_side)
    return augment_object(resized, spec, sample.split, rng)


def preprocess_texture_train(sample: Sample, spec: CategorySpec,
                             rng: np.random.Generator) -> np.ndarray:
    """Resize, crop one random patch and rotate it clockwise."""
    _require_kind(spec, 'texture')
    if sample.split != 'train':
        raise ConfigurationError('split', "random patches are drawn from training images only")
    return augment_texture(resize_square(sample.image(), spec.resize_side), spec, rng)


def tile_image(image: np.ndarray, patch_side: int, stride: Optional[int] = None) -> List[np.ndarray]:
    """Row-major patches of ``patch_side``; the default stride gives a partition."""
    stride = stride or patch_side
    height, width = image.shape[:2]
    if (height - patch_side) % stride or (width - patch_side) % stride or patch_side > min(height, width):
        raise ConfigurationError(
            'patch_side', f"image {height}x{width} cannot be tiled by {patch_side} with stride {stride}"
        )
    return [
        image[top:top + patch_side, left:left + patch_side]
        for top in range(0, height - patch_side + 1, stride)
        for left in range(0, width - patch_side + 1, stride)
    ]


def untile(patches: Sequence[np.ndarray], side: int) -> np.ndarray:
    """Reassemble a row-major partition into a (side, side, C) image."""
    patch_side = patches[0].shape[0]
    per_row = side // patch_side
    rows = [np.concatenate(patches[r * per_row:(r + 1) * per_row], axis=1) for r in range(per_row)]
    return np.concatenate(rows, axis=0)


def tile_texture_test(sample: Sample, spec: CategorySpec, stride: Optional[int] = None) -> List[np.ndarray]:
    """Resize a test texture and split it into row-major patches."""
    _require_kind(spec, 'texture')
    return tile_image(resize_square(sample.image(), spec.resize_side), spec.train_side, stride)


def preprocess_test(sample: Sample, spec: CategorySpec) -> np.ndarray:
    """Deterministic test-time resize for either kind (the full image for textures)."""
    return resize_square(sample.image(), spec.resize_side)


class BatchSampler:
    """
    Draws augmented training batches from normal training samples.

    Resized images are cached once; every random draw comes from the ``rng``
    passed in, so the caller owns (and can checkpoint) the stream.
    """

    def __init__(self, samples: Sequence[Sample], spec: CategorySpec):
        if not samples:
            raise ConfigurationError('dataset', "no training samples")
        self.spec = spec
        self.samples = list(samples)
        self._resized = [resize_square(s.image(), spec.resize_side) for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def sample(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        indices = rng.integers(0, len(self.samples), size=batch_size)
        batch = []
        for i in indices:
            sample = self.samples[i]
            if sample.is_anomalous or sample.split != 'train':
                raise AnodetError(f"one-class violation: {sample.id} ({sample.label}) in a training batch")
            if self.spec.kind == 'object':
                batch.append(augment_object(self._resized[i], self.spec, 'train', rng))
            else:
                batch.append(augment_texture(self._resized[i], self.spec, rng))
        return np.stack(batch).astype(np.float32)
